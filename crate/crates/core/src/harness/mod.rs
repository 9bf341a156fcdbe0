//! Experiment orchestration: configuration, seeded Monte Carlo
//! campaigns, end-to-end analysis pipelines and result persistence.

mod config;
mod figures;
mod run;
mod seed;

pub use config::{
    calibrate_excitation_rate, ExperimentConfig, KeepTraces, Mode, PresetName,
};
pub use figures::{list_figure_tags, measure_snr_points, reproduce_figure, FigureTag};
pub use run::{detected_event_times, run_experiment, trace_to_csv, AnalysisSummary, RunManifest};
pub use seed::{seed_fanout, Stage};
