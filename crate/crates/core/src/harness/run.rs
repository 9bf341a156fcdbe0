//! Campaign execution: the dynamics → signal → detect → estimate
//! pipeline over many cycles, with persistence and a reproducibility
//! manifest.
//!
//! Cycles map in parallel onto per-cycle seed streams; only cycles
//! whose timeline contains an ionization get the expensive trace
//! synthesis and fit, the rest are counted analytically. Results are
//! keyed and sorted by cycle id, so output files are byte-identical
//! regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use crate::detect::{find_events, fit_ionization_time, DetectionResult, FitModel};
use crate::dynamics::{simulate_cycle, EventTimeline};
use crate::estimate::{
    background_threshold, fit_lifetime, LifetimeFit, LifetimeMethod,
};
use crate::signal::{synthesize_trace, write_trace_binary, write_trace_csv};
use crate::harness::{seed_fanout, ExperimentConfig, Mode, Stage};
use crate::{Error, Result};

/// Reproducibility record of one campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub cycles: u64,
    /// Base seed of each stage stream (cycle 0), for audit.
    pub stage_seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub n_event_cycles: usize,
    pub n_detected: usize,
    pub wall_ms: BTreeMap<String, u128>,
}

/// Estimator outputs of one campaign.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub mode: Mode,
    pub cycles: u64,
    pub n_event_cycles: usize,
    pub n_detected: usize,
    pub event_probability_per_cycle: f64,
    /// Largest fitted ionization time (control runs report this as
    /// their derived background threshold).
    pub derived_t_min: Option<f64>,
    pub t_min_used: Option<f64>,
    pub lifetime_mle: Option<LifetimeFit>,
    pub lifetime_lsq: Option<LifetimeFit>,
    pub config_hash: String,
}

struct CycleOutcome {
    cycle: u64,
    timeline: EventTimeline,
    detections: Vec<DetectionResult>,
    trace_blob: Option<Vec<u8>>,
}

/// Run the full pipeline described by `cfg`, writing event CSVs,
/// sampled traces, the estimator summary and the manifest into
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io("creating output dir", e))?;
    let trace_dir = out.join("traces");
    fs::create_dir_all(&trace_dir).map_err(|e| Error::io("creating trace dir", e))?;

    let model = FitModel::from_configs(&cfg.trace, &cfg.transient, &cfg.schedule);
    let keep_every = if cfg.keep_traces.random_empty > 0 {
        (cfg.cycles / cfg.keep_traces.random_empty as u64).max(1)
    } else {
        u64::MAX
    };

    let t_start = Instant::now();
    let outcomes: Vec<CycleOutcome> = (0..cfg.cycles)
        .into_par_iter()
        .map(|cycle| -> Result<Option<CycleOutcome>> {
            let dyn_seed = seed_fanout(cfg.master_seed, Stage::Dynamics, cycle);
            let timeline = simulate_cycle(&cfg.schedule, &cfg.photophysics, dyn_seed)?;
            let keep_empty = cfg.keep_traces.random_empty > 0
                && seed_fanout(cfg.master_seed, Stage::TraceSample, cycle) % keep_every == 0;
            if timeline.first_ionization().is_none() && !keep_empty {
                return Ok(None);
            }

            let trace_seed = seed_fanout(cfg.master_seed, Stage::TraceNoise, cycle);
            let mut trace =
                synthesize_trace(&timeline, &cfg.schedule, &cfg.trace, &cfg.transient, trace_seed)?;
            trace.meta.cycle_id = cycle;
            trace.meta.seed = trace_seed;

            let mut detections = Vec::new();
            if timeline.first_ionization().is_some() {
                let cands =
                    find_events(&trace, cfg.trace.contrast(), cfg.trace.iq_angle, &cfg.detector)?;
                for c in &cands {
                    match fit_ionization_time(&trace, c, &model) {
                        Ok(r) => detections.push(r),
                        Err(Error::Fit(_)) => {}
                        Err(e) => return Err(e),
                    }
                }
                // keep the strongest detection first
                detections.sort_by(|a, b| {
                    (b.detected, b.amplitude)
                        .partial_cmp(&(a.detected, a.amplitude))
                        .unwrap_or(std::cmp::Ordering::Equal)
                });
            }

            let keep_trace = keep_empty
                || (cfg.keep_traces.detected && detections.iter().any(|d| d.detected));
            let trace_blob = if keep_trace {
                let mut blob = Vec::new();
                write_trace_binary(&mut blob, &trace)
                    .map_err(|e| Error::io("serializing trace", e))?;
                Some(blob)
            } else {
                None
            };

            Ok(Some(CycleOutcome {
                cycle,
                timeline,
                detections,
                trace_blob,
            }))
        })
        .collect::<Result<Vec<Option<CycleOutcome>>>>()?
        .into_iter()
        .flatten()
        .collect();
    let sim_ms = t_start.elapsed().as_millis();

    let mut outcomes = outcomes;
    outcomes.sort_by_key(|o| o.cycle);

    // --- persistence -------------------------------------------------
    let io_start = Instant::now();
    let mut artifacts = Vec::new();

    let events_path = out.join("events.csv");
    {
        let rows: Vec<DetectionResult> = outcomes
            .iter()
            .flat_map(|o| o.detections.iter().cloned())
            .collect();
        let mut f = fs::File::create(&events_path).map_err(|e| Error::io("events.csv", e))?;
        crate::detect::write_detections_csv(&mut f, &rows)
            .map_err(|e| Error::io("events.csv", e))?;
        artifacts.push(events_path.clone());
    }

    let timelines_path = out.join("timelines.csv");
    {
        let mut f =
            fs::File::create(&timelines_path).map_err(|e| Error::io("timelines.csv", e))?;
        crate::dynamics::write_timelines(
            &mut f,
            outcomes
                .iter()
                .filter(|o| !o.timeline.is_empty())
                .map(|o| (o.cycle, o.timeline.clone())),
        )
        .map_err(|e| Error::io("timelines.csv", e))?;
        artifacts.push(timelines_path);
    }

    let mut stored = 0u32;
    for o in &outcomes {
        if let Some(blob) = &o.trace_blob {
            if stored >= cfg.keep_traces.max_stored {
                break;
            }
            let path = trace_dir.join(format!("cycle_{:09}.iqt", o.cycle));
            fs::write(&path, blob).map_err(|e| Error::io("trace file", e))?;
            stored += 1;
        }
    }

    // --- analysis ----------------------------------------------------
    let n_event_cycles = outcomes
        .iter()
        .filter(|o| o.timeline.first_ionization().is_some())
        .count();
    let detected: Vec<&DetectionResult> = outcomes
        .iter()
        .filter_map(|o| o.detections.iter().find(|d| d.detected))
        .collect();
    let detected_times: Vec<f64> = detected.iter().map(|d| d.t_ion).collect();

    let derived_t_min = background_threshold(&detected_times).ok();
    let t_min_used = match cfg.mode {
        Mode::Control => None,
        _ => cfg.t_min,
    };
    let (lifetime_mle, lifetime_lsq) = match (cfg.mode, t_min_used) {
        (Mode::Pulsed, Some(t_min)) => (
            fit_lifetime(&detected_times, t_min, LifetimeMethod::MaxLikelihood).ok(),
            fit_lifetime(&detected_times, t_min, LifetimeMethod::LeastSquares).ok(),
        ),
        _ => (None, None),
    };

    let summary = AnalysisSummary {
        mode: cfg.mode,
        cycles: cfg.cycles,
        n_event_cycles,
        n_detected: detected.len(),
        event_probability_per_cycle: n_event_cycles as f64 / cfg.cycles as f64,
        derived_t_min,
        t_min_used,
        lifetime_mle,
        lifetime_lsq,
        config_hash: cfg.digest()?,
    };
    let summary_path = out.join("analysis.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Parse(e.to_string()))?,
    )
    .map_err(|e| Error::io("analysis.json", e))?;
    artifacts.push(summary_path);

    let config_path = out.join("config.toml");
    fs::write(&config_path, cfg.to_toml_string()?)
        .map_err(|e| Error::io("config.toml", e))?;
    artifacts.push(config_path);

    let mut stage_seeds = BTreeMap::new();
    for (name, stage) in [
        ("dynamics", Stage::Dynamics),
        ("trace_noise", Stage::TraceNoise),
        ("trace_sample", Stage::TraceSample),
    ] {
        stage_seeds.insert(name.to_string(), seed_fanout(cfg.master_seed, stage, 0));
    }
    let mut wall_ms = BTreeMap::new();
    wall_ms.insert("simulate".to_string(), sim_ms);
    wall_ms.insert("persist".to_string(), io_start.elapsed().as_millis());

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: summary.config_hash.clone(),
        master_seed: cfg.master_seed,
        cycles: cfg.cycles,
        stage_seeds,
        artifacts,
        n_event_cycles,
        n_detected: detected.len(),
        wall_ms,
    };
    let manifest_path = out.join("manifest.json");
    let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io("manifest.json", e))?;
    f.write_all(
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Parse(e.to_string()))?
            .as_bytes(),
    )
    .map_err(|e| Error::io("manifest.json", e))?;

    Ok(manifest)
}

/// In-memory campaign: run the dynamics → signal → detect pipeline
/// and return the detected ionization times without touching the
/// filesystem. Used by the figure pipelines and statistical tests.
pub fn detected_event_times(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let model = FitModel::from_configs(&cfg.trace, &cfg.transient, &cfg.schedule);
    let times: Vec<f64> = (0..cfg.cycles)
        .into_par_iter()
        .map(|cycle| -> Result<Option<f64>> {
            let dyn_seed = seed_fanout(cfg.master_seed, Stage::Dynamics, cycle);
            let timeline = simulate_cycle(&cfg.schedule, &cfg.photophysics, dyn_seed)?;
            if timeline.first_ionization().is_none() {
                return Ok(None);
            }
            let trace_seed = seed_fanout(cfg.master_seed, Stage::TraceNoise, cycle);
            let trace =
                synthesize_trace(&timeline, &cfg.schedule, &cfg.trace, &cfg.transient, trace_seed)?;
            let cands =
                find_events(&trace, cfg.trace.contrast(), cfg.trace.iq_angle, &cfg.detector)?;
            let mut best: Option<DetectionResult> = None;
            for c in &cands {
                if let Ok(r) = fit_ionization_time(&trace, c, &model) {
                    if r.detected && best.as_ref().map_or(true, |b| r.amplitude > b.amplitude) {
                        best = Some(r);
                    }
                }
            }
            Ok(best.map(|b| b.t_ion))
        })
        .collect::<Result<Vec<Option<f64>>>>()?
        .into_iter()
        .flatten()
        .collect();
    Ok(times)
}

/// Export a stored trace back to CSV (used by the CLI).
pub fn trace_to_csv(binary_path: &std::path::Path, csv_path: &std::path::Path) -> Result<()> {
    let mut data =
        fs::File::open(binary_path).map_err(|e| Error::io("opening trace", e))?;
    let trace = crate::signal::read_trace_binary(&mut data)?;
    let mut f = fs::File::create(csv_path).map_err(|e| Error::io("writing trace csv", e))?;
    write_trace_csv(&mut f, &trace).map_err(|e| Error::io("writing trace csv", e))
}
