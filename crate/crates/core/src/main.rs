//! Command-line front end for the photoionization readout toolkit.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use photoion::estimate::{fit_lifetime, LifetimeMethod};
use photoion::harness::{
    reproduce_figure, run_experiment, ExperimentConfig, FigureTag,
};
use photoion::signal::calibrate_noise;

#[derive(Parser)]
#[command(
    name = "photoion",
    version,
    about = "Simulate and analyze RF-reflectometry photoionization readout"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulated campaign from a config file (or `preset:<name>`).
    Simulate {
        /// Path to a TOML config, or preset:er1|er2|control|cw.
        config: String,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the cycle count.
        #[arg(long)]
        cycles: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        threads: Option<usize>,
        /// How many random empty traces to keep alongside detected ones.
        #[arg(long)]
        keep_traces: Option<u32>,
    },
    /// Fit lifetimes from a previously written events CSV.
    Analyze {
        /// events.csv produced by `simulate`.
        events: PathBuf,
        /// Background-exclusion threshold in seconds.
        #[arg(long)]
        t_min: Option<f64>,
        /// Write the JSON summary here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Regenerate a published figure as CSV tables.
    Reproduce {
        /// One of: fig1b, fig2b, fig3a, fig3b, fig3c, fig4b, fig4c.
        tag: String,
        #[arg(long, default_value = "figures")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Calibrate the per-sample noise sigma for a config's SNR target.
    CalibrateNoise {
        /// Path to a TOML config, or preset:<name>.
        config: String,
        /// Target characteristic SNR at 1 µs effective integration.
        #[arg(long, default_value_t = 9.6)]
        target_snr: f64,
    },
    /// Print a built-in preset config as TOML.
    Preset {
        /// er1, er2, control or cw.
        name: String,
    },
    /// Convert a stored binary trace to CSV.
    ExportTrace {
        /// A traces/cycle_*.iqt file from a simulate run.
        trace: PathBuf,
        /// Output CSV path.
        out: PathBuf,
    },
}

fn set_threads(threads: Option<usize>) {
    if let Some(n) = threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn run() -> photoion::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            config,
            seed,
            cycles,
            out,
            threads,
            keep_traces,
        } => {
            set_threads(threads);
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(c) = cycles {
                cfg.cycles = c;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            if let Some(k) = keep_traces {
                cfg.keep_traces.random_empty = k;
            }
            let manifest = run_experiment(&cfg)?;
            println!(
                "simulate: {} cycles, {} event cycles, {} detected -> {}",
                manifest.cycles,
                manifest.n_event_cycles,
                manifest.n_detected,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Analyze { events, t_min, out } => {
            let file = std::fs::File::open(&events)
                .map_err(|e| photoion::Error::io("opening events csv", e))?;
            let rows = photoion::detect::read_detections_csv(std::io::BufReader::new(file))?;
            let times: Vec<f64> = rows.iter().filter(|r| r.detected).map(|r| r.t_ion).collect();
            let t_min = t_min.unwrap_or(0.0);
            let mle = fit_lifetime(&times, t_min, LifetimeMethod::MaxLikelihood)?;
            let lsq = fit_lifetime(&times, t_min, LifetimeMethod::LeastSquares)?;
            let summary = serde_json::json!({
                "n_rows": rows.len(),
                "n_detected": times.len(),
                "t_min_s": t_min,
                "lifetime_mle": mle,
                "lifetime_least_squares": lsq,
            });
            let text = serde_json::to_string_pretty(&summary)
                .map_err(|e| photoion::Error::Parse(e.to_string()))?;
            match out {
                Some(path) => std::fs::write(&path, text)
                    .map_err(|e| photoion::Error::io("writing analysis", e))?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::Reproduce {
            tag,
            out,
            seed,
            threads,
        } => {
            set_threads(threads);
            let tag: FigureTag = tag.parse()?;
            let files = reproduce_figure(tag, &out, seed)?;
            for f in files {
                println!("wrote {}", f.display());
            }
            Ok(())
        }
        Command::CalibrateNoise { config, target_snr } => {
            let cfg = ExperimentConfig::load(&config)?;
            let sigma = calibrate_noise(target_snr, cfg.trace.contrast(), &cfg.trace)?;
            println!(
                "{}",
                serde_json::json!({
                    "target_snr_1us": target_snr,
                    "contrast_V": cfg.trace.contrast(),
                    "noise_sigma_per_sample_V": sigma,
                })
            );
            Ok(())
        }
        Command::Preset { name } => {
            let cfg = ExperimentConfig::preset(name.parse()?)?;
            print!("{}", cfg.to_toml_string()?);
            Ok(())
        }
        Command::ExportTrace { trace, out } => {
            photoion::harness::trace_to_csv(&trace, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
