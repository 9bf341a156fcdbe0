//! Plot-ready reproductions of the published figures, as CSV tables.

use serde::Serialize;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::circuit::reflection_sweep;
use crate::detect::{time_resolution_curve, DetectorConfig, FitModel};
use crate::dynamics::{simulate_cycle, survival_from_times};
use crate::estimate::{
    background_threshold, fit_lifetime, fit_snr_scaling, infidelity_vs_reset, overall_fidelity,
    FidelityPipeline, LifetimeMethod, SnrFit, SnrPoint,
};
use crate::signal::{dc_channel, synthesize_trace, DcChannelConfig, TraceConfig};
use crate::harness::{detected_event_times, seed_fanout, ExperimentConfig, PresetName, Stage};
use crate::{Error, Result};

/// Supported figure tags.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureTag {
    Fig1b,
    Fig2b,
    Fig3a,
    Fig3b,
    Fig3c,
    Fig4b,
    Fig4c,
}

pub fn list_figure_tags() -> &'static [&'static str] {
    &["fig1b", "fig2b", "fig3a", "fig3b", "fig3c", "fig4b", "fig4c"]
}

impl FromStr for FigureTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "fig1b" => FigureTag::Fig1b,
            "fig2b" => FigureTag::Fig2b,
            "fig3a" => FigureTag::Fig3a,
            "fig3b" => FigureTag::Fig3b,
            "fig3c" => FigureTag::Fig3c,
            "fig4b" => FigureTag::Fig4b,
            "fig4c" => FigureTag::Fig4c,
            other => {
                return Err(Error::config(format!(
                    "unknown figure tag `{other}`; available: {}",
                    list_figure_tags().join(", ")
                )))
            }
        })
    }
}

fn write_csv(path: &Path, header: &str, rows: &[Vec<f64>]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io("figure csv", e))?;
    writeln!(f, "{header}").map_err(|e| Error::io("figure csv", e))?;
    for row in rows {
        let line = row
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(f, "{line}").map_err(|e| Error::io("figure csv", e))?;
    }
    Ok(())
}

/// Measure SNR at several integration times from boxcar windows of
/// synthetic flat traces at the two charge-state levels.
pub fn measure_snr_points(
    cfg: &TraceConfig,
    t_ints: &[f64],
    n_windows: usize,
    master_seed: u64,
) -> Result<Vec<SnrPoint>> {
    use crate::dynamics::{EventTimeline, PulseSchedule};
    use crate::signal::LaserTransient;

    let schedule = PulseSchedule {
        power: 0.0,
        ..PulseSchedule::pulsed_default()
    };
    let quiet_transient = LaserTransient {
        jump_amplitude: 0.0,
        ..LaserTransient::default()
    };
    let contrast = cfg.contrast();
    let (sin_a, cos_a) = cfg.iq_angle.sin_cos();

    let mut out = Vec::with_capacity(t_ints.len());
    for (pi, &t_int) in t_ints.iter().enumerate() {
        let w = (t_int / cfg.dt()).round().max(1.0) as usize;
        // one long flat trace per cluster, chopped into windows
        let mk_points = |which: u64, offset: (f64, f64)| -> Result<Vec<(f64, f64)>> {
            let mut pts = Vec::with_capacity(n_windows);
            let mut produced = 0usize;
            let mut chunk = 0u64;
            while produced < n_windows {
                let windows_per_trace = 512usize;
                let local = TraceConfig {
                    start_time: 0.0,
                    duration: (windows_per_trace * w) as f64 * cfg.dt(),
                    contrast_jitter: 0.0,
                    ..cfg.clone()
                };
                let seed = seed_fanout(
                    master_seed ^ which,
                    Stage::SnrMeasure,
                    (pi as u64) << 32 | chunk,
                );
                let tr = synthesize_trace(
                    &EventTimeline::default(),
                    &schedule,
                    &local,
                    &quiet_transient,
                    seed,
                )?;
                for k in 0..windows_per_trace {
                    if produced >= n_windows {
                        break;
                    }
                    let lo = k * w;
                    let i_mean = tr.i[lo..lo + w].iter().sum::<f64>() / w as f64;
                    let q_mean = tr.q[lo..lo + w].iter().sum::<f64>() / w as f64;
                    pts.push((i_mean + offset.0, q_mean + offset.1));
                    produced += 1;
                }
                chunk += 1;
            }
            Ok(pts)
        };
        let neutral = mk_points(0x6e65, (0.0, 0.0))?;
        let ionized = mk_points(0x696f, (-contrast * cos_a, -contrast * sin_a))?;
        let snr = crate::estimate::compute_snr(&neutral, &ionized)?;
        out.push(SnrPoint { t_int, snr });
    }
    Ok(out)
}

#[derive(Serialize)]
struct Fig4bSummary {
    snr_1us: f64,
    snr_1us_err: f64,
    t0_us: f64,
    t0_err_us: f64,
}

/// Reproduce one figure into `out_dir`; returns the written files.
pub fn reproduce_figure(tag: FigureTag, out_dir: &Path, master_seed: u64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io("figure output dir", e))?;
    match tag {
        FigureTag::Fig1b => fig1b(out_dir),
        FigureTag::Fig2b => fig2b(out_dir, master_seed),
        FigureTag::Fig3a => fig3a(out_dir, master_seed),
        FigureTag::Fig3b => fig3b(out_dir, master_seed, 300),
        FigureTag::Fig3c => fig3c(out_dir, master_seed),
        FigureTag::Fig4b => fig4b(out_dir, master_seed),
        FigureTag::Fig4c => fig4c(out_dir, master_seed, 500),
    }
}

fn fig1b(out_dir: &Path) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::preset(PresetName::Er2)?;
    let p = crate::circuit::ResonatorParams::for_resonance(
        336.1e6,
        cfg.resonator.loaded_quality_factor,
        cfg.resonator.line_impedance,
    )?;
    let r = p.matched_resistance();
    let f0 = p.match_frequency();
    let span = 10.0 * f0 / p.loaded_quality_factor;
    let sweep = reflection_sweep(&p, r, f0 - span / 2.0, f0 + span / 2.0, 2001)?;
    let path = out_dir.join("fig1b_reflection.csv");
    write_csv(
        &path,
        "frequency_hz,gamma_magnitude",
        &sweep.iter().map(|&(f, g)| vec![f, g]).collect::<Vec<_>>(),
    )?;
    Ok(vec![path])
}

fn fig2b(out_dir: &Path, master_seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::preset(PresetName::Cw)?;
    // find a cycle with at least two ionization/reset pairs
    let mut chosen = None;
    for k in 0..2000 {
        let seed = seed_fanout(master_seed, Stage::Dynamics, k);
        let tl = simulate_cycle(&cfg.schedule, &cfg.photophysics, seed)?;
        let pairs = tl
            .ionization_intervals()
            .iter()
            .filter(|(_, r)| r.is_some())
            .count();
        if pairs >= 2 {
            chosen = Some((k, tl));
            break;
        }
    }
    let (cycle, tl) =
        chosen.ok_or_else(|| Error::Fit("no CW cycle with two pairs found".into()))?;

    let trace_seed = seed_fanout(master_seed, Stage::TraceNoise, cycle);
    let trace = synthesize_trace(&tl, &cfg.schedule, &cfg.trace, &cfg.transient, trace_seed)?;
    let mag = trace.magnitude();
    let rf_rows: Vec<Vec<f64>> = (0..trace.len())
        .step_by(10) // 5 MS/s is plenty for a millisecond plot
        .map(|k| vec![trace.time_at(k), mag[k]])
        .collect();
    let rf_path = out_dir.join("fig2b_rf.csv");
    write_csv(&rf_path, "time_s,v_r_magnitude_V", &rf_rows)?;

    let dc_cfg = DcChannelConfig {
        duration: cfg.schedule.cycle_length,
        ..DcChannelConfig::default()
    };
    let dc = dc_channel(&tl, 2e3, &dc_cfg)?;
    let dc_rows: Vec<Vec<f64>> = (0..dc.current.len())
        .map(|k| vec![dc.start_time + k as f64 * dc.dt, dc.current[k]])
        .collect();
    let dc_path = out_dir.join("fig2b_dc.csv");
    write_csv(&dc_path, "time_s,current_A", &dc_rows)?;

    let mut ev_path = out_dir.join("fig2b_events.csv");
    let rows: Vec<Vec<f64>> = tl
        .ionization_intervals()
        .iter()
        .filter_map(|&(ti, tr)| tr.map(|t| vec![ti, t]))
        .collect();
    write_csv(&ev_path, "ionize_s,reset_s", &rows)?;
    ev_path = out_dir.join("fig2b_events.csv");
    Ok(vec![rf_path, dc_path, ev_path])
}

fn fig3a(out_dir: &Path, master_seed: u64) -> Result<Vec<PathBuf>> {
    let mut cfg = ExperimentConfig::preset(PresetName::Er2)?;
    // boost the excitation rate so representative event cycles are
    // found quickly; the ionization-time statistics are unchanged
    cfg.photophysics.excitation_rate_per_power *= 300.0;
    let model = FitModel::from_configs(&cfg.trace, &cfg.transient, &cfg.schedule);

    // (label, t_ion window): isolated, shortly-after-pulse, in-pulse
    let classes: [(&str, f64, f64); 3] = [
        ("blue", cfg.transient.impact_window, 4e-6),
        ("green", 0.2e-6, 0.7e-6),
        ("grey", 0.0, 0.13e-6),
    ];
    let mut paths = Vec::new();
    let mut fitted_rows: Vec<Vec<f64>> = Vec::new();
    for (ci, &(label, lo, hi)) in classes.iter().enumerate() {
        let mut found = None;
        for k in 0..200_000u64 {
            let seed = seed_fanout(master_seed.wrapping_add(ci as u64), Stage::Dynamics, k);
            let tl = simulate_cycle(&cfg.schedule, &cfg.photophysics, seed)?;
            if let Some(t) = tl.first_ionization() {
                if t > lo && t < hi {
                    found = Some((k, tl));
                    break;
                }
            }
        }
        let (cycle, tl) = found
            .ok_or_else(|| Error::Fit(format!("no event found for the {label} trace class")))?;
        let trace_seed = seed_fanout(master_seed, Stage::TraceNoise, cycle);
        let trace = synthesize_trace(&tl, &cfg.schedule, &cfg.trace, &cfg.transient, trace_seed)?;
        // relative amplitude: subtract the pre-pulse mean
        let base = trace.pre_trigger_mean(cfg.trace.iq_angle).unwrap_or(0.0);
        let proj = trace.project(cfg.trace.iq_angle);
        let rows: Vec<Vec<f64>> = (0..trace.len())
            .map(|k| vec![trace.time_at(k), proj[k] - base])
            .collect();
        let path = out_dir.join(format!("fig3a_trace_{label}.csv"));
        write_csv(&path, "time_s,delta_v_r_V", &rows)?;
        paths.push(path);

        let cands = crate::detect::find_events(
            &trace,
            cfg.trace.contrast(),
            cfg.trace.iq_angle,
            &cfg.detector,
        )?;
        if let Some(c) = cands.first() {
            if let Ok(r) = crate::detect::fit_ionization_time(&trace, c, &model) {
                fitted_rows.push(vec![ci as f64, tl.first_ionization().unwrap(), r.t_ion]);
            }
        }
    }
    let fit_path = out_dir.join("fig3a_fitted_times.csv");
    write_csv(&fit_path, "class,true_t_ion_s,fitted_t_ion_s", &fitted_rows)?;
    paths.push(fit_path);
    Ok(paths)
}

fn fig3b(out_dir: &Path, master_seed: u64, n_mc: usize) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::preset(PresetName::Er2)?;
    let model = FitModel::from_configs(&cfg.trace, &cfg.transient, &cfg.schedule);
    let grid: Vec<f64> = [
        0.08, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.8, 1.0, 1.5, 2.0, 2.5, 3.0,
    ]
    .iter()
    .map(|u| u * 1e-6)
    .collect();
    let curve = time_resolution_curve(
        &grid,
        &cfg.schedule,
        &cfg.trace,
        &cfg.transient,
        &cfg.detector,
        &model,
        n_mc,
        master_seed,
    )?;
    let path = out_dir.join("fig3b_resolution.csv");
    write_csv(
        &path,
        "t_ion_s,resolution_s,bootstrap_err_s,n_fits",
        &curve
            .iter()
            .map(|p| vec![p.t_ion, p.rms, p.bootstrap_err, p.n_fits as f64])
            .collect::<Vec<_>>(),
    )?;
    Ok(vec![path])
}

fn fig3c(out_dir: &Path, master_seed: u64) -> Result<Vec<PathBuf>> {
    // control first: derives the background threshold
    let mut control = ExperimentConfig::preset(PresetName::Control)?;
    control.cycles = 3_000_000;
    control.master_seed = master_seed;
    let control_times = detected_event_times(&control)?;
    let t_min = background_threshold(&control_times)?;

    let mut er2 = ExperimentConfig::preset(PresetName::Er2)?;
    er2.cycles = 2_000_000;
    er2.master_seed = master_seed.wrapping_add(1);
    let er2_times = detected_event_times(&er2)?;

    let grid: Vec<f64> = (0..120).map(|i| i as f64 * 50e-9).collect();
    let path_er2 = out_dir.join("fig3c_er2.csv");
    write_csv(
        &path_er2,
        "time_s,n_remaining",
        &survival_from_times(&er2_times, &grid)
            .iter()
            .map(|&(t, n)| vec![t, n as f64])
            .collect::<Vec<_>>(),
    )?;
    let path_control = out_dir.join("fig3c_control.csv");
    write_csv(
        &path_control,
        "time_s,n_remaining",
        &survival_from_times(&control_times, &grid)
            .iter()
            .map(|&(t, n)| vec![t, n as f64])
            .collect::<Vec<_>>(),
    )?;

    let mle = fit_lifetime(&er2_times, t_min, LifetimeMethod::MaxLikelihood)?;
    let lsq = fit_lifetime(&er2_times, t_min, LifetimeMethod::LeastSquares)?;
    let fit_path = out_dir.join("fig3c_fit.json");
    fs::write(
        &fit_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "t_min_s": t_min,
            "mle": mle,
            "least_squares": lsq,
        }))
        .map_err(|e| Error::Parse(e.to_string()))?,
    )
    .map_err(|e| Error::io("fig3c_fit.json", e))?;

    Ok(vec![path_er2, path_control, fit_path])
}

fn fig4b(out_dir: &Path, master_seed: u64) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::preset(PresetName::Er2)?;
    let t_ints = [0.25e-6, 0.5e-6, 1e-6, 2e-6, 4e-6];
    let points = measure_snr_points(&cfg.trace, &t_ints, 10_000, master_seed)?;
    let fit: SnrFit = fit_snr_scaling(&points)?;
    let path = out_dir.join("fig4b_snr.csv");
    write_csv(
        &path,
        "t_int_s,snr_measured,snr_fit",
        &points
            .iter()
            .map(|p| vec![p.t_int, p.snr, fit.snr_at(p.t_int)])
            .collect::<Vec<_>>(),
    )?;
    let summary_path = out_dir.join("fig4b_fit.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&Fig4bSummary {
            snr_1us: fit.snr_1us,
            snr_1us_err: fit.snr_1us_err,
            t0_us: fit.t0 * 1e6,
            t0_err_us: fit.t0_err * 1e6,
        })
        .map_err(|e| Error::Parse(e.to_string()))?,
    )
    .map_err(|e| Error::io("fig4b_fit.json", e))?;
    println!(
        "fig4b: snr_1us = {:.3} ± {:.3}, t0 = {:.3} ± {:.3} µs",
        fit.snr_1us,
        fit.snr_1us_err,
        fit.t0 * 1e6,
        fit.t0_err * 1e6
    );
    Ok(vec![path, summary_path])
}

fn fig4c(out_dir: &Path, master_seed: u64, n_mc: usize) -> Result<Vec<PathBuf>> {
    let cfg = ExperimentConfig::preset(PresetName::Er2)?;
    // known event amplitude: keep the edge search tight
    let model = FitModel {
        search_before: 0.35e-6,
        ..FitModel::from_configs(&cfg.trace, &cfg.transient, &cfg.schedule)
    };
    let detector = DetectorConfig::sensitive();
    let fidelity_trace = TraceConfig {
        contrast_jitter: 0.0, // expected signal amplitude, measured noise
        duration: 12e-6,
        ..cfg.trace.clone()
    };
    let pipeline = FidelityPipeline {
        schedule: &cfg.schedule,
        trace: &fidelity_trace,
        transient: &cfg.transient,
        detector: &detector,
        model: &model,
        event_time: 3e-6,
    };
    let durations: Vec<f64> = [
        0.03, 0.05, 0.08, 0.12, 0.17, 0.25, 0.35, 0.5, 0.7, 1.0,
    ]
    .iter()
    .map(|u| u * 1e-6)
    .collect();
    let curve = infidelity_vs_reset(&durations, &pipeline, n_mc, master_seed)?;
    let fidelity = overall_fidelity(&curve, cfg.photophysics.reset_time_constant)?;
    let path = out_dir.join("fig4c_infidelity.csv");
    write_csv(
        &path,
        "duration_s,infidelity,binomial_err",
        &curve
            .iter()
            .map(|p| vec![p.duration, p.infidelity, p.err])
            .collect::<Vec<_>>(),
    )?;
    let summary_path = out_dir.join("fig4c_summary.json");
    fs::write(
        &summary_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "overall_fidelity": fidelity,
            "tau_reset_s": cfg.photophysics.reset_time_constant,
        }))
        .map_err(|e| Error::Parse(e.to_string()))?,
    )
    .map_err(|e| Error::io("fig4c_summary.json", e))?;
    println!("fig4c: overall fidelity = {:.5}", fidelity);
    Ok(vec![path, summary_path])
}
