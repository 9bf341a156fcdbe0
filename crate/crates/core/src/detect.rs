//! Event recovery from readout traces.
//!
//! Detection runs in two stages. [`find_events`] projects the trace
//! onto the known signal direction, normalizes it to ionization depth
//! and applies hysteresis thresholding on a lightly smoothed copy,
//! producing candidate (start, end) intervals of the ionized level.
//! [`fit_ionization_time`] then fits each candidate with the full
//! template — low-pass-filtered charge steps plus the laser transient
//! — refining the ionization (and, when visible, reset) time to a
//! small fraction of a sample and deciding whether the candidate is a
//! real event from its fitted amplitude.
//!
//! The nonlinear part of the fit is only the edge times; every
//! amplitude is linear, so each trial time costs one small
//! least-squares solve and the search is a coarse grid followed by
//! golden-section refinement.

use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::signal::{FilterResponse, IQTrace, LaserTransient, TraceConfig};
use crate::dynamics::PulseSchedule;
use crate::{Error, Result};

/// Hysteresis detector settings. Thresholds are fractions of the
/// readout contrast, measured from the neutral level.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorConfig {
    /// Depth that opens a candidate.
    pub threshold_fraction: f64,
    /// Depth that closes it again.
    pub release_fraction: f64,
    /// Boxcar length (samples) applied before thresholding.
    pub smooth_samples: usize,
    /// Minimum candidate width (samples) on the smoothed depth.
    pub min_width_samples: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            threshold_fraction: 0.5,
            release_fraction: 0.3,
            // half a microsecond at the default sample rate: the same
            // integration scale that sets the quoted SNR, which puts
            // the 0.5-contrast threshold near five sigma of the
            // smoothed noise
            smooth_samples: 35,
            min_width_samples: 5,
        }
    }
}

impl DetectorConfig {
    /// Permissive settings used by the fidelity pipeline, where the
    /// amplitude acceptance of the fit stage does the discrimination.
    pub fn sensitive() -> Self {
        DetectorConfig {
            threshold_fraction: 0.35,
            release_fraction: 0.25,
            smooth_samples: 3,
            min_width_samples: 3,
        }
    }
}

/// Candidate interval of the ionized level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub start_idx: usize,
    pub end_idx: usize,
    pub start_time: f64,
    pub end_time: f64,
    /// True when the interval ran into the end of the trace, so no
    /// reset edge is available.
    pub clipped: bool,
}

impl Candidate {
    pub fn overlaps(&self, t0: f64, t1: f64) -> bool {
        self.start_time <= t1 && self.end_time >= t0
    }
}

fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    if w <= 1 {
        return x.to_vec();
    }
    let n = x.len();
    let half = w / 2;
    let mut out = Vec::with_capacity(n);
    let mut acc = 0.0;
    let mut lo = 0usize;
    let mut hi = 0usize; // exclusive
    for k in 0..n {
        let want_lo = k.saturating_sub(half);
        let want_hi = (k + w - half).min(n);
        while hi < want_hi {
            acc += x[hi];
            hi += 1;
        }
        while lo < want_lo {
            acc -= x[lo];
            lo += 1;
        }
        out.push(acc / (hi - lo) as f64);
    }
    out
}

/// Find candidate ionization intervals by hysteresis thresholding of
/// the normalized depth along the signal direction.
///
/// `contrast` is the signed neutral-minus-ionized level difference;
/// the baseline is taken from the pre-trigger span when present,
/// otherwise from the first tenth of the trace.
pub fn find_events(
    trace: &IQTrace,
    contrast: f64,
    iq_angle: f64,
    cfg: &DetectorConfig,
) -> Result<Vec<Candidate>> {
    if contrast == 0.0 {
        return Err(Error::domain("contrast must be nonzero"));
    }
    if cfg.release_fraction >= cfg.threshold_fraction {
        return Err(Error::config("release must lie below the enter threshold"));
    }
    let proj = trace.project(iq_angle);
    let baseline = trace.pre_trigger_mean(iq_angle).unwrap_or_else(|| {
        let n = (proj.len() / 10).max(1);
        proj[..n].iter().sum::<f64>() / n as f64
    });
    let depth: Vec<f64> = proj.iter().map(|&v| (baseline - v) / contrast).collect();
    let depth = moving_average(&depth, cfg.smooth_samples);

    let mut out = Vec::new();
    let n = depth.len();
    // skip the leading samples whose centered smoothing window is
    // truncated and therefore noisier
    let mut k = cfg.smooth_samples / 2 + 1;
    k = k.min(n);
    while k < n {
        if depth[k] > cfg.threshold_fraction {
            let start = k;
            while k < n && depth[k] > cfg.release_fraction {
                k += 1;
            }
            let clipped = k == n;
            if k - start >= cfg.min_width_samples {
                out.push(Candidate {
                    start_idx: start,
                    end_idx: k.min(n - 1),
                    start_time: trace.time_at(start),
                    end_time: trace.time_at(k.min(n - 1)),
                    clipped,
                });
            }
        } else {
            k += 1;
        }
    }
    Ok(out)
}

/// How the step amplitude enters the template fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum AmplitudeMode {
    /// Amplitude is a free linear parameter.
    Free,
    /// Amplitude pinned to the calibrated contrast.
    Pinned,
}

/// How the baseline enters the template fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub enum BaselineMode {
    /// Baseline is a free linear parameter.
    Free,
    /// Baseline pinned to the pre-trigger mean of the trace, the same
    /// convention that defines the relative amplitude of a trace.
    PreTrigger,
}

/// Template model used by the ionization-time fit.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FitModel {
    /// Filter response pinned from the trace configuration.
    pub response: FilterResponse,
    /// Nominal (calibrated) step depth, positive (V).
    pub contrast: f64,
    /// Signal direction in the IQ plane (rad).
    pub iq_angle: f64,
    /// Amplitude handling for the timing fit.
    pub amplitude: AmplitudeMode,
    /// Baseline handling for the timing fit.
    pub baseline: BaselineMode,
    /// Transient template (onset time and decay pinned from
    /// calibration); its amplitude is always a free linear parameter.
    pub transient: Option<TransientShape>,
    /// Fit a reset edge when the candidate shows one inside the trace.
    pub fit_reset: bool,
    /// How far before the candidate start to search for the edge (s).
    /// Threshold crossings lag the true edge, more so for weak events,
    /// so the bracket reaches further back than forward.
    pub search_before: f64,
    /// How far past the candidate start to search (s).
    pub search_after: f64,
    /// Candidates whose free-fit amplitude falls below this fraction
    /// of the contrast are rejected as noise.
    pub accept_fraction: f64,
    /// Trigger-referenced end of the laser-impact window (s); searches
    /// for candidates beginning inside it extend back to the artifact
    /// onset.
    pub impact_window: f64,
    /// Pad of trace kept around the candidate for fitting (s).
    pub window_pad: f64,
}

/// Pinned shape of the laser transient in the fit template.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TransientShape {
    pub onset_time: f64,
    pub decay_time: f64,
}

impl FitModel {
    /// Build the default pipeline model from the system configuration.
    pub fn from_configs(cfg: &TraceConfig, lt: &LaserTransient, s: &PulseSchedule) -> Self {
        FitModel {
            response: cfg.response(),
            contrast: cfg.contrast().abs(),
            iq_angle: cfg.iq_angle,
            amplitude: AmplitudeMode::Pinned,
            baseline: BaselineMode::PreTrigger,
            transient: Some(TransientShape {
                onset_time: lt.onset_time(s),
                decay_time: lt.decay_time,
            }),
            fit_reset: true,
            search_before: 0.8e-6,
            search_after: 0.35e-6,
            accept_fraction: 0.52,
            impact_window: lt.impact_window,
            window_pad: 1.2e-6,
        }
    }
}

/// Outcome of fitting one candidate.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectionResult {
    pub cycle_id: u64,
    pub detected: bool,
    /// Fitted ionization time (s), trigger-referenced.
    pub t_ion: f64,
    /// Curvature-based statistical uncertainty of `t_ion` (s).
    pub sigma_t: f64,
    /// t_reset − t_ion when the reset edge was inside the trace.
    pub duration: Option<f64>,
    /// Fitted step amplitude (V, positive for the ionization drop).
    pub amplitude: f64,
    /// Root-mean-square residual of the accepted fit (V).
    pub residual: f64,
}

/// Linear least squares for up to three columns, returning the
/// coefficients and the residual sum of squares.
fn linear_fit(cols: &[&[f64]], y: &[f64]) -> (Vec<f64>, f64) {
    let m = cols.len();
    let n = y.len();
    if m == 0 {
        let rss = y.iter().map(|v| v * v).sum();
        return (Vec::new(), rss);
    }
    let mut ata = vec![0.0; m * m];
    let mut aty = vec![0.0; m];
    for i in 0..m {
        for j in i..m {
            let s: f64 = cols[i].iter().zip(cols[j]).map(|(a, b)| a * b).sum();
            ata[i * m + j] = s;
            ata[j * m + i] = s;
        }
        aty[i] = cols[i].iter().zip(y).map(|(a, b)| a * b).sum();
    }
    // Gaussian elimination with partial pivoting; singular columns get
    // a zero coefficient through the ridge term.
    for d in 0..m {
        ata[d * m + d] += 1e-12 * (1.0 + ata[d * m + d].abs());
    }
    let mut coef = aty.clone();
    let mut a = ata;
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if a[r * m + col].abs() > a[piv * m + col].abs() {
                piv = r;
            }
        }
        if piv != col {
            for c in 0..m {
                a.swap(col * m + c, piv * m + c);
            }
            coef.swap(col, piv);
        }
        let diag = a[col * m + col];
        for r in 0..m {
            if r == col {
                continue;
            }
            let f = a[r * m + col] / diag;
            for c in col..m {
                a[r * m + c] -= f * a[col * m + c];
            }
            coef[r] -= f * coef[col];
        }
    }
    for d in 0..m {
        coef[d] /= a[d * m + d];
    }
    let mut rss = 0.0;
    for k in 0..n {
        let mut pred = 0.0;
        for (i, c) in cols.iter().enumerate() {
            pred += coef[i] * c[k];
        }
        let r = y[k] - pred;
        rss += r * r;
    }
    (coef, rss)
}

struct FitWindow {
    times: Vec<f64>,
    depth: Vec<f64>,
    trans: Option<Vec<f64>>,
}

/// Evaluate the RSS of the template at trial edge times. `t_reset` of
/// `None` means the dip runs past the window (no reset edge).
/// Returns (rss, step_amplitude_in_depth_units).
fn rss_at(
    w: &FitWindow,
    model: &FitModel,
    t_ion: f64,
    t_reset: Option<f64>,
) -> (f64, f64) {
    let resp = &model.response;
    let step: Vec<f64> = w
        .times
        .iter()
        .map(|&t| {
            let mut v = resp.step(t - t_ion);
            if let Some(tr) = t_reset {
                v -= resp.step(t - tr);
            }
            v
        })
        .collect();

    let mut cols: Vec<&[f64]> = Vec::with_capacity(3);
    let ones: Vec<f64>;
    if model.baseline == BaselineMode::Free {
        ones = vec![1.0; w.times.len()];
        cols.push(&ones);
    }
    if let Some(tr) = &w.trans {
        cols.push(tr);
    }

    match model.amplitude {
        AmplitudeMode::Free => {
            cols.push(&step);
            let (coef, rss) = linear_fit(&cols, &w.depth);
            let amp = *coef.last().unwrap_or(&0.0);
            (rss, amp)
        }
        AmplitudeMode::Pinned => {
            // depth is normalized to the contrast, so the pinned dip
            // has unit depth
            let y: Vec<f64> = w.depth.iter().zip(&step).map(|(d, s)| d - s).collect();
            let (_, rss) = linear_fit(&cols, &y);
            (rss, 1.0)
        }
    }
}

fn golden_min(mut lo: f64, mut hi: f64, tol: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    while hi - lo > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Fit one candidate. Returns a result whose `detected` flag reflects
/// the amplitude acceptance; a degenerate window is an error.
pub fn fit_ionization_time(
    trace: &IQTrace,
    candidate: &Candidate,
    model: &FitModel,
) -> Result<DetectionResult> {
    let dt = trace.dt;
    let rise = 2.2 * model.response.tau() * model.response.order as f64;
    if (candidate.end_time - candidate.start_time) + 2.0 * model.window_pad < rise {
        return Err(Error::Fit(format!(
            "window shorter than the filter rise time ({rise:.3e} s)"
        )));
    }

    // search bracket for the ionization edge; threshold crossings lag
    // the true edge (strongly so under the artifact), hence the
    // asymmetric reach
    let lo = candidate.start_time - model.search_before;
    let hi = candidate.start_time + model.search_after;
    let t0 = trace.start_time;
    let t1 = trace.time_at(trace.len() - 1);
    let lo = lo.max(t0 + dt);
    let hi = hi.min(t1 - dt);
    if hi <= lo {
        return Err(Error::Fit("empty search bracket".into()));
    }

    let fit_reset = model.fit_reset && !candidate.clipped;
    let reset_lo = candidate.end_time - model.search_after;
    let reset_hi = (candidate.end_time + model.search_after).min(t1 - dt);

    // fit window scoped to the searched edges; a long ionized plateau
    // beyond them adds baseline noise but no timing information
    let w_lo = trace.index_at((lo - model.window_pad).max(t0));
    let fit_end = if fit_reset { reset_hi } else { hi };
    let w_hi = trace.index_at((fit_end + model.window_pad).min(t1));
    if w_hi - w_lo < 8 {
        return Err(Error::Fit("degenerate fit window".into()));
    }

    let proj = trace.project(model.iq_angle);
    let baseline = trace.pre_trigger_mean(model.iq_angle).unwrap_or_else(|| {
        let n = (proj.len() / 10).max(1);
        proj[..n].iter().sum::<f64>() / n as f64
    });
    let contrast = model.contrast;
    let times: Vec<f64> = (w_lo..=w_hi).map(|k| trace.time_at(k)).collect();
    let depth: Vec<f64> = (w_lo..=w_hi)
        .map(|k| (baseline - proj[k]) / contrast)
        .collect();
    let trans = model.transient.as_ref().map(|tr| {
        times
            .iter()
            .map(|&t| model.response.exp_decay(t - tr.onset_time, tr.decay_time))
            .collect::<Vec<f64>>()
    });
    let window = FitWindow { times, depth, trans };

    // detection pass: free amplitude, joint coarse grid on the edges
    let free_model = FitModel {
        amplitude: AmplitudeMode::Free,
        baseline: BaselineMode::Free,
        ..model.clone()
    };
    let coarse = 2.0 * dt;
    let mut best = (f64::INFINITY, lo, None::<f64>, 0.0);
    let mut ti = lo;
    while ti <= hi {
        if fit_reset {
            let mut tr = reset_lo.max(ti + dt);
            while tr <= reset_hi {
                let (rss, amp) = rss_at(&window, &free_model, ti, Some(tr));
                if rss < best.0 {
                    best = (rss, ti, Some(tr), amp);
                }
                tr += coarse;
            }
        } else {
            let (rss, amp) = rss_at(&window, &free_model, ti, None);
            if rss < best.0 {
                best = (rss, ti, None, amp);
            }
        }
        ti += coarse;
    }
    if !best.0.is_finite() {
        return Ok(DetectionResult {
            cycle_id: trace.meta.cycle_id,
            detected: false,
            t_ion: candidate.start_time,
            sigma_t: 0.0,
            duration: None,
            amplitude: 0.0,
            residual: f64::INFINITY,
        });
    }

    // golden refinement of each edge in turn (free model)
    let (_, mut ti_hat, mut tr_hat, _) = best;
    for _ in 0..2 {
        let reset = tr_hat;
        ti_hat = golden_min(
            (ti_hat - coarse).max(lo),
            (ti_hat + coarse).min(hi),
            1e-12,
            |t| rss_at(&window, &free_model, t, reset).0,
        );
        if let Some(tr) = tr_hat {
            tr_hat = Some(golden_min(
                (tr - coarse).max(ti_hat + dt),
                (tr + coarse).min(reset_hi),
                1e-12,
                |t| rss_at(&window, &free_model, ti_hat, Some(t)).0,
            ));
        }
    }
    let (_free_rss, amp_depth) = rss_at(&window, &free_model, ti_hat, tr_hat);
    let amplitude = amp_depth * contrast;
    let detected = amp_depth >= model.accept_fraction && amp_depth.is_finite();

    // timing pass with the configured (typically pinned) architecture;
    // the landscape is not unimodal under correlated noise, so scan
    // coarsely before the local refinement
    let (t_ion, rss_min) = if model.amplitude == AmplitudeMode::Pinned
        || model.baseline == BaselineMode::PreTrigger
    {
        let reset = tr_hat;
        let scan_lo = (ti_hat - model.search_after).max(lo);
        let scan_hi = (ti_hat + model.search_after).min(hi);
        let mut t_best = ti_hat;
        let mut r_best = f64::INFINITY;
        let mut t = scan_lo;
        while t <= scan_hi {
            let r = rss_at(&window, model, t, reset).0;
            if r < r_best {
                r_best = r;
                t_best = t;
            }
            t += coarse;
        }
        let t = golden_min(
            (t_best - coarse).max(scan_lo),
            (t_best + coarse).min(scan_hi),
            1e-12,
            |t| rss_at(&window, model, t, reset).0,
        );
        (t, rss_at(&window, model, t, reset).0)
    } else {
        (ti_hat, _free_rss)
    };

    // curvature-based sigma_t from a symmetric second difference
    let h = 2.0 * dt;
    let r0 = rss_min;
    let rp = rss_at(&window, model, t_ion + h, tr_hat).0;
    let rm = rss_at(&window, model, t_ion - h, tr_hat).0;
    let curv = (rp + rm - 2.0 * r0) / (h * h);
    let n_par = 2 + window.trans.is_some() as usize;
    let dof = window.depth.len().saturating_sub(n_par).max(1);
    let noise_var = r0 / dof as f64;
    let sigma_t = if curv > 0.0 {
        (2.0 * noise_var / curv).sqrt()
    } else {
        f64::INFINITY
    };

    let duration = tr_hat.map(|tr| tr - t_ion).filter(|d| *d > 0.0);
    let residual = (r0 / window.depth.len() as f64).sqrt() * contrast;

    Ok(DetectionResult {
        cycle_id: trace.meta.cycle_id,
        detected,
        t_ion,
        sigma_t,
        duration,
        amplitude,
        residual,
    })
}

/// One grid point of the Monte Carlo resolution curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolutionPoint {
    pub t_ion: f64,
    /// RMS of (fitted − true) over the detected repeats (s).
    pub rms: f64,
    /// Bootstrap standard error of the RMS (s).
    pub bootstrap_err: f64,
    pub n_fits: usize,
}

/// Monte Carlo time-resolution characterization: for each grid point
/// simulate `n_mc` traces with a single long event at that time, run
/// the full find+fit pipeline and report the RMS timing error.
pub fn time_resolution_curve(
    grid: &[f64],
    schedule: &PulseSchedule,
    cfg: &TraceConfig,
    lt: &LaserTransient,
    detector: &DetectorConfig,
    model: &FitModel,
    n_mc: usize,
    master_seed: u64,
) -> Result<Vec<ResolutionPoint>> {
    use crate::dynamics::{EventTimeline, TimelineEvent, Transition};

    let mut out = Vec::with_capacity(grid.len());
    for (gi, &t_true) in grid.iter().enumerate() {
        let tl = EventTimeline {
            events: vec![TimelineEvent {
                time: t_true,
                transition: Transition::RelaxIonize,
            }],
        };
        let mut errs = Vec::with_capacity(n_mc);
        for k in 0..n_mc {
            let seed = crate::harness::seed_fanout(
                master_seed,
                crate::harness::Stage::ResolutionMc,
                (gi * n_mc + k) as u64,
            );
            let trace = crate::signal::synthesize_trace(&tl, schedule, cfg, lt, seed)?;
            let cands = find_events(&trace, cfg.contrast(), cfg.iq_angle, detector)?;
            let hit = cands
                .iter()
                .find(|c| c.overlaps(t_true - 0.5e-6, t_true + 1.0e-6));
            if let Some(c) = hit {
                if let Ok(res) = fit_ionization_time(&trace, c, model) {
                    if res.t_ion.is_finite() {
                        errs.push(res.t_ion - t_true);
                    }
                }
            }
        }
        let rms = |xs: &[f64]| (xs.iter().map(|e| e * e).sum::<f64>() / xs.len() as f64).sqrt();
        if errs.is_empty() {
            out.push(ResolutionPoint {
                t_ion: t_true,
                rms: f64::NAN,
                bootstrap_err: f64::NAN,
                n_fits: 0,
            });
            continue;
        }
        let point = rms(&errs);
        // bootstrap over the fit ensemble
        let mut boot = Vec::with_capacity(200);
        let mut rng_state = master_seed ^ 0xb001_5eed ^ (gi as u64);
        let mut next = move || {
            // xorshift64*
            rng_state ^= rng_state >> 12;
            rng_state ^= rng_state << 25;
            rng_state ^= rng_state >> 27;
            rng_state.wrapping_mul(0x2545_f491_4f6c_dd1d)
        };
        for _ in 0..200 {
            let resampled: Vec<f64> = (0..errs.len())
                .map(|_| errs[(next() % errs.len() as u64) as usize])
                .collect();
            boot.push(rms(&resampled));
        }
        let bm = boot.iter().sum::<f64>() / boot.len() as f64;
        let bv = boot.iter().map(|b| (b - bm).powi(2)).sum::<f64>() / (boot.len() - 1) as f64;
        out.push(ResolutionPoint {
            t_ion: t_true,
            rms: point,
            bootstrap_err: bv.sqrt(),
            n_fits: errs.len(),
        });
    }
    Ok(out)
}

/// Write detection results as CSV.
pub fn write_detections_csv<W: Write>(
    w: &mut W,
    results: &[DetectionResult],
) -> std::io::Result<()> {
    writeln!(
        w,
        "cycle_id,detected,t_ion_s,sigma_t_s,duration_s,amplitude_V,residual"
    )?;
    for r in results {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.cycle_id,
            r.detected,
            r.t_ion,
            r.sigma_t,
            r.duration.map(|d| d.to_string()).unwrap_or_default(),
            r.amplitude,
            r.residual
        )?;
    }
    Ok(())
}

/// Read a detection CSV written by [`write_detections_csv`].
pub fn read_detections_csv<R: BufRead>(r: R) -> Result<Vec<DetectionResult>> {
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("read_detections_csv", e))?;
        if ln == 0 && line.starts_with("cycle_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(Error::Parse(format!(
                "expected 7 fields on line {}, got {}",
                ln + 1,
                parts.len()
            )));
        }
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what} on line {}", ln + 1)))
        };
        out.push(DetectionResult {
            cycle_id: parts[0]
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad cycle id on line {}", ln + 1)))?,
            detected: parts[1].trim() == "true",
            t_ion: parse_f(parts[2], "t_ion")?,
            sigma_t: parse_f(parts[3], "sigma_t")?,
            duration: if parts[4].trim().is_empty() {
                None
            } else {
                Some(parse_f(parts[4], "duration")?)
            },
            amplitude: parse_f(parts[5], "amplitude")?,
            residual: parse_f(parts[6], "residual")?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{EventTimeline, TimelineEvent, Transition};
    use crate::signal::synthesize_trace;

    fn tl(pairs: &[(f64, Option<f64>)]) -> EventTimeline {
        let mut events = Vec::new();
        for &(ti, tr) in pairs {
            events.push(TimelineEvent {
                time: ti,
                transition: Transition::RelaxIonize,
            });
            if let Some(t) = tr {
                events.push(TimelineEvent {
                    time: t,
                    transition: Transition::Reset,
                });
            }
        }
        EventTimeline { events }
    }

    fn quiet() -> (TraceConfig, LaserTransient, PulseSchedule) {
        (
            TraceConfig {
                duration: 80e-6,
                ..TraceConfig::default()
            },
            LaserTransient {
                jump_amplitude: 0.0,
                ..LaserTransient::default()
            },
            PulseSchedule::pulsed_default(),
        )
    }

    #[test]
    fn clean_step_pair_found_once() {
        let (cfg, lt, s) = quiet();
        let trace = synthesize_trace(&tl(&[(1.8e-6, Some(60e-6))]), &s, &cfg, &lt, 1).unwrap();
        let cands = find_events(&trace, cfg.contrast(), 0.0, &DetectorConfig::default()).unwrap();
        assert_eq!(cands.len(), 1);
        let c = cands[0];
        assert!((c.start_time - 1.8e-6).abs() < 0.3e-6, "start {}", c.start_time);
        assert!((c.end_time - 60e-6).abs() < 0.5e-6, "end {}", c.end_time);
        assert!(!c.clipped);
    }

    #[test]
    fn two_pairs_found_in_order() {
        let (mut cfg, lt, _) = quiet();
        cfg.duration = 300e-6;
        cfg.start_time = 0.0;
        let s = PulseSchedule::cw(7.6, 300e-6);
        let trace = synthesize_trace(
            &tl(&[(40e-6, Some(90e-6)), (170e-6, Some(240e-6))]),
            &s,
            &cfg,
            &lt,
            1,
        )
        .unwrap();
        let cands = find_events(&trace, cfg.contrast(), 0.0, &DetectorConfig::default()).unwrap();
        assert_eq!(cands.len(), 2);
        assert!(cands[0].start_time < cands[1].start_time);
        assert!((cands[0].start_time - 40e-6).abs() < 1e-6);
        assert!((cands[1].start_time - 170e-6).abs() < 1e-6);
    }

    #[test]
    fn rejects_zero_contrast_and_bad_hysteresis() {
        let (cfg, lt, s) = quiet();
        let trace = synthesize_trace(&EventTimeline::default(), &s, &cfg, &lt, 1).unwrap();
        assert!(find_events(&trace, 0.0, 0.0, &DetectorConfig::default()).is_err());
        let bad = DetectorConfig {
            threshold_fraction: 0.3,
            release_fraction: 0.5,
            ..DetectorConfig::default()
        };
        assert!(find_events(&trace, cfg.contrast(), 0.0, &bad).is_err());
    }

    #[test]
    fn noiseless_fit_recovers_tion_below_1ns() {
        let (cfg, _, s) = quiet();
        let lt = LaserTransient::default(); // transient present and in the template
        let t_true = 1.8e-6;
        let trace = synthesize_trace(&tl(&[(t_true, Some(60e-6))]), &s, &cfg, &lt, 1).unwrap();
        let cands = find_events(&trace, cfg.contrast(), 0.0, &DetectorConfig::default()).unwrap();
        assert_eq!(cands.len(), 1);
        let model = FitModel::from_configs(&cfg, &lt, &s);
        let res = fit_ionization_time(&trace, &cands[0], &model).unwrap();
        assert!(res.detected);
        assert!(
            (res.t_ion - t_true).abs() < 1e-9,
            "noiseless error {} s",
            (res.t_ion - t_true).abs()
        );
        let d = res.duration.expect("reset edge inside trace");
        assert!((d - (60e-6 - t_true)).abs() < 50e-9, "duration {d}");
        assert!((res.amplitude - cfg.contrast()).abs() < 0.02 * cfg.contrast());
    }

    #[test]
    fn fit_rejects_degenerate_window() {
        let (cfg, lt, s) = quiet();
        let trace = synthesize_trace(&tl(&[(1.8e-6, None)]), &s, &cfg, &lt, 1).unwrap();
        let cand = Candidate {
            start_idx: 100,
            end_idx: 101,
            start_time: trace.time_at(100),
            end_time: trace.time_at(101),
            clipped: false,
        };
        let mut model = FitModel::from_configs(&cfg, &lt, &s);
        model.window_pad = 10e-9;
        assert!(fit_ionization_time(&trace, &cand, &model).is_err());
    }

    #[test]
    fn time_translation_equivariance() {
        let (mut cfg, lt, s) = quiet();
        cfg.noise_sigma_per_sample = 1.7e-3;
        cfg.noise_correlation_time = 0.265e-6;
        let model = FitModel::from_configs(&cfg, &lt, &s);
        let det = DetectorConfig::default();
        let t0 = 4.0e-6;
        let tr_a = synthesize_trace(&tl(&[(t0, Some(60e-6))]), &s, &cfg, &lt, 33).unwrap();
        let ca = find_events(&tr_a, cfg.contrast(), 0.0, &det).unwrap();
        let ra = fit_ionization_time(&tr_a, &ca[0], &model).unwrap();
        // shift the whole record (noise and all) earlier by k samples
        for k in [20usize, 50, 130] {
            let mut tr_b = tr_a.clone();
            tr_b.i = tr_a.i[k..].to_vec();
            tr_b.q = tr_a.q[k..].to_vec();
            let cb = find_events(&tr_b, cfg.contrast(), 0.0, &det).unwrap();
            let rb = fit_ionization_time(&tr_b, &cb[0], &model).unwrap();
            let delta = ra.t_ion - rb.t_ion;
            let shift = k as f64 * tr_a.dt;
            assert!(
                (delta - shift).abs() < tr_a.dt,
                "shift {shift}: fitted delta {delta}"
            );
        }
    }

    #[test]
    fn amplitude_scale_invariance() {
        let (mut cfg, lt, s) = quiet();
        cfg.noise_sigma_per_sample = 1.7e-3;
        cfg.noise_correlation_time = 0.265e-6;
        let mut scaled = cfg.clone();
        scaled.level_neutral = cfg.level_neutral * 2.0;
        scaled.level_ionized = cfg.level_ionized * 2.0;
        scaled.noise_sigma_per_sample = cfg.noise_sigma_per_sample * 2.0;

        let timeline = tl(&[(2.2e-6, Some(50e-6))]);
        let det = DetectorConfig::default();
        let t_a = synthesize_trace(&timeline, &s, &cfg, &lt, 58).unwrap();
        let t_b = synthesize_trace(&timeline, &s, &scaled, &lt, 58).unwrap();
        let ca = find_events(&t_a, cfg.contrast(), 0.0, &det).unwrap();
        let cb = find_events(&t_b, scaled.contrast(), 0.0, &det).unwrap();
        assert_eq!(ca.len(), cb.len());
        let ma = FitModel::from_configs(&cfg, &lt, &s);
        let mb = FitModel::from_configs(&scaled, &lt, &s);
        let ra = fit_ionization_time(&t_a, &ca[0], &ma).unwrap();
        let rb = fit_ionization_time(&t_b, &cb[0], &mb).unwrap();
        // doubling is exact in binary floating point, so the whole fit
        // trajectory is identical
        assert!(
            (ra.t_ion - rb.t_ion).abs() < 1e-12,
            "{} vs {}",
            ra.t_ion,
            rb.t_ion
        );
    }

    #[test]
    fn in_pulse_events_fit_with_inflated_sigma() {
        let (mut cfg, mut lt, s) = quiet();
        cfg.noise_sigma_per_sample = 1.7e-3;
        cfg.noise_correlation_time = 0.265e-6;
        lt.jump_amplitude = 12e-3;
        let model = FitModel::from_configs(&cfg, &lt, &s);
        let det = DetectorConfig::default();

        // (sigma_t, fit error) per repeat
        let collect = |t_true: f64, seeds: std::ops::Range<u64>| -> Vec<(f64, f64)> {
            seeds
                .filter_map(|seed| {
                    let trace =
                        synthesize_trace(&tl(&[(t_true, Some(60e-6))]), &s, &cfg, &lt, seed)
                            .ok()?;
                    let cands = find_events(&trace, cfg.contrast(), 0.0, &det).ok()?;
                    let c = cands.first()?;
                    let r = fit_ionization_time(&trace, c, &model).ok()?;
                    r.sigma_t
                        .is_finite()
                        .then_some((r.sigma_t, r.t_ion - t_true))
                })
                .collect()
        };
        let during = collect(80e-9, 0..60);
        let isolated = collect(2.5e-6, 100..160);
        assert!(during.len() > 40, "in-pulse events should still fit");
        let med = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let rms = |v: &[(f64, f64)]| {
            (v.iter().map(|p| p.1 * p.1).sum::<f64>() / v.len() as f64).sqrt()
        };
        let sig_during = med(during.iter().map(|p| p.0).collect());
        let sig_isol = med(isolated.iter().map(|p| p.0).collect());
        assert!(
            sig_during > 1.05 * sig_isol,
            "sigma_t during pulse {sig_during} vs isolated {sig_isol}"
        );
        let rms_during = rms(&during);
        let rms_isol = rms(&isolated);
        assert!(
            rms_during > 1.3 * rms_isol,
            "rms error during pulse {rms_during} vs isolated {rms_isol}"
        );
    }

    #[test]
    fn detection_csv_roundtrip() {
        let rows = vec![
            DetectionResult {
                cycle_id: 3,
                detected: true,
                t_ion: 1.8e-6,
                sigma_t: 5.6e-8,
                duration: Some(4.2e-5),
                amplitude: 11.9e-3,
                residual: 1.4e-3,
            },
            DetectionResult {
                cycle_id: 9,
                detected: false,
                t_ion: 0.4e-6,
                sigma_t: 2e-7,
                duration: None,
                amplitude: 4e-3,
                residual: 2e-3,
            },
        ];
        let mut buf = Vec::new();
        write_detections_csv(&mut buf, &rows).unwrap();
        let back = read_detections_csv(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(rows, back);
    }
}
