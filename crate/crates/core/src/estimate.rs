//! Population-level estimators over detected events.
//!
//! * background thresholding from a control run (latest control
//!   ionization time);
//! * excited-state lifetime from selected events, either by the
//!   closed-form truncated-exponential maximum-likelihood estimator or
//!   by a weighted linear fit of the log survival counts;
//! * SNR of the two charge-state clusters in the IQ plane and the
//!   square-root scaling of SNR with integration time;
//! * detection infidelity as a function of event duration, and the
//!   reset-time-weighted overall fidelity.

use serde::{Deserialize, Serialize};

use crate::detect::{find_events, fit_ionization_time, DetectorConfig, FitModel};
use crate::dynamics::{survival_from_times, EventTimeline, PulseSchedule, TimelineEvent, Transition};
use crate::signal::{synthesize_trace, LaserTransient, TraceConfig};
use crate::{Error, Result};

/// Latest ionization time seen in a control (non-resonant) run; events
/// later than this cannot be background.
pub fn background_threshold(control_events: &[f64]) -> Result<f64> {
    control_events
        .iter()
        .cloned()
        .fold(None, |acc: Option<f64>, t| {
            Some(acc.map_or(t, |m| m.max(t)))
        })
        .ok_or_else(|| Error::domain("no control events: threshold underivable"))
}

/// Lifetime estimation method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifetimeMethod {
    /// Weighted least squares on log survival counts.
    LeastSquares,
    /// Left-truncated exponential maximum likelihood,
    /// τ̂ = mean(t − t_min).
    MaxLikelihood,
}

/// Fitted excited-state lifetime.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LifetimeFit {
    pub tau_ex: f64,
    pub sigma: f64,
    pub n_selected: usize,
    pub t_min: f64,
    pub method: LifetimeMethod,
}

/// Minimum selected-event count required by default.
pub const LIFETIME_MIN_EVENTS: usize = 20;

/// Fit the excited-state lifetime from ionization times above `t_min`.
pub fn fit_lifetime(
    events: &[f64],
    t_min: f64,
    method: LifetimeMethod,
) -> Result<LifetimeFit> {
    fit_lifetime_with_floor(events, t_min, method, LIFETIME_MIN_EVENTS)
}

/// Same as [`fit_lifetime`] with a configurable selection floor.
pub fn fit_lifetime_with_floor(
    events: &[f64],
    t_min: f64,
    method: LifetimeMethod,
    min_events: usize,
) -> Result<LifetimeFit> {
    let selected: Vec<f64> = events.iter().cloned().filter(|&t| t > t_min).collect();
    let n = selected.len();
    if n < min_events {
        return Err(Error::TooFewEvents {
            have: n,
            need: min_events,
        });
    }
    match method {
        LifetimeMethod::MaxLikelihood => {
            // memorylessness makes the trigger origin cancel
            let tau = selected.iter().map(|t| t - t_min).sum::<f64>() / n as f64;
            Ok(LifetimeFit {
                tau_ex: tau,
                sigma: tau / (n as f64).sqrt(),
                n_selected: n,
                t_min,
                method,
            })
        }
        LifetimeMethod::LeastSquares => {
            let tau = lsq_tau(&selected, t_min)?;
            // survival counts at different times are nested, so the
            // naive weighted-fit covariance is far too optimistic;
            // bootstrap over events instead
            let mut state = 0x5eed_0f11_d5a7_e411_u64 ^ (n as u64);
            let mut next = move || {
                state ^= state >> 12;
                state ^= state << 25;
                state ^= state >> 27;
                state.wrapping_mul(0x2545_f491_4f6c_dd1d)
            };
            let mut taus = Vec::with_capacity(200);
            for _ in 0..200 {
                let resampled: Vec<f64> = (0..n)
                    .map(|_| selected[(next() % n as u64) as usize])
                    .collect();
                if let Ok(t) = lsq_tau(&resampled, t_min) {
                    taus.push(t);
                }
            }
            if taus.len() < 100 {
                return Err(Error::Fit("lifetime bootstrap unstable".into()));
            }
            let m = taus.iter().sum::<f64>() / taus.len() as f64;
            let var = taus.iter().map(|t| (t - m).powi(2)).sum::<f64>()
                / (taus.len() - 1) as f64;
            Ok(LifetimeFit {
                tau_ex: tau,
                sigma: var.sqrt(),
                n_selected: n,
                t_min,
                method,
            })
        }
    }
}

/// Weighted linear fit of the log survival counts; the point estimate
/// of the least-squares lifetime method.
fn lsq_tau(selected: &[f64], t_min: f64) -> Result<f64> {
    let n = selected.len();
    let tau0 = selected.iter().map(|t| t - t_min).sum::<f64>() / n as f64;
    let n_bins = (n / 10).clamp(8, 60);
    let span = 5.0 * tau0;
    let grid: Vec<f64> = (0..n_bins)
        .map(|i| t_min + span * i as f64 / n_bins as f64)
        .collect();
    let counts = survival_from_times(selected, &grid);
    // ln N = a − (t − t_min)/τ with weights N (var(ln N) ≈ 1/N)
    let pts: Vec<(f64, f64, f64)> = counts
        .iter()
        .filter(|&&(_, c)| c > 0)
        .map(|&(t, c)| (t - t_min, (c as f64).ln(), c as f64))
        .collect();
    if pts.len() < 3 {
        return Err(Error::TooFewEvents { have: pts.len(), need: 3 });
    }
    let sw: f64 = pts.iter().map(|p| p.2).sum();
    let sx: f64 = pts.iter().map(|p| p.2 * p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.2 * p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.2 * p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.2 * p.0 * p.1).sum();
    let det = sw * sxx - sx * sx;
    if det <= 0.0 {
        return Err(Error::Fit("degenerate survival histogram".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    if slope >= 0.0 {
        return Err(Error::Fit("survival counts do not decay".into()));
    }
    Ok(-1.0 / slope)
}

/// Center-to-center distance of the two IQ clusters divided by their
/// averaged standard deviation.
///
/// A cluster's standard deviation is the per-axis pooled value
/// √((var_I + var_Q)/2), which for an isotropic cluster equals the
/// scatter along any direction, in particular along the separation
/// axis.
pub fn compute_snr(neutral: &[(f64, f64)], ionized: &[(f64, f64)]) -> Result<f64> {
    let stats = |pts: &[(f64, f64)]| -> Result<((f64, f64), f64)> {
        if pts.len() < 2 {
            return Err(Error::domain(
                "cluster needs at least two points for a standard deviation",
            ));
        }
        let n = pts.len() as f64;
        let ci = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let cq = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let vi = pts.iter().map(|p| (p.0 - ci).powi(2)).sum::<f64>() / (n - 1.0);
        let vq = pts.iter().map(|p| (p.1 - cq).powi(2)).sum::<f64>() / (n - 1.0);
        Ok(((ci, cq), ((vi + vq) / 2.0).sqrt()))
    };
    let ((ni, nq), sn) = stats(neutral)?;
    let ((ii, iq), si) = stats(ionized)?;
    let dist = (ni - ii).hypot(nq - iq);
    let sigma = 0.5 * (sn + si);
    if sigma == 0.0 {
        // delta clusters: unbounded SNR
        return Ok(f64::INFINITY);
    }
    Ok(dist / sigma)
}

/// One measured SNR point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SnrPoint {
    pub t_int: f64,
    pub snr: f64,
}

/// Fit of SNR = SNR_1µs · √((t0 + t_int)/1 µs).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnrFit {
    pub snr_1us: f64,
    pub snr_1us_err: f64,
    pub t0: f64,
    pub t0_err: f64,
    pub points: Vec<SnrPoint>,
}

const ONE_MICROSECOND: f64 = 1e-6;

impl SnrFit {
    /// Evaluate the fitted law at an integration time.
    pub fn snr_at(&self, t_int: f64) -> f64 {
        self.snr_1us * ((self.t0 + t_int) / ONE_MICROSECOND).sqrt()
    }
}

/// Fit the square-root integration-time law. SNR² is linear in t_int,
/// so an ordinary linear regression of SNR² on t_int is exact.
pub fn fit_snr_scaling(points: &[SnrPoint]) -> Result<SnrFit> {
    if points.len() < 3 {
        return Err(Error::domain("need at least 3 SNR points"));
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|p| p.t_int).sum();
    let sxx: f64 = points.iter().map(|p| p.t_int * p.t_int).sum();
    let det = n * sxx - sx * sx;
    if det <= f64::EPSILON * n * sxx.max(1.0) {
        return Err(Error::domain("degenerate design: all t_int equal"));
    }
    let sy: f64 = points.iter().map(|p| p.snr * p.snr).sum();
    let sxy: f64 = points.iter().map(|p| p.t_int * p.snr * p.snr).sum();
    let slope = (n * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / n;
    if slope <= 0.0 || intercept < 0.0 {
        return Err(Error::Fit(
            "SNR² must grow linearly with positive intercept".into(),
        ));
    }
    // residual variance of SNR² and the OLS covariance
    let dof = (points.len() as f64 - 2.0).max(1.0);
    let rss: f64 = points
        .iter()
        .map(|p| {
            let r = p.snr * p.snr - (intercept + slope * p.t_int);
            r * r
        })
        .sum();
    let s2 = rss / dof;
    let var_slope = s2 * n / det;
    let var_intercept = s2 * sxx / det;
    let cov = -s2 * sx / det;

    let snr_1us = (slope * ONE_MICROSECOND).sqrt();
    let snr_1us_err = 0.5 * var_slope.sqrt() * ONE_MICROSECOND / snr_1us;
    let t0 = intercept / slope;
    // delta method for the ratio
    let var_t0 = var_intercept / (slope * slope)
        + intercept * intercept * var_slope / slope.powi(4)
        - 2.0 * intercept * cov / slope.powi(3);
    Ok(SnrFit {
        snr_1us,
        snr_1us_err,
        t0,
        t0_err: var_t0.max(0.0).sqrt(),
        points: points.to_vec(),
    })
}

/// One point of the detection-infidelity curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InfidelityPoint {
    pub duration: f64,
    pub infidelity: f64,
    /// Binomial standard error of the Monte Carlo estimate.
    pub err: f64,
}

/// Pipeline pieces needed by the fidelity Monte Carlo.
pub struct FidelityPipeline<'a> {
    pub schedule: &'a PulseSchedule,
    pub trace: &'a TraceConfig,
    pub transient: &'a LaserTransient,
    pub detector: &'a DetectorConfig,
    pub model: &'a FitModel,
    /// Trigger-referenced ionization time of the injected events;
    /// chosen outside the laser-impact window.
    pub event_time: f64,
}

/// Probability that the find+fit pipeline misses an event, as a
/// function of its duration, estimated by Monte Carlo with `n_mc`
/// traces per grid point.
///
/// Events are injected at the pipeline's expected signal amplitude
/// under calibrated noise; misses are counted when no accepted
/// candidate overlaps the injected interval.
pub fn infidelity_vs_reset(
    durations: &[f64],
    pipeline: &FidelityPipeline,
    n_mc: usize,
    master_seed: u64,
) -> Result<Vec<InfidelityPoint>> {
    let mut out = Vec::with_capacity(durations.len());
    for (gi, &d) in durations.iter().enumerate() {
        if !(d > 0.0) {
            return Err(Error::domain("durations must be positive"));
        }
        let t0 = pipeline.event_time;
        let tl = EventTimeline {
            events: vec![
                TimelineEvent {
                    time: t0,
                    transition: Transition::RelaxIonize,
                },
                TimelineEvent {
                    time: t0 + d,
                    transition: Transition::Reset,
                },
            ],
        };
        let mut missed = 0usize;
        for k in 0..n_mc {
            let seed = crate::harness::seed_fanout(
                master_seed,
                crate::harness::Stage::FidelityMc,
                (gi * n_mc + k) as u64,
            );
            let trace = synthesize_trace(&tl, pipeline.schedule, pipeline.trace, pipeline.transient, seed)?;
            let cands = find_events(
                &trace,
                pipeline.trace.contrast(),
                pipeline.trace.iq_angle,
                pipeline.detector,
            )?;
            let mut detected = false;
            for c in &cands {
                if !c.overlaps(t0 - 0.4e-6, t0 + d + 0.4e-6) {
                    continue;
                }
                if let Ok(res) = fit_ionization_time(&trace, c, pipeline.model) {
                    if res.detected {
                        detected = true;
                        break;
                    }
                }
            }
            if !detected {
                missed += 1;
            }
        }
        let p = missed as f64 / n_mc as f64;
        out.push(InfidelityPoint {
            duration: d,
            infidelity: p,
            err: (p * (1.0 - p) / n_mc as f64).sqrt(),
        });
    }
    Ok(out)
}

/// Overall detection fidelity: 1 − ∫ infidelity(d)·(1/τ)e^{−d/τ} dd
/// with exponentially distributed reset times.
///
/// The curve is integrated piecewise-linearly from the analytic anchor
/// (0, 1); beyond the last grid point the final value is held, which
/// bounds the missed tail from above.
pub fn overall_fidelity(curve: &[InfidelityPoint], tau_reset: f64) -> Result<f64> {
    if !(tau_reset > 0.0) {
        return Err(Error::domain("tau_reset must be positive"));
    }
    if curve.is_empty() {
        return Err(Error::domain("empty infidelity curve"));
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(curve.len() + 1);
    pts.push((0.0, 1.0));
    for p in curve {
        if !p.infidelity.is_finite() || !(0.0..=1.0).contains(&p.infidelity) || !(p.duration > 0.0)
        {
            return Err(Error::domain("infidelity curve not integrable"));
        }
        pts.push((p.duration, p.infidelity));
    }
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());

    // exact integral of a linear segment against the exponential density:
    // ∫ (A + B d) (1/τ) e^{−d/τ} dd = [−(A + B d + B τ) e^{−d/τ}]
    let tau = tau_reset;
    let mut integral = 0.0;
    for w in pts.windows(2) {
        let (d0, f0) = w[0];
        let (d1, f1) = w[1];
        if d1 <= d0 {
            continue;
        }
        let b = (f1 - f0) / (d1 - d0);
        let a = f0 - b * d0;
        let upper = (a + b * d0 + b * tau) * (-d0 / tau).exp();
        let lower = (a + b * d1 + b * tau) * (-d1 / tau).exp();
        integral += upper - lower;
    }
    // constant extension of the final value
    let (d_last, f_last) = *pts.last().unwrap();
    integral += f_last * (-d_last / tau).exp();

    Ok((1.0 - integral).clamp(0.0, 1.0))
}

/// Fraction of exponentially distributed event durations shorter than
/// `cutoff`.
pub fn short_event_fraction(tau_reset: f64, cutoff: f64) -> f64 {
    1.0 - (-cutoff / tau_reset).exp()
}

/// Expected background contamination of a resonant data set, from the
/// per-cycle ionization probability of the control experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackgroundEstimate {
    pub expected_background: f64,
    /// Fraction of recorded events attributed to the ion.
    pub ion_fraction: f64,
}

pub fn background_contamination(
    total_events: usize,
    cycles: u64,
    control_probability: f64,
) -> Result<BackgroundEstimate> {
    if total_events == 0 {
        return Err(Error::domain("no events recorded"));
    }
    let expected = control_probability * cycles as f64;
    Ok(BackgroundEstimate {
        expected_background: expected,
        ion_fraction: (1.0 - expected / total_events as f64).clamp(0.0, 1.0),
    })
}
