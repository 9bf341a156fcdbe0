//! Trace synthesis: event timelines to sampled, noisy, filtered I/Q
//! readout records.
//!
//! The clean (noise-free) part of a trace is evaluated in closed form:
//! the analog low-pass chain is a cascade of identical one-pole
//! sections, and both of its inputs — charge-state steps and the
//! exponentially decaying laser transient — have analytic responses.
//! Sampling therefore preserves sub-sample timing of the underlying
//! events, which is what lets the fitters resolve ionization times to
//! a small fraction of a sample period.
//!
//! Noise is Gaussian, identical and independent on I and Q, injected
//! before the filter. It is white by default; a positive
//! `noise_correlation_time` turns it into an Ornstein-Uhlenbeck
//! process, which reproduces the microsecond-scale fluctuations seen
//! in the measured traces and sets the intrinsic integration time of
//! the SNR scaling law.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Read, Write};

use crate::dynamics::{EventTimeline, PulseSchedule};
use crate::{Error, Result};

/// Analog response of the readout chain: `order` cascaded one-pole
/// low-pass sections, each with the same cutoff.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct FilterResponse {
    pub cutoff: f64,
    pub order: u32,
}

impl FilterResponse {
    pub fn new(cutoff: f64, order: u32) -> Self {
        FilterResponse { cutoff, order }
    }

    /// Time constant of one section.
    pub fn tau(&self) -> f64 {
        1.0 / (2.0 * std::f64::consts::PI * self.cutoff)
    }

    /// Unit step response at `t` after the step (0 for t < 0).
    ///
    /// y(x) = 1 − e^{−x} Σ_{k<n} x^k/k!  with x = t/τ.
    pub fn step(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let x = t / self.tau();
        let mut term = 1.0;
        let mut sum = 1.0;
        for k in 1..self.order {
            term *= x / k as f64;
            sum += term;
        }
        1.0 - (-x).exp() * sum
    }

    /// Response at `t` to the input e^{−t/τ_d}·θ(t).
    pub fn exp_decay(&self, t: f64, tau_d: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let tau = self.tau();
        // keep the poles distinct; a degenerate τ_d is nudged
        let tau_d = if (tau_d - tau).abs() < 1e-9 * tau {
            tau_d * (1.0 + 1e-6)
        } else {
            tau_d
        };
        let a = 1.0 / tau_d;
        let b = 1.0 / tau;
        let n = self.order;
        let d = b - a;
        // b^n [ e^{−at}/d^n − e^{−bt} Σ_{k=1..n} t^{n−k}/((n−k)!·d^k) ]
        let mut sum = 0.0;
        let mut d_pow = d;
        for k in 1..=n {
            let m = (n - k) as i32;
            let mut t_pow = 1.0;
            for _ in 0..m {
                t_pow *= t;
            }
            let mut fact = 1.0;
            for j in 2..=m {
                fact *= j as f64;
            }
            sum += t_pow / (fact * d_pow);
            d_pow *= d;
        }
        let mut b_pow = 1.0;
        for _ in 0..n {
            b_pow *= b;
        }
        let mut d_pow_n = 1.0;
        for _ in 0..n {
            d_pow_n *= d;
        }
        b_pow * ((-a * t).exp() / d_pow_n - (-b * t).exp() * sum)
    }

    /// Per-sample pole of the discrete equivalent at sample period `dt`.
    fn discrete_pole(&self, dt: f64) -> f64 {
        (-dt / self.tau()).exp()
    }
}

/// Optional random-telegraph noise rider (laser-heating style
/// two-level fluctuations). Off by default.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RtsNoise {
    /// Amplitude of the high state (V), added to the signal level.
    pub amplitude: f64,
    /// Rate of low → high switches (s⁻¹).
    pub rate_up: f64,
    /// Rate of high → low switches (s⁻¹).
    pub rate_down: f64,
}

/// Sampling, filtering and noise configuration of the RF trace.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TraceConfig {
    /// Sample rate (S/s).
    pub sample_rate: f64,
    /// Low-pass cutoff (Hz).
    pub filter_cutoff: f64,
    /// Low-pass order (cascaded one-pole sections).
    pub filter_order: u32,
    /// Per-sample Gaussian noise sigma before the filter (V).
    pub noise_sigma_per_sample: f64,
    /// Correlation time of the injected noise (s); 0 means white.
    pub noise_correlation_time: f64,
    /// Reflected level with the trap neutral (V).
    pub level_neutral: f64,
    /// Reflected level with the trap ionized (V).
    pub level_ionized: f64,
    /// Orientation of the signal in the IQ plane (rad).
    pub iq_angle: f64,
    /// Trace start relative to the trigger (s); negative starts record
    /// a pre-pulse baseline.
    pub start_time: f64,
    /// Trace duration (s).
    pub duration: f64,
    /// Relative rms fluctuation of the ionization step depth per cycle.
    pub contrast_jitter: f64,
    /// Optional telegraph-noise rider.
    pub rts: Option<RtsNoise>,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig {
            sample_rate: 50e6,
            filter_cutoff: 2e6,
            filter_order: 1,
            noise_sigma_per_sample: 0.0,
            noise_correlation_time: 0.0,
            level_neutral: 30e-3,
            level_ionized: 18e-3,
            iq_angle: 0.0,
            start_time: -5e-6,
            duration: 20e-6,
            contrast_jitter: 0.0,
            rts: None,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 2.0 * self.filter_cutoff) {
            return Err(Error::config(format!(
                "sample_rate {} must exceed twice the filter cutoff {}",
                self.sample_rate, self.filter_cutoff
            )));
        }
        if self.noise_sigma_per_sample < 0.0 {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if self.filter_order == 0 {
            return Err(Error::config("filter_order must be at least 1"));
        }
        if !(self.duration > 0.0) {
            return Err(Error::config("duration must be positive"));
        }
        if self.level_neutral == self.level_ionized {
            return Err(Error::config("charge-state levels must differ"));
        }
        Ok(())
    }

    pub fn response(&self) -> FilterResponse {
        FilterResponse::new(self.filter_cutoff, self.filter_order)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    /// Signed readout contrast level(q0) − level(q+).
    pub fn contrast(&self) -> f64 {
        self.level_neutral - self.level_ionized
    }

    pub fn n_samples(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }
}

/// Laser-induced transient artifact: a fast jump at the electrical
/// onset of the pulse followed by an exponential decay. Its amplitude
/// scales linearly with pulse energy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LaserTransient {
    /// Jump amplitude at the reference pulse energy (V).
    pub jump_amplitude: f64,
    /// Electrical onset delay after the pulse arrival (s).
    pub onset_delay: f64,
    /// Decay time of the artifact (s).
    pub decay_time: f64,
    /// Window after the trigger within which the artifact confounds
    /// fitting (s).
    pub impact_window: f64,
    /// Pulse energy (mW·s) at which `jump_amplitude` applies.
    pub reference_pulse_energy: f64,
    /// Relative rms fluctuation of the artifact amplitude per cycle.
    pub amplitude_jitter: f64,
}

impl Default for LaserTransient {
    fn default() -> Self {
        LaserTransient {
            jump_amplitude: 12e-3,
            onset_delay: 45e-9,
            decay_time: 250e-9,
            impact_window: 1.2e-6,
            reference_pulse_energy: 7.6 * 100e-9,
            amplitude_jitter: 0.0,
        }
    }
}

impl LaserTransient {
    /// Artifact amplitude for a given pulse, linear in pulse energy.
    pub fn amplitude_for(&self, s: &PulseSchedule) -> f64 {
        if self.reference_pulse_energy <= 0.0 {
            return 0.0;
        }
        self.jump_amplitude * (s.power * s.pulse_length) / self.reference_pulse_energy
    }

    /// Trigger-referenced onset time of the artifact.
    pub fn onset_time(&self, s: &PulseSchedule) -> f64 {
        s.pulse_start + self.onset_delay
    }

    pub fn validate(&self, s: &PulseSchedule) -> Result<()> {
        if self.jump_amplitude != 0.0 && self.impact_window < s.pulse_length {
            return Err(Error::config(
                "impact_window must cover at least the pulse length",
            ));
        }
        if !(self.decay_time > 0.0) {
            return Err(Error::config("decay_time must be positive"));
        }
        Ok(())
    }
}

/// Trace identity carried through files.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub cycle_id: u64,
    pub seed: u64,
    pub label: String,
}

/// Uniformly sampled demodulated readout record.
#[derive(Debug, Clone, PartialEq)]
pub struct IQTrace {
    /// Time of the first sample, trigger-referenced (s).
    pub start_time: f64,
    /// Sample period (s).
    pub dt: f64,
    pub i: Vec<f64>,
    pub q: Vec<f64>,
    pub meta: TraceMeta,
}

impl IQTrace {
    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    pub fn time_at(&self, idx: usize) -> f64 {
        self.start_time + idx as f64 * self.dt
    }

    pub fn index_at(&self, t: f64) -> usize {
        (((t - self.start_time) / self.dt).round().max(0.0) as usize).min(self.len().saturating_sub(1))
    }

    /// Amplitude |V_R| = √(I² + Q²) per sample.
    pub fn magnitude(&self) -> Vec<f64> {
        self.i
            .iter()
            .zip(&self.q)
            .map(|(&i, &q)| i.hypot(q))
            .collect()
    }

    /// Projection onto the unit vector at `angle` in the IQ plane.
    pub fn project(&self, angle: f64) -> Vec<f64> {
        let (s, c) = angle.sin_cos();
        self.i
            .iter()
            .zip(&self.q)
            .map(|(&i, &q)| i * c + q * s)
            .collect()
    }

    /// Mean of the projection over the pre-trigger span.
    pub fn pre_trigger_mean(&self, angle: f64) -> Option<f64> {
        if self.start_time >= 0.0 {
            return None;
        }
        let n = ((-self.start_time) / self.dt).floor() as usize;
        let n = n.min(self.len());
        if n == 0 {
            return None;
        }
        let proj = self.project(angle);
        Some(proj[..n].iter().sum::<f64>() / n as f64)
    }
}

/// Deterministic Gaussian noise source: white, or OU with the given
/// correlation time, produced per sample before filtering.
struct NoiseGen {
    rng: ChaCha8Rng,
    sigma: f64,
    rho: f64,
    drive: f64,
    state: f64,
    started: bool,
}

impl NoiseGen {
    fn new(rng: ChaCha8Rng, sigma: f64, correlation_time: f64, dt: f64) -> Self {
        let rho = if correlation_time > 0.0 {
            (-dt / correlation_time).exp()
        } else {
            0.0
        };
        NoiseGen {
            rng,
            sigma,
            rho,
            drive: (1.0 - rho * rho).sqrt(),
            state: 0.0,
            started: false,
        }
    }

    fn next(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        if self.rho == 0.0 {
            return self.sigma * z;
        }
        if !self.started {
            self.started = true;
            self.state = z; // stationary start
        } else {
            self.state = self.rho * self.state + self.drive * z;
        }
        self.sigma * self.state
    }
}

/// Discrete cascade of one-pole sections with unit DC gain.
struct DiscreteCascade {
    pole: f64,
    states: Vec<f64>,
}

impl DiscreteCascade {
    fn new(resp: &FilterResponse, dt: f64) -> Self {
        DiscreteCascade {
            pole: resp.discrete_pole(dt),
            states: vec![0.0; resp.order as usize],
        }
    }

    fn push(&mut self, x: f64) -> f64 {
        let mut v = x;
        for s in &mut self.states {
            *s = self.pole * *s + (1.0 - self.pole) * v;
            v = *s;
        }
        v
    }
}

/// Scalar noise-free trace built from the timeline's charge steps and
/// the filtered transient, evaluated in closed form on the sample grid.
#[allow(clippy::too_many_arguments)]
fn clean_scalar(
    tl: &EventTimeline,
    s: &PulseSchedule,
    cfg: &TraceConfig,
    lt: &LaserTransient,
    contrast_scale: f64,
    transient_scale: f64,
    n: usize,
) -> Vec<f64> {
    let resp = cfg.response();
    let dt = cfg.dt();
    let contrast = cfg.contrast() * contrast_scale;
    let a_tr = lt.amplitude_for(s) * transient_scale;
    let t_tr = lt.onset_time(s);

    // (time, level change) knots
    let mut steps: Vec<(f64, f64)> = Vec::new();
    for (t_ion, t_reset) in tl.ionization_intervals() {
        steps.push((t_ion, -contrast));
        if let Some(tr) = t_reset {
            steps.push((tr, contrast));
        }
    }

    (0..n)
        .map(|k| {
            let t = cfg.start_time + k as f64 * dt;
            let mut v = cfg.level_neutral;
            for &(t0, dv) in &steps {
                v += dv * resp.step(t - t0);
            }
            if a_tr != 0.0 {
                v += a_tr * resp.exp_decay(t - t_tr, lt.decay_time);
            }
            v
        })
        .collect()
}

/// Synthesize one noisy I/Q trace from a timeline. Deterministic for
/// a given seed; with zero noise and zero jitter the output does not
/// depend on the seed at all.
pub fn synthesize_trace(
    tl: &EventTimeline,
    s: &PulseSchedule,
    cfg: &TraceConfig,
    lt: &LaserTransient,
    seed: u64,
) -> Result<IQTrace> {
    cfg.validate()?;
    lt.validate(s)?;
    let n = cfg.n_samples();
    let dt = cfg.dt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // per-cycle fluctuations drawn first so the noise stream is stable;
    // truncated at ±2σ, the sensor contrast cannot collapse
    let z_c: f64 = StandardNormal.sample(&mut rng);
    let z_t: f64 = StandardNormal.sample(&mut rng);
    let jitter_scale = |jitter: f64, z: f64| {
        if jitter > 0.0 {
            1.0 + jitter * z.clamp(-2.0, 2.0)
        } else {
            1.0
        }
    };
    let c_scale = jitter_scale(cfg.contrast_jitter, z_c);
    let t_scale = jitter_scale(lt.amplitude_jitter, z_t);

    let clean = clean_scalar(tl, s, cfg, lt, c_scale, t_scale, n);
    let (sin_a, cos_a) = cfg.iq_angle.sin_cos();

    let mut i = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);

    if cfg.noise_sigma_per_sample > 0.0 || cfg.rts.is_some() {
        let resp = cfg.response();
        let tau_warm = resp.tau().max(cfg.noise_correlation_time);
        let warmup = ((8.0 * tau_warm) / dt).ceil() as usize;

        let rng_i = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let rng_q = ChaCha8Rng::seed_from_u64(seed ^ 0x3c6e_f372_fe94_f82a);
        let mut gen_i = NoiseGen::new(rng_i, cfg.noise_sigma_per_sample, cfg.noise_correlation_time, dt);
        let mut gen_q = NoiseGen::new(rng_q, cfg.noise_sigma_per_sample, cfg.noise_correlation_time, dt);
        let mut filt_i = DiscreteCascade::new(&resp, dt);
        let mut filt_q = DiscreteCascade::new(&resp, dt);

        // telegraph rider, shared by I and Q through the projection
        let mut rts_state = false;
        let mut rts_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1234_5678_9abc_def0);

        let mut ni = 0.0;
        let mut nq = 0.0;
        for k in 0..warmup + n {
            let mut xi = gen_i.next();
            let mut xq = gen_q.next();
            if let Some(rts) = &cfg.rts {
                let p_flip = if rts_state {
                    1.0 - (-rts.rate_down * dt).exp()
                } else {
                    1.0 - (-rts.rate_up * dt).exp()
                };
                if rts_rng.gen::<f64>() < p_flip {
                    rts_state = !rts_state;
                }
                if rts_state {
                    xi += rts.amplitude * cos_a;
                    xq += rts.amplitude * sin_a;
                }
            }
            ni = filt_i.push(xi);
            nq = filt_q.push(xq);
            if k >= warmup {
                let v = clean[k - warmup];
                i.push(v * cos_a + ni);
                q.push(v * sin_a + nq);
            }
        }
        let _ = (ni, nq);
    } else {
        for &v in &clean {
            i.push(v * cos_a);
            q.push(v * sin_a);
        }
    }

    Ok(IQTrace {
        start_time: cfg.start_time,
        dt,
        i,
        q,
        meta: TraceMeta {
            cycle_id: 0,
            seed,
            label: String::new(),
        },
    })
}

/// Apply a causal discrete low-pass (DC gain exactly 1) to I and Q.
pub fn lowpass(trace: &IQTrace, cutoff: f64, order: u32) -> Result<IQTrace> {
    let nyquist = 0.5 / trace.dt;
    if !(cutoff > 0.0) || cutoff >= nyquist {
        return Err(Error::config(format!(
            "cutoff {cutoff} must lie in (0, Nyquist = {nyquist})"
        )));
    }
    if order == 0 {
        return Err(Error::config("filter order must be at least 1"));
    }
    let resp = FilterResponse::new(cutoff, order);
    let mut out = trace.clone();
    for chan in [&mut out.i, &mut out.q] {
        let mut cascade = DiscreteCascade::new(&resp, trace.dt);
        for v in chan.iter_mut() {
            *v = cascade.push(*v);
        }
    }
    Ok(out)
}

/// Sampled current record of the bandwidth-limited DC channel.
#[derive(Debug, Clone, PartialEq)]
pub struct DcTrace {
    pub start_time: f64,
    pub dt: f64,
    pub current: Vec<f64>,
}

/// DC comparison channel configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DcChannelConfig {
    pub sample_rate: f64,
    /// Current with the trap neutral (A).
    pub level_neutral: f64,
    /// Current with the trap ionized (A).
    pub level_ionized: f64,
    pub start_time: f64,
    pub duration: f64,
}

impl Default for DcChannelConfig {
    fn default() -> Self {
        DcChannelConfig {
            sample_rate: 200e3,
            level_neutral: 1e-9,
            level_ionized: 0.0,
            start_time: 0.0,
            duration: 5e-3,
        }
    }
}

/// Render the charge-state step sequence through the DC measurement
/// bandwidth (first-order response, closed form).
pub fn dc_channel(tl: &EventTimeline, bandwidth: f64, cfg: &DcChannelConfig) -> Result<DcTrace> {
    if !(bandwidth > 0.0) {
        return Err(Error::domain("dc bandwidth must be positive"));
    }
    let resp = FilterResponse::new(bandwidth, 1);
    let contrast = cfg.level_neutral - cfg.level_ionized;
    let dt = 1.0 / cfg.sample_rate;
    let n = (cfg.duration * cfg.sample_rate).round() as usize;

    let mut steps: Vec<(f64, f64)> = Vec::new();
    for (t_ion, t_reset) in tl.ionization_intervals() {
        steps.push((t_ion, -contrast));
        if let Some(tr) = t_reset {
            steps.push((tr, contrast));
        }
    }

    let current = (0..n)
        .map(|k| {
            let t = cfg.start_time + k as f64 * dt;
            let mut v = cfg.level_neutral;
            for &(t0, dv) in &steps {
                v += dv * resp.step(t - t0);
            }
            v
        })
        .collect();

    Ok(DcTrace {
        start_time: cfg.start_time,
        dt,
        current,
    })
}

/// Boxcar window used by noise calibration; together with the
/// intrinsic integration time of the calibrated noise shape this
/// corresponds to 1 µs of effective integration.
pub const CALIBRATION_WINDOW: f64 = 0.5e-6;

/// Find the per-sample noise sigma that makes a boxcar average of the
/// filtered noise-only trace reach `sigma_V = contrast / target` over
/// the calibration window.
///
/// The measurement is Monte Carlo (≥10⁵ windows at unit sigma) and the
/// boxcar deviation is linear in sigma, so a single pass suffices.
pub fn calibrate_noise(target_snr_1us: f64, contrast: f64, cfg: &TraceConfig) -> Result<f64> {
    if !(contrast > 0.0) {
        return Err(Error::domain("contrast must be positive"));
    }
    if !(target_snr_1us > 0.0) {
        return Err(Error::domain("target SNR must be positive"));
    }
    if target_snr_1us.is_infinite() {
        return Ok(0.0);
    }
    let sigma_v_unit = noise_sigma_v(cfg, CALIBRATION_WINDOW, 120_000, 0x0e15_caf0);
    let target_sigma_v = contrast / target_snr_1us;
    Ok(target_sigma_v / sigma_v_unit)
}

/// Standard deviation of boxcar means of length `window` over a
/// filtered unit-sigma noise stream with the shape set by `cfg`.
pub fn noise_sigma_v(cfg: &TraceConfig, window: f64, n_windows: usize, seed: u64) -> f64 {
    let dt = cfg.dt();
    let resp = cfg.response();
    let w = (window / dt).round().max(1.0) as usize;
    let tau_warm = resp.tau().max(cfg.noise_correlation_time);
    let warmup = ((8.0 * tau_warm) / dt).ceil() as usize;

    let rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen = NoiseGen::new(rng, 1.0, cfg.noise_correlation_time, dt);
    let mut filt = DiscreteCascade::new(&resp, dt);
    for _ in 0..warmup {
        filt.push(gen.next());
    }
    let mut sum = 0.0;
    let mut sum2 = 0.0;
    for _ in 0..n_windows {
        let mut acc = 0.0;
        for _ in 0..w {
            acc += filt.push(gen.next());
        }
        let mean = acc / w as f64;
        sum += mean;
        sum2 += mean * mean;
    }
    let n = n_windows as f64;
    ((sum2 - sum * sum / n) / (n - 1.0)).sqrt()
}

// ---------------------------------------------------------------------------
// trace I/O
// ---------------------------------------------------------------------------

/// Write a trace as `time_s,I_V,Q_V` CSV. Values use Rust's shortest
/// round-trip float formatting, so reading back is lossless.
pub fn write_trace_csv<W: Write>(w: &mut W, trace: &IQTrace) -> std::io::Result<()> {
    writeln!(w, "time_s,I_V,Q_V")?;
    for k in 0..trace.len() {
        writeln!(w, "{},{},{}", trace.time_at(k), trace.i[k], trace.q[k])?;
    }
    Ok(())
}

/// Read a CSV trace written by [`write_trace_csv`].
pub fn read_trace_csv<R: BufRead>(r: R) -> Result<IQTrace> {
    let mut times = Vec::new();
    let mut i = Vec::new();
    let mut q = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("read_trace_csv", e))?;
        if ln == 0 && line.starts_with("time_s") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let mut next = |what: &str| -> Result<f64> {
            parts
                .next()
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad {what} on line {}", ln + 1)))
        };
        times.push(next("time")?);
        i.push(next("I")?);
        q.push(next("Q")?);
    }
    if times.len() < 2 {
        return Err(Error::Parse("trace CSV needs at least two samples".into()));
    }
    Ok(IQTrace {
        start_time: times[0],
        dt: times[1] - times[0],
        i,
        q,
        meta: TraceMeta::default(),
    })
}

const TRACE_MAGIC: &[u8; 4] = b"PIQT";
const TRACE_VERSION: u32 = 1;

/// Write the compact binary record: little-endian, f64 samples, JSON
/// metadata header.
pub fn write_trace_binary<W: Write>(w: &mut W, trace: &IQTrace) -> std::io::Result<()> {
    w.write_all(TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&trace.start_time.to_le_bytes())?;
    w.write_all(&trace.dt.to_le_bytes())?;
    w.write_all(&(trace.len() as u64).to_le_bytes())?;
    let meta = serde_json::to_vec(&trace.meta).expect("trace metadata serializes");
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    for v in trace.i.iter().chain(trace.q.iter()) {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read the binary record written by [`write_trace_binary`].
pub fn read_trace_binary<R: Read>(r: &mut R) -> Result<IQTrace> {
    fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| Error::io("read_trace_binary", e))?;
        Ok(buf)
    }
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != TRACE_MAGIC {
        return Err(Error::Parse("not a trace binary (bad magic)".into()));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != TRACE_VERSION {
        return Err(Error::Parse(format!("unsupported trace version {version}")));
    }
    let start_time = f64::from_le_bytes(read_exact(r)?);
    let dt = f64::from_le_bytes(read_exact(r)?);
    let n = u64::from_le_bytes(read_exact(r)?) as usize;
    let meta_len = u32::from_le_bytes(read_exact(r)?) as usize;
    let mut meta_buf = vec![0u8; meta_len];
    r.read_exact(&mut meta_buf)
        .map_err(|e| Error::io("read_trace_binary", e))?;
    let meta: TraceMeta =
        serde_json::from_slice(&meta_buf).map_err(|e| Error::Parse(e.to_string()))?;
    let mut read_channel = |n: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(f64::from_le_bytes(read_exact(r)?));
        }
        Ok(out)
    };
    let i = read_channel(n)?;
    let q = read_channel(n)?;
    Ok(IQTrace {
        start_time,
        dt,
        i,
        q,
        meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{TimelineEvent, Transition};
    use approx::assert_relative_eq;

    fn event_timeline(t_ion: f64, t_reset: Option<f64>) -> EventTimeline {
        let mut events = vec![TimelineEvent {
            time: t_ion,
            transition: Transition::RelaxIonize,
        }];
        if let Some(tr) = t_reset {
            events.push(TimelineEvent {
                time: tr,
                transition: Transition::Reset,
            });
        }
        EventTimeline { events }
    }

    fn quiet_cfg() -> TraceConfig {
        TraceConfig {
            noise_sigma_per_sample: 0.0,
            ..TraceConfig::default()
        }
    }

    fn no_transient() -> LaserTransient {
        LaserTransient {
            jump_amplitude: 0.0,
            ..LaserTransient::default()
        }
    }

    #[test]
    fn empty_timeline_is_flat_neutral() {
        let cfg = quiet_cfg();
        let tr = synthesize_trace(
            &EventTimeline::default(),
            &PulseSchedule::pulsed_default(),
            &cfg,
            &no_transient(),
            1,
        )
        .unwrap();
        for &v in &tr.i {
            assert_relative_eq!(v, cfg.level_neutral, max_relative = 1e-12);
        }
        for &v in &tr.q {
            assert!(v.abs() < 1e-18);
        }
    }

    #[test]
    fn noise_free_output_is_seed_independent() {
        let cfg = quiet_cfg();
        let tl = event_timeline(1.8e-6, Some(10e-6));
        let s = PulseSchedule::pulsed_default();
        let lt = no_transient();
        let a = synthesize_trace(&tl, &s, &cfg, &lt, 1).unwrap();
        let b = synthesize_trace(&tl, &s, &cfg, &lt, 999).unwrap();
        assert_eq!(a.i, b.i);
        assert_eq!(a.q, b.q);
    }

    #[test]
    fn filtered_step_has_analytic_rise_time() {
        // 10-90% rise of a first-order section is ln(9)/ω_c ≈ 0.35/f_c
        let cfg = quiet_cfg();
        let tl = event_timeline(1.8e-6, None);
        let tr = synthesize_trace(&tl, &PulseSchedule::pulsed_default(), &cfg, &no_transient(), 1)
            .unwrap();
        let contrast = cfg.contrast();
        let lo = cfg.level_neutral - 0.1 * contrast;
        let hi = cfg.level_neutral - 0.9 * contrast;
        let t10 = tr
            .i
            .iter()
            .position(|&v| v < lo)
            .map(|k| tr.time_at(k))
            .unwrap();
        let t90 = tr
            .i
            .iter()
            .position(|&v| v < hi)
            .map(|k| tr.time_at(k))
            .unwrap();
        let rise = t90 - t10;
        let expect = 9f64.ln() / (2.0 * std::f64::consts::PI * cfg.filter_cutoff);
        assert_relative_eq!(expect, 0.35 / cfg.filter_cutoff, max_relative = 1e-2);
        // sampled crossing times are quantized to one sample each
        assert!((rise - expect).abs() <= 2.0 * tr.dt, "rise {rise} vs {expect}");
    }

    /// With paper timing (arrival 30 ns, electrical onset 75 ns) the
    /// filtered response settles — becomes visible against full
    /// contrast — only around 0.4 µs.
    #[test]
    fn filtered_onset_appears_near_400ns() {
        let cfg = quiet_cfg();
        let s = PulseSchedule::pulsed_default();
        let lt = LaserTransient::default();
        let resp = cfg.response();
        // settling of a step placed at the electrical onset
        let onset = lt.onset_time(&s);
        let mut t = onset;
        while resp.step(t - onset) < 0.98 {
            t += 1e-9;
        }
        assert!(
            (0.3e-6..0.5e-6).contains(&t),
            "98% settling at {t}, expected about 0.4 µs"
        );
    }

    #[test]
    fn lowpass_dc_gain_is_one() {
        let n = 4000;
        let tr = IQTrace {
            start_time: 0.0,
            dt: 2e-8,
            i: vec![0.7; n],
            q: vec![-0.3; n],
            meta: TraceMeta::default(),
        };
        let f = lowpass(&tr, 2e6, 1).unwrap();
        assert_relative_eq!(*f.i.last().unwrap(), 0.7, max_relative = 1e-9);
        assert_relative_eq!(*f.q.last().unwrap(), -0.3, max_relative = 1e-9);
    }

    #[test]
    fn lowpass_first_order_632_percent_point() {
        // choose cutoff so one analog time constant is exactly 20 samples
        let dt = 2e-8;
        let tau = 20.0 * dt;
        let cutoff = 1.0 / (2.0 * std::f64::consts::PI * tau);
        let n = 200;
        let tr = IQTrace {
            start_time: 0.0,
            dt,
            i: vec![1.0; n],
            q: vec![0.0; n],
            meta: TraceMeta::default(),
        };
        let f = lowpass(&tr, cutoff, 1).unwrap();
        // sample k carries the response (k+1) sample periods after the
        // step entered the filter
        let y = f.i[19];
        assert_relative_eq!(y, 1.0 - (-1.0f64).exp(), max_relative = 1e-9);
    }

    #[test]
    fn lowpass_rejects_bad_cutoff() {
        let tr = IQTrace {
            start_time: 0.0,
            dt: 2e-8,
            i: vec![0.0; 10],
            q: vec![0.0; 10],
            meta: TraceMeta::default(),
        };
        assert!(lowpass(&tr, 25e6, 1).is_err());
        assert!(lowpass(&tr, 0.0, 1).is_err());
    }

    /// Output variance of filtered white noise matches the analytic
    /// noise bandwidth of the one-pole cascade computed from its
    /// impulse response.
    #[test]
    fn filtered_noise_variance_matches_analytic() {
        let dt = 2e-8;
        let resp = FilterResponse::new(2e6, 1);
        let n = 1_000_000usize;
        let rng = ChaCha8Rng::seed_from_u64(11);
        let mut gen = NoiseGen::new(rng, 1.0, 0.0, dt);
        let mut filt = DiscreteCascade::new(&resp, dt);
        for _ in 0..2000 {
            filt.push(gen.next());
        }
        let mut sum = 0.0;
        let mut sum2 = 0.0;
        for _ in 0..n {
            let v = filt.push(gen.next());
            sum += v;
            sum2 += v * v;
        }
        let var = (sum2 - sum * sum / n as f64) / (n - 1) as f64;
        // sum of squared impulse response of one section: (1-p)/(1+p)
        let p = (-dt / resp.tau()).exp();
        let expect = (1.0 - p) / (1.0 + p);
        assert_relative_eq!(var, expect, max_relative = 0.02);
    }

    #[test]
    fn rotation_preserves_magnitude() {
        let tl = event_timeline(1.8e-6, Some(8e-6));
        let s = PulseSchedule::pulsed_default();
        let lt = LaserTransient::default();
        let mut cfg = quiet_cfg();
        let base = synthesize_trace(&tl, &s, &cfg, &lt, 3).unwrap();
        cfg.iq_angle = 0.7;
        let rot = synthesize_trace(&tl, &s, &cfg, &lt, 3).unwrap();
        assert_ne!(base.i, rot.i);
        for (a, b) in base.magnitude().iter().zip(rot.magnitude()) {
            assert_relative_eq!(*a, b, max_relative = 1e-9, epsilon = 1e-15);
        }
    }

    /// Filter linearity: the response to an ionize+reset pair equals
    /// the sum of the individual step responses.
    #[test]
    fn lti_additivity_of_steps() {
        let cfg = quiet_cfg();
        let s = PulseSchedule::pulsed_default();
        let lt = no_transient();
        let pair = synthesize_trace(&event_timeline(2e-6, Some(6e-6)), &s, &cfg, &lt, 1).unwrap();
        let down = synthesize_trace(&event_timeline(2e-6, None), &s, &cfg, &lt, 1).unwrap();
        // an isolated reset is the mirrored ionization step
        let up = synthesize_trace(&event_timeline(6e-6, None), &s, &cfg, &lt, 1).unwrap();
        for k in 0..pair.len() {
            let sum = down.i[k] + (cfg.level_neutral - up.i[k]) + cfg.level_neutral;
            assert_relative_eq!(pair.i[k], sum - cfg.level_neutral, max_relative = 1e-10);
        }
    }

    #[test]
    fn pre_trigger_mean_estimates_neutral_level() {
        let mut cfg = quiet_cfg();
        cfg.noise_sigma_per_sample = 2e-3;
        let s = PulseSchedule::pulsed_default();
        let lt = no_transient();
        let tl = EventTimeline::default();
        // grand mean over many traces; single-window tolerance follows
        // the filtered-noise standard error
        let reps = 200;
        let mut grand = 0.0;
        for seed in 0..reps {
            let tr = synthesize_trace(&tl, &s, &cfg, &lt, seed).unwrap();
            grand += tr.pre_trigger_mean(cfg.iq_angle).unwrap();
        }
        grand /= reps as f64;
        let sigma_v = cfg.noise_sigma_per_sample * noise_sigma_v(&cfg, 5e-6, 20_000, 77);
        let tol = 3.0 * sigma_v / (reps as f64).sqrt();
        assert!(
            (grand - cfg.level_neutral).abs() < tol,
            "pre-pulse mean {grand} vs {} (tol {tol})",
            cfg.level_neutral
        );
    }

    #[test]
    fn dc_channel_resolves_slow_pairs_only() {
        let cfg = DcChannelConfig {
            sample_rate: 500e3,
            duration: 4e-3,
            ..DcChannelConfig::default()
        };
        let contrast = cfg.level_neutral - cfg.level_ionized;

        // 1 ms apart at 2 kHz: fully resolved plateau
        let tl = event_timeline(1e-3, Some(2e-3));
        let tr = dc_channel(&tl, 2e3, &cfg).unwrap();
        let min = tr.current.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((cfg.level_neutral - min) > 0.99 * contrast);

        // 50 µs apart: edges merged, deviation below half contrast
        let tl = event_timeline(1e-3, Some(1.05e-3));
        let tr = dc_channel(&tl, 2e3, &cfg).unwrap();
        let min = tr.current.iter().cloned().fold(f64::INFINITY, f64::min);
        let dev = cfg.level_neutral - min;
        assert!(
            dev < 0.5 * contrast,
            "50 µs pair should be attenuated, got {} of contrast",
            dev / contrast
        );
        // analytic check: 1 − e^{−T/τ} at T = 50 µs, τ = 1/(2π·2 kHz)
        let tau = 1.0 / (2.0 * std::f64::consts::PI * 2e3);
        let expect = (1.0 - (-50e-6 / tau).exp()) * contrast;
        assert_relative_eq!(dev, expect, max_relative = 0.02);
    }

    #[test]
    fn calibrate_noise_scales_linearly() {
        let cfg = TraceConfig {
            noise_correlation_time: 0.265e-6,
            ..TraceConfig::default()
        };
        let sigma1 = calibrate_noise(9.6, 12e-3, &cfg).unwrap();
        let sigma2 = calibrate_noise(9.6, 24e-3, &cfg).unwrap();
        assert_relative_eq!(sigma2, 2.0 * sigma1, max_relative = 1e-9);
        let sigma3 = calibrate_noise(19.2, 12e-3, &cfg).unwrap();
        assert_relative_eq!(sigma3, sigma1 / 2.0, max_relative = 1e-9);
        assert_eq!(calibrate_noise(f64::INFINITY, 12e-3, &cfg).unwrap(), 0.0);
        assert!(calibrate_noise(9.6, -1.0, &cfg).is_err());
    }

    #[test]
    fn calibrated_noise_hits_target_sigma() {
        let mut cfg = TraceConfig {
            noise_correlation_time: 0.265e-6,
            duration: 60e-6,
            start_time: 0.0,
            ..TraceConfig::default()
        };
        let contrast = cfg.contrast();
        cfg.noise_sigma_per_sample = calibrate_noise(9.6, contrast, &cfg).unwrap();
        // measure sigma_V over fresh boxcar windows
        let s = PulseSchedule::pulsed_default();
        let lt = no_transient();
        let w = (CALIBRATION_WINDOW / cfg.dt()).round() as usize;
        let mut means = Vec::new();
        for seed in 0..60 {
            let tr = synthesize_trace(&EventTimeline::default(), &s, &cfg, &lt, 500 + seed).unwrap();
            for chunk in tr.i.chunks_exact(w) {
                means.push(chunk.iter().sum::<f64>() / w as f64);
            }
        }
        let n = means.len() as f64;
        let mean = means.iter().sum::<f64>() / n;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let snr = contrast / var.sqrt();
        assert!(
            (snr - 9.6).abs() / 9.6 < 0.05,
            "calibrated SNR at the calibration window: {snr}"
        );
    }

    #[test]
    fn exp_decay_closed_form_matches_discrete_filter() {
        for order in [1u32, 2, 3] {
            let resp = FilterResponse::new(2e6, order);
            let dt = 1e-9; // dense grid so the discrete path converges
            let tau_d = 250e-9;
            let mut cascade = DiscreteCascade::new(&resp, dt);
            let mut worst = 0.0f64;
            for k in 0..4000 {
                let t = k as f64 * dt;
                let x = (-t / tau_d).exp();
                let y = cascade.push(x);
                let expect = resp.exp_decay(t + dt, tau_d);
                worst = worst.max((y - expect).abs());
            }
            assert!(worst < 0.01, "order {order}: worst deviation {worst}");
        }
    }

    #[test]
    fn rts_rider_moves_between_two_levels() {
        let cfg = TraceConfig {
            rts: Some(RtsNoise {
                amplitude: 5e-3,
                rate_up: 2e5,
                rate_down: 2e5,
            }),
            duration: 100e-6,
            ..quiet_cfg()
        };
        let tr = synthesize_trace(
            &EventTimeline::default(),
            &PulseSchedule::pulsed_default(),
            &cfg,
            &no_transient(),
            5,
        )
        .unwrap();
        let max = tr.i.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = tr.i.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(max > cfg.level_neutral + 3e-3, "telegraph high level missing");
        assert!(min < cfg.level_neutral + 2e-3, "telegraph low level missing");
    }

    #[test]
    fn trace_roundtrip_csv_and_binary() {
        let mut cfg = quiet_cfg();
        cfg.noise_sigma_per_sample = 1e-3;
        cfg.duration = 2e-6;
        let mut tr = synthesize_trace(
            &event_timeline(0.8e-6, None),
            &PulseSchedule::pulsed_default(),
            &cfg,
            &LaserTransient::default(),
            9,
        )
        .unwrap();
        tr.meta = TraceMeta {
            cycle_id: 42,
            seed: 9,
            label: "unit".into(),
        };

        let mut csv = Vec::new();
        write_trace_csv(&mut csv, &tr).unwrap();
        let back = read_trace_csv(std::io::BufReader::new(csv.as_slice())).unwrap();
        assert_eq!(tr.i, back.i);
        assert_eq!(tr.q, back.q);
        assert_eq!(tr.start_time, back.start_time);

        let mut bin = Vec::new();
        write_trace_binary(&mut bin, &tr).unwrap();
        let back = read_trace_binary(&mut bin.as_slice()).unwrap();
        assert_eq!(tr, back);
    }
}
