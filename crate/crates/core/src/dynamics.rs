//! Continuous-time stochastic dynamics of the joint (ion, trap)
//! system within one measurement cycle.
//!
//! Four rate processes compete:
//!
//! * excitation of the ion at Γ_ex·P, active only while resonant
//!   light is on;
//! * relaxation of the excited ion at 1/τ_ex, ionizing the trap with
//!   branching probability η and otherwise benign;
//! * direct background ionization of the trap at Γ_bg·P while any
//!   light is on, independent of wavelength;
//! * reset (electron recapture) of an ionized trap at 1/τ_reset.
//!
//! Rates are piecewise constant across the light-on/light-off
//! segments of a pulse schedule, so exact sampling reduces to
//! competing exponential clocks within each segment. The companion
//! [`ionization_probability`] solves the same generator analytically
//! (2×2 matrix exponential over the survival subspace) and serves as
//! an oracle for the sampler.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::{Error, Result};

/// Stochastic rates of the photoionization process.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PhotophysicsParams {
    /// Excitation rate per unit laser power (s⁻¹·mW⁻¹), active while
    /// resonant light is on.
    pub excitation_rate_per_power: f64,
    /// Excited-state lifetime τ_ex (s).
    pub excited_lifetime: f64,
    /// Probability η that one relaxation ionizes the trap.
    pub ionization_branching: f64,
    /// Background ionization rate per unit power (s⁻¹·mW⁻¹), active
    /// while any light is on.
    pub background_rate_per_power: f64,
    /// Trap reset time constant τ_reset (s).
    pub reset_time_constant: f64,
}

impl PhotophysicsParams {
    pub fn validate(&self) -> Result<()> {
        if self.excitation_rate_per_power < 0.0 || self.background_rate_per_power < 0.0 {
            return Err(Error::domain("rates must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ionization_branching) {
            return Err(Error::domain("ionization_branching must lie in [0, 1]"));
        }
        if !(self.excited_lifetime > 0.0) {
            return Err(Error::domain("excited_lifetime must be positive"));
        }
        if !(self.reset_time_constant > 0.0) {
            return Err(Error::domain("reset_time_constant must be positive"));
        }
        Ok(())
    }
}

/// Laser pulse timing within one measurement cycle. Times are
/// trigger-referenced; `pulse_start` is the arrival of the light at
/// the device.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PulseSchedule {
    /// Light-on time at the device (s).
    pub pulse_start: f64,
    /// Pulse length (s).
    pub pulse_length: f64,
    /// Laser power (mW).
    pub power: f64,
    /// Whether the light is resonant with the ion transition.
    pub resonant: bool,
    /// Cycle length (s); the simulation stops here.
    pub cycle_length: f64,
}

impl PulseSchedule {
    /// 7.6 mW, 100 ns resonant pulse arriving 30 ns after the trigger.
    pub fn pulsed_default() -> Self {
        PulseSchedule {
            pulse_start: 30e-9,
            pulse_length: 100e-9,
            power: 7.6,
            resonant: true,
            cycle_length: 100e-6,
        }
    }

    /// Continuous-wave illumination covering the whole cycle.
    pub fn cw(power: f64, cycle_length: f64) -> Self {
        PulseSchedule {
            pulse_start: 0.0,
            pulse_length: cycle_length,
            power,
            resonant: true,
            cycle_length,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pulse_start < 0.0 || self.pulse_length < 0.0 || self.power < 0.0 {
            return Err(Error::domain("schedule times and power must be non-negative"));
        }
        if self.pulse_start + self.pulse_length > self.cycle_length + 1e-15 {
            return Err(Error::domain("pulse must fit within the cycle"));
        }
        Ok(())
    }

    fn light_on(&self, t: f64) -> bool {
        self.power > 0.0 && t >= self.pulse_start && t < self.pulse_start + self.pulse_length
    }
}

/// One state transition of the (ion, trap) system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transition {
    /// Ion promoted to the optically excited state.
    Excite,
    /// Excited ion relaxed without ionizing the trap.
    RelaxBenign,
    /// Excited ion relaxed and ionized the trap.
    RelaxIonize,
    /// Trap ionized directly by non-resonant light.
    BackgroundIonize,
    /// Ionized trap recaptured an electron.
    Reset,
}

impl Transition {
    pub fn as_str(&self) -> &'static str {
        match self {
            Transition::Excite => "excite",
            Transition::RelaxBenign => "relax_benign",
            Transition::RelaxIonize => "relax_ionize",
            Transition::BackgroundIonize => "background_ionize",
            Transition::Reset => "reset",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "excite" => Transition::Excite,
            "relax_benign" => Transition::RelaxBenign,
            "relax_ionize" => Transition::RelaxIonize,
            "background_ionize" => Transition::BackgroundIonize,
            "reset" => Transition::Reset,
            other => return Err(Error::Parse(format!("unknown transition `{other}`"))),
        })
    }

    /// Does this transition ionize the trap?
    pub fn ionizes(&self) -> bool {
        matches!(self, Transition::RelaxIonize | Transition::BackgroundIonize)
    }
}

/// Timestamped transition record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub time: f64,
    pub transition: Transition,
}

/// Ordered transitions of one measurement cycle, starting from
/// (ion ground, trap neutral) at t = 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EventTimeline {
    pub events: Vec<TimelineEvent>,
}

impl EventTimeline {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Time of the first trap ionization, if any.
    pub fn first_ionization(&self) -> Option<f64> {
        self.events
            .iter()
            .find(|e| e.transition.ionizes())
            .map(|e| e.time)
    }

    /// (ionize, reset) pairs; an unresolved ionization has `None` for
    /// its reset time.
    pub fn ionization_intervals(&self) -> Vec<(f64, Option<f64>)> {
        let mut out = Vec::new();
        let mut open: Option<f64> = None;
        for e in &self.events {
            if e.transition.ionizes() {
                open = Some(e.time);
            } else if e.transition == Transition::Reset {
                if let Some(t0) = open.take() {
                    out.push((t0, Some(e.time)));
                }
            }
        }
        if let Some(t0) = open {
            out.push((t0, None));
        }
        out
    }

    /// Is the trap ionized at time `t`?
    pub fn ionized_at(&self, t: f64) -> bool {
        let mut ionized = false;
        for e in &self.events {
            if e.time > t {
                break;
            }
            if e.transition.ionizes() {
                ionized = true;
            } else if e.transition == Transition::Reset {
                ionized = false;
            }
        }
        ionized
    }

    /// Check ordering and state legality of the whole record.
    pub fn validate(&self) -> Result<()> {
        let mut excited = false;
        let mut ionized = false;
        let mut last = f64::NEG_INFINITY;
        for e in &self.events {
            if e.time <= last {
                return Err(Error::domain("timeline times must strictly increase"));
            }
            last = e.time;
            match e.transition {
                Transition::Excite => {
                    if excited {
                        return Err(Error::domain("excite while already excited"));
                    }
                    excited = true;
                }
                Transition::RelaxBenign => {
                    if !excited {
                        return Err(Error::domain("relaxation without excitation"));
                    }
                    excited = false;
                }
                Transition::RelaxIonize => {
                    if !excited {
                        return Err(Error::domain("relaxation without excitation"));
                    }
                    if ionized {
                        return Err(Error::domain("double ionization of a single trap"));
                    }
                    excited = false;
                    ionized = true;
                }
                Transition::BackgroundIonize => {
                    if ionized {
                        return Err(Error::domain("double ionization of a single trap"));
                    }
                    ionized = true;
                }
                Transition::Reset => {
                    if !ionized {
                        return Err(Error::domain("reset of a neutral trap"));
                    }
                    ionized = false;
                }
            }
        }
        Ok(())
    }
}

/// Exact simulation of one cycle; deterministic for a given seed.
pub fn simulate_cycle(
    s: &PulseSchedule,
    p: &PhotophysicsParams,
    seed: u64,
) -> Result<EventTimeline> {
    s.validate()?;
    p.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tl = EventTimeline::default();

    let mut t = 0.0_f64;
    let mut excited = false;
    let mut ionized = false;

    // segment boundaries where rates change
    let t_on = s.pulse_start.min(s.cycle_length);
    let t_off = (s.pulse_start + s.pulse_length).min(s.cycle_length);

    loop {
        let light = s.light_on(t);
        let k_ex = if light && s.resonant && !excited {
            p.excitation_rate_per_power * s.power
        } else {
            0.0
        };
        let k_bg = if light && !ionized {
            p.background_rate_per_power * s.power
        } else {
            0.0
        };
        let k_relax = if excited { 1.0 / p.excited_lifetime } else { 0.0 };
        let k_reset = if ionized { 1.0 / p.reset_time_constant } else { 0.0 };
        let total = k_ex + k_bg + k_relax + k_reset;

        // end of the current constant-rate segment
        let seg_end = if t < t_on {
            t_on
        } else if t < t_off {
            t_off
        } else {
            s.cycle_length
        };

        if total <= 0.0 {
            if seg_end >= s.cycle_length {
                break;
            }
            t = seg_end;
            continue;
        }

        let wait = exp_variate(&mut rng, total);
        if t + wait >= seg_end {
            // no event before the rates change; jump to the boundary
            // (memorylessness makes the resample exact)
            if seg_end >= s.cycle_length {
                break;
            }
            t = seg_end;
            continue;
        }
        t += wait;

        // pick a clock proportionally to its rate
        let u = rng.gen::<f64>() * total;
        let transition = if u < k_ex {
            excited = true;
            Transition::Excite
        } else if u < k_ex + k_bg {
            ionized = true;
            Transition::BackgroundIonize
        } else if u < k_ex + k_bg + k_relax {
            excited = false;
            if !ionized && rng.gen::<f64>() < p.ionization_branching {
                ionized = true;
                Transition::RelaxIonize
            } else {
                Transition::RelaxBenign
            }
        } else {
            ionized = false;
            Transition::Reset
        };
        tl.events.push(TimelineEvent { time: t, transition });
    }

    Ok(tl)
}

fn exp_variate<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    let u: f64 = rng.gen();
    let u = if u <= 0.0 { f64::MIN_POSITIVE } else { u };
    -u.ln() / rate
}

/// 2×2 matrix exponential exp(M·t) via the eigenvalue closed form;
/// eigenvalues of the survival generator are always real and
/// non-positive, so the factored exponentials cannot overflow.
fn expm2(m: [[f64; 2]; 2], t: f64) -> [[f64; 2]; 2] {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let mean = 0.5 * tr;
    let q = (mean * mean - det).max(0.0).sqrt();
    let e_plus = ((mean + q) * t).exp();
    let e_minus = ((mean - q) * t).exp();
    // e^{mean t} cosh(qt) and e^{mean t} sinh(qt)/q without forming
    // the overflow-prone factors separately
    let (c, s_over_q) = if q * t.abs() < 1e-8 {
        let e = (mean * t).exp();
        let qt2 = (q * t) * (q * t);
        (e * (1.0 + 0.5 * qt2), e * t * (1.0 + qt2 / 6.0))
    } else {
        (0.5 * (e_plus + e_minus), 0.5 * (e_plus - e_minus) / q)
    };
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let ident = if i == j { 1.0 } else { 0.0 };
            out[i][j] = c * ident + s_over_q * (m[i][j] - mean * ident);
        }
    }
    out
}

/// Analytic per-cycle probability of at least one trap ionization.
///
/// Tracks the survival subspace {(ground, neutral), (excited,
/// neutral)}; both ionization channels are absorbing. The generator is
/// constant on each light segment, so the solution is a product of
/// 2×2 matrix exponentials.
pub fn ionization_probability(s: &PulseSchedule, p: &PhotophysicsParams) -> Result<f64> {
    s.validate()?;
    p.validate()?;

    let mut state = [1.0_f64, 0.0_f64]; // (ground, excited), trap neutral
    let k_relax = 1.0 / p.excited_lifetime;
    let eta = p.ionization_branching;

    let t_on = s.pulse_start.min(s.cycle_length);
    let t_off = (s.pulse_start + s.pulse_length).min(s.cycle_length);
    let segments = [
        (t_on - 0.0, false),
        (t_off - t_on, true),
        (s.cycle_length - t_off, false),
    ];

    for (dt, light) in segments {
        if dt <= 0.0 {
            continue;
        }
        let k_ex = if light && s.resonant {
            p.excitation_rate_per_power * s.power
        } else {
            0.0
        };
        let k_bg = if light {
            p.background_rate_per_power * s.power
        } else {
            0.0
        };
        // d/dt (g, e) = M (g, e); absorption drains probability
        let m = [
            [-(k_ex + k_bg), (1.0 - eta) * k_relax],
            [k_ex, -(k_relax + k_bg)],
        ];
        let phi = expm2(m, dt);
        state = [
            phi[0][0] * state[0] + phi[0][1] * state[1],
            phi[1][0] * state[0] + phi[1][1] * state[1],
        ];
    }

    Ok((1.0 - state[0] - state[1]).clamp(0.0, 1.0))
}

/// Survival counts N(t): the number of timelines whose first
/// ionization occurs after each grid time.
pub fn survival_counts(timelines: &[EventTimeline], grid: &[f64]) -> Vec<(f64, usize)> {
    let times: Vec<f64> = timelines.iter().filter_map(|tl| tl.first_ionization()).collect();
    survival_from_times(&times, grid)
}

/// Survival counts from a flat list of event times.
pub fn survival_from_times(times: &[f64], grid: &[f64]) -> Vec<(f64, usize)> {
    grid.iter()
        .map(|&t| (t, times.iter().filter(|&&ti| ti > t).count()))
        .collect()
}

/// Write timelines in the line-oriented archival format
/// `cycle_id,time_s,transition`.
pub fn write_timelines<W: Write>(
    w: &mut W,
    records: impl IntoIterator<Item = (u64, EventTimeline)>,
) -> std::io::Result<()> {
    writeln!(w, "cycle_id,time_s,transition")?;
    for (cycle, tl) in records {
        for e in &tl.events {
            writeln!(w, "{},{:.12e},{}", cycle, e.time, e.transition.as_str())?;
        }
    }
    Ok(())
}

/// Read timelines written by [`write_timelines`].
pub fn read_timelines<R: BufRead>(r: R) -> Result<Vec<(u64, EventTimeline)>> {
    let mut out: Vec<(u64, EventTimeline)> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("read_timelines", e))?;
        if i == 0 && line.starts_with("cycle_id") {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let cycle: u64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad cycle id on line {}", i + 1)))?;
        let time: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad time on line {}", i + 1)))?;
        let transition = Transition::parse(
            parts
                .next()
                .ok_or_else(|| Error::Parse(format!("missing transition on line {}", i + 1)))?,
        )?;
        match out.last_mut() {
            Some((c, tl)) if *c == cycle => tl.events.push(TimelineEvent { time, transition }),
            _ => out.push((
                cycle,
                EventTimeline {
                    events: vec![TimelineEvent { time, transition }],
                },
            )),
        }
    }
    Ok(out)
}
