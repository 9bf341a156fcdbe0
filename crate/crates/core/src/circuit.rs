//! Lumped-element model of the resonant readout circuit and the
//! charge-sensor transfer function.
//!
//! The readout circuit is a series inductor feeding the device
//! resistance in parallel with the parasitic capacitance. Driving it
//! near resonance converts a small change of the device resistance
//! (set by the charge state near the sensor dot) into a change of the
//! reflected amplitude |Γ|.
//!
//! The sensor transfer function is a thermally broadened
//! single-electron-tunneling peak, sech²((V_g − V_peak)/w). Losing an
//! electron shifts the whole peak along the gate axis; reading the
//! reflected level at a fixed operating point on the peak flank then
//! discriminates the two charge states.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::{Error, Result};

/// Complex number in rectangular form, only what the reflection
/// arithmetic needs.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cplx {
    re: f64,
    im: f64,
}

impl Cplx {
    const fn new(re: f64, im: f64) -> Self {
        Cplx { re, im }
    }

    fn add(self, o: Cplx) -> Cplx {
        Cplx::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Cplx) -> Cplx {
        Cplx::new(self.re - o.re, self.im - o.im)
    }

    fn div(self, o: Cplx) -> Cplx {
        let d = o.re * o.re + o.im * o.im;
        Cplx::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}

/// Lumped-element constants of the readout resonator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ResonatorParams {
    /// Series inductance L (henry).
    pub inductance: f64,
    /// Parasitic capacitance C_p to ground (farad).
    pub parasitic_capacitance: f64,
    /// Loaded quality factor of the measured resonance.
    pub loaded_quality_factor: f64,
    /// Transmission-line impedance Z_0 (ohm).
    pub line_impedance: f64,
    /// Device resistance with the trap neutral (ohm).
    pub device_resistance_neutral: f64,
    /// Device resistance with the trap ionized (ohm).
    pub device_resistance_ionized: f64,
}

impl ResonatorParams {
    /// Validate positivity and the Q > 1 requirement.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("inductance", self.inductance),
            ("parasitic_capacitance", self.parasitic_capacitance),
            ("line_impedance", self.line_impedance),
            ("device_resistance_neutral", self.device_resistance_neutral),
            ("device_resistance_ionized", self.device_resistance_ionized),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.loaded_quality_factor > 1.0) {
            return Err(Error::domain(format!(
                "loaded_quality_factor must exceed 1, got {}",
                self.loaded_quality_factor
            )));
        }
        if self.device_resistance_neutral == self.device_resistance_ionized {
            return Err(Error::domain(
                "device resistances must differ between charge states",
            ));
        }
        Ok(())
    }

    /// Build a circuit whose reflection dip sits at `f_dip` with the
    /// requested loaded quality factor, perfectly matched in the
    /// neutral charge state.
    ///
    /// Matching through a series inductor requires R = L/(Z_0 C); the
    /// loaded Q of the matched dip is half the series Q of the
    /// matching network, which fixes all three elements.
    pub fn for_resonance(f_dip: f64, q_loaded: f64, z0: f64) -> Result<Self> {
        if !(f_dip > 0.0 && q_loaded > 1.0 && z0 > 0.0) {
            return Err(Error::domain(
                "for_resonance requires f_dip > 0, q_loaded > 1, z0 > 0",
            ));
        }
        let q_series = 2.0 * q_loaded;
        let omega = 2.0 * PI * f_dip;
        let r = z0 * (1.0 + q_series * q_series);
        let c = q_series / (r * omega);
        let l = z0 * q_series / omega;
        Ok(ResonatorParams {
            inductance: l,
            parasitic_capacitance: c,
            loaded_quality_factor: q_loaded,
            line_impedance: z0,
            device_resistance_neutral: r,
            // A small fractional change is enough to move the dip depth;
            // callers overwrite this for a specific sensor contrast.
            device_resistance_ionized: r * 1.02,
        })
    }

    /// Device resistance that perfectly matches the resonator to the
    /// line: R = L/(Z_0 C_p).
    pub fn matched_resistance(&self) -> f64 {
        self.inductance / (self.line_impedance * self.parasitic_capacitance)
    }

    /// Frequency at which the matched circuit reflects nothing.
    ///
    /// Solves Re{Z_in} = Z_0 and Im{Z_in} = 0 exactly for the series-L,
    /// parallel R‖C topology; lies slightly below 1/(2π√(LC)).
    pub fn match_frequency(&self) -> f64 {
        let r = self.matched_resistance();
        let q = (r / self.line_impedance - 1.0).sqrt();
        q / (2.0 * PI * r * self.parasitic_capacitance)
    }
}

/// Charge-sensor transfer: a shifted sech² conductance peak read out
/// at a fixed gate operating point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SensorTransfer {
    /// Gate voltage of the peak center for the neutral charge state (V).
    pub peak_center: f64,
    /// Peak width parameter w of sech²((V_g − V_peak)/w) (V).
    pub peak_width: f64,
    /// Peak amplitude: reflected level at the peak center (V).
    pub peak_amplitude: f64,
    /// Gate-axis shift of the peak when the trap ionizes (V).
    pub charge_shift: f64,
    /// Gate operating point V_m where traces are recorded (V).
    pub operating_point: f64,
}

/// Charge state of the trap next to the sensor dot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChargeState {
    /// Trap occupied, electrically neutral configuration (q0).
    Neutral,
    /// Trap has lost its electron (q+).
    Ionized,
}

impl SensorTransfer {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_width > 0.0) {
            return Err(Error::domain("peak_width must be positive"));
        }
        if !(self.peak_amplitude > 0.0) {
            return Err(Error::domain("peak_amplitude must be positive"));
        }
        Ok(())
    }

    /// Construct a transfer whose readout contrast at the operating
    /// point equals `contrast`, by solving for the charge shift.
    ///
    /// `operating_point` must sit on the rising flank (below the peak
    /// center) so that a positive shift moves the ionized peak away
    /// and lowers the ionized level.
    pub fn from_contrast(
        peak_center: f64,
        peak_width: f64,
        operating_point: f64,
        level_neutral: f64,
        contrast: f64,
    ) -> Result<Self> {
        if !(peak_width > 0.0) {
            return Err(Error::domain("peak_width must be positive"));
        }
        if !(operating_point < peak_center) {
            return Err(Error::domain(
                "operating point must sit below the peak center",
            ));
        }
        if !(contrast > 0.0 && contrast < level_neutral) {
            return Err(Error::domain(
                "need 0 < contrast < level_neutral at the operating point",
            ));
        }
        let u = (operating_point - peak_center) / peak_width;
        let amplitude = level_neutral / sech2(u);
        let target = (level_neutral - contrast) / amplitude;
        // sech²(x) = target on the monotone branch x < 0.
        let x = -asech(target.sqrt());
        let shift = (operating_point - peak_center) / peak_width - x;
        Ok(SensorTransfer {
            peak_center,
            peak_width,
            peak_amplitude: amplitude,
            charge_shift: shift * peak_width,
            operating_point,
        })
    }

    /// Reflected level at the operating point for the given charge state.
    pub fn level(&self, charge: ChargeState) -> f64 {
        sensor_level(charge, self.operating_point, self)
    }

    /// Readout contrast level(q0) − level(q+) at the operating point.
    pub fn contrast(&self) -> f64 {
        self.level(ChargeState::Neutral) - self.level(ChargeState::Ionized)
    }
}

fn sech2(x: f64) -> f64 {
    let c = x.cosh();
    1.0 / (c * c)
}

/// Inverse of sech on (0, 1]: asech(y) = ln((1 + √(1−y²))/y).
fn asech(y: f64) -> f64 {
    ((1.0 + (1.0 - y * y).sqrt()) / y).ln()
}

/// Resonant frequency of the bare LC tank, f_r = 1/(2π√(L C_p)).
pub fn resonant_frequency(p: &ResonatorParams) -> Result<f64> {
    if !(p.inductance > 0.0) || !(p.parasitic_capacitance > 0.0) {
        return Err(Error::domain("resonant_frequency requires L > 0 and C_p > 0"));
    }
    Ok(1.0 / (2.0 * PI * (p.inductance * p.parasitic_capacitance).sqrt()))
}

/// Resonator bandwidth B_r = f_r / Q_r.
pub fn resonator_bandwidth(f_r: f64, q_r: f64) -> Result<f64> {
    if !(f_r > 0.0 && q_r > 0.0) {
        return Err(Error::domain("resonator_bandwidth requires f_r > 0 and Q_r > 0"));
    }
    Ok(f_r / q_r)
}

/// Magnitude of the reflection coefficient at frequency `f` for a
/// device resistance `r_device`.
///
/// Z_in = jωL + (R ‖ 1/jωC_p), Γ = (Z_in − Z_0)/(Z_in + Z_0).
pub fn reflection_magnitude(f: f64, p: &ResonatorParams, r_device: f64) -> Result<f64> {
    if !(f > 0.0) {
        return Err(Error::domain("reflection_magnitude requires f > 0"));
    }
    if !(r_device >= 0.0) || !r_device.is_finite() {
        return Err(Error::domain("r_device must be finite and non-negative"));
    }
    let omega = 2.0 * PI * f;
    let z0 = Cplx::new(p.line_impedance, 0.0);
    // R ‖ (1/jωC) = R / (1 + jωRC)
    let denom = Cplx::new(1.0, omega * r_device * p.parasitic_capacitance);
    let tank = Cplx::new(r_device, 0.0).div(denom);
    let z_in = tank.add(Cplx::new(0.0, omega * p.inductance));
    let gamma = z_in.sub(z0).div(z_in.add(z0));
    Ok(gamma.abs())
}

/// Reflected level for a charge state at gate voltage `v_g`.
///
/// The ionized lineshape is the neutral one displaced by the charge
/// shift: level(q+, V_g) = level(q0, V_g − ΔV_shift).
pub fn sensor_level(charge: ChargeState, v_g: f64, s: &SensorTransfer) -> f64 {
    let center = match charge {
        ChargeState::Neutral => s.peak_center,
        ChargeState::Ionized => s.peak_center + s.charge_shift,
    };
    s.peak_amplitude * sech2((v_g - center) / s.peak_width)
}

/// Frequency sweep of |Γ| over `n` points, returned as (f, |Γ|) pairs.
pub fn reflection_sweep(
    p: &ResonatorParams,
    r_device: f64,
    f_start: f64,
    f_stop: f64,
    n: usize,
) -> Result<Vec<(f64, f64)>> {
    if !(f_start > 0.0 && f_stop > f_start) || n < 2 {
        return Err(Error::domain("invalid sweep range"));
    }
    let step = (f_stop - f_start) / (n - 1) as f64;
    (0..n)
        .map(|i| {
            let f = f_start + step * i as f64;
            reflection_magnitude(f, p, r_device).map(|g| (f, g))
        })
        .collect()
}
