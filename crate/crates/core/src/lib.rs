//! Simulation and analysis toolkit for RF-reflectometry readout of
//! single-ion photoionization events.
//!
//! The crate models the full measurement chain of a charge-sensed
//! photoionization experiment:
//!
//! 1. [`circuit`] — lumped-element resonator and the charge-sensor
//!    transfer function that maps a trap charge state to a reflected
//!    RF amplitude.
//! 2. [`dynamics`] — continuous-time stochastic state machine of the
//!    (ion, trap) system: laser-driven excitation, relaxation with an
//!    ionizing branch, background ionization and trap reset.
//! 3. [`signal`] — conversion of an event timeline into sampled,
//!    noisy, low-pass-filtered I/Q readout traces, including the
//!    laser-induced transient artifact and a bandwidth-limited DC
//!    comparison channel.
//! 4. [`detect`] — event finding on traces and model-based fitting of
//!    ionization times.
//! 5. [`estimate`] — population-level estimators: background
//!    thresholds, excited-state lifetime fits, SNR scaling and
//!    detection-fidelity curves.
//! 6. [`harness`] — configuration, seeded Monte Carlo campaigns and
//!    figure-reproduction pipelines, exposed through the `photoion`
//!    CLI.
//!
//! All stochastic operations are deterministic given a seed; the
//! harness fans a master seed out to per-cycle streams so that runs
//! are reproducible byte-for-byte and independent of thread count.

pub mod circuit;
pub mod detect;
pub mod dynamics;
pub mod estimate;
pub mod harness;
pub mod signal;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A physical parameter or argument is outside its valid domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration is internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An estimator received too little data to produce a result.
    #[error("too few events: have {have}, need {need}")]
    TooFewEvents { have: usize, need: usize },

    /// A fit failed to converge or the problem was degenerate.
    #[error("fit error: {0}")]
    Fit(String),

    /// I/O failure, tagged with the pipeline stage that hit it.
    #[error("{stage}: {source}")]
    Io {
        stage: String,
        #[source]
        source: std::io::Error,
    },

    /// A file had an unexpected format.
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(stage: &str, source: std::io::Error) -> Self {
        Error::Io {
            stage: stage.to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
