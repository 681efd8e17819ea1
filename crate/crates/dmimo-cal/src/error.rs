//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    /// Operand shapes do not line up; the message names the offending operand.
    #[error("dimension mismatch in {context}: {detail}")]
    DimensionMismatch { context: &'static str, detail: String },

    /// An argument value is outside the operation's domain.
    #[error("invalid input to {context}: {detail}")]
    InvalidInput { context: &'static str, detail: String },

    /// A vector that must be first-element normalized has a vanishing first element.
    #[error("normalization failure in {context}: |first element| = {magnitude:.3e} below threshold")]
    NormalizationFailure { context: &'static str, magnitude: f64 },

    /// The scalar pilot channel collapsed; observations carry no signal.
    #[error("degenerate channel: observation norm {norm:.3e} below 1e-10")]
    DegenerateChannel { norm: f64 },

    /// A beamformer matrix that must be inverted is numerically unusable.
    #[error("ill-conditioned {what}: condition number {cond:.3e} exceeds {limit:.1e}")]
    IllConditioned { what: &'static str, cond: f64, limit: f64 },

    /// Effective channel matrix cannot support zero-forcing for the requested users.
    #[error("rank-deficient precoding input: {detail}")]
    RankDeficient { detail: String },

    /// The reverse pilot of the inter-AP exchange vanished relative to the forward one.
    #[error("degenerate inter-AP ratio: |reverse| = {reverse:.3e} < 1e-12 |forward| = {forward:.3e}")]
    DegenerateRatio { forward: f64, reverse: f64 },

    /// A calibration ratio used for a tandem transform is exactly zero.
    #[error("zero alpha entry at index {index}; tandem transform undefined")]
    ZeroAlphaEntry { index: usize },

    /// Random phase perturbation failed to reach an acceptable condition number.
    #[error("perturbation failed: condition number above {limit:.1e} after {attempts} attempts; try a larger epsilon")]
    PerturbationFailed { attempts: usize, limit: f64 },

    /// Configuration file or field rejected.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A per-trial failure, tagged with the trial that hit it.
    #[error("trial {index}: {source}")]
    Trial { index: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
