//! Crate-wide error type.
//!
//! Every fallible operation reports which precondition it violated; the CLI
//! maps these onto exit code 2 with the message on stderr.

use thiserror::Error;

/// Errors raised by scene construction, synthesis, suppression and estimation.
#[derive(Debug, Error)]
pub enum Error {
    /// An angle left the supported [0, 180] degree domain.
    #[error("angle out of range: {name} = {value} deg (expected 0..=180)")]
    AngleOutOfRange { name: &'static str, value: f64 },

    /// A scalar parameter violated its documented domain.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Two scene elements coincide (or nearly so), making geometry underdetermined.
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    /// A path delay exceeds the cyclic prefix, breaking the per-symbol model.
    #[error("path delay {delay_us:.4} us exceeds the cyclic prefix {cp_us:.4} us")]
    DelayExceedsCyclicPrefix { delay_us: f64, cp_us: f64 },

    /// The operation needs at least one propagation path.
    #[error("scene contributes no propagation paths: {0}")]
    EmptyScene(String),

    /// Matrix/tensor dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A steering set is (numerically) rank deficient, e.g. duplicated DoAs.
    #[error("ill-conditioned steering set: {0}")]
    IllConditioned(String),

    /// Requested subspace or source count is impossible for the array size.
    #[error("invalid subspace split: {0}")]
    InvalidSubspace(String),

    /// Lookup outside the clutter-map grid.
    #[error("position out of map bounds: {0}")]
    OutOfBounds(String),

    /// Malformed persisted artifact (scene, map, tensor dump, ...).
    #[error("malformed {kind}: {detail}")]
    MalformedArtifact { kind: &'static str, detail: String },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// JSON (de)serialization failure.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
