//! Error type shared by every module in this crate.

use thiserror::Error;

/// Unified error for key derivation, network plumbing, training, and attacks.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or parameter combination (bad N/m pair, split
    /// fractions out of range, missing fields, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A value fell outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shape or wiring mismatch between network pieces.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite value produced during numerics; `layer` names the layer
    /// being evaluated when the value appeared.
    #[error("numerical error at layer {layer}: {message}")]
    Numerical { layer: usize, message: String },

    /// Malformed serialized artifact (model file, dataset file, CSV row).
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    /// Operation invoked before its prerequisites were established.
    #[error("state error: {0}")]
    State(String),

    /// Training loop diverged or produced a non-finite loss.
    #[error("training error: {0}")]
    Training(String),

    /// Attack driver failed (propagated training/structural faults).
    #[error("attack error: {0}")]
    Attack(String),

    /// The verification branch could not be assembled at all. Distinct from
    /// a *failed* test, which is a successful run with `passed = false`.
    #[error("verification error: {0}")]
    Verification(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
