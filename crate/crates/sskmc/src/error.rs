use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or invalid run configuration, parameter file, or preset.
    #[error("configuration error: {0}")]
    Config(String),

    /// A least-squares fit could not be carried out or did not converge.
    #[error("fit error: {0}")]
    Fit(String),

    /// The two equation-of-state branches are identical; the double-tangent
    /// system has no isolated solution.
    #[error("degenerate system: {0}")]
    Degenerate(String),

    /// A checkpoint, manifest, or data file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
