//! Error taxonomy shared by the library and the CLI.
//!
//! The variants map onto the process exit codes used by the binary:
//! configuration/contract problems are usage-class (1), dataset and file
//! problems are data-class (2), and non-finite numerics are their own
//! class (3) so that divergence is distinguishable from bad input.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtError {
    /// Shape or layout violation: mismatched dimensions, wrong layout tag,
    /// non-scalar loss, and similar contract breaches.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid configuration: widths that do not line up, zero conv width,
    /// unknown variant, checkpoint/dataset disagreement.
    #[error("config error: {0}")]
    Config(String),

    /// Dataset and file problems: unreadable files, malformed CSV cells,
    /// non-monotone timestamps, series too short for the requested windows.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite values produced or encountered where finite ones are
    /// required: NaN/Inf in a forward op, diverged training loss.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl DtError {
    /// Exit code the CLI uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DtError::Shape(_) | DtError::Config(_) => 1,
            DtError::Data(_) | DtError::Io(_) => 2,
            DtError::Numeric(_) => 3,
        }
    }
}
