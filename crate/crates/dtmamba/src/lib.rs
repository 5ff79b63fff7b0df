//! Twin-Mamba long-term time-series forecasting.
//!
//! Pipeline: reversible instance normalization over the lookback window,
//! channel-independence reshaping so every channel is its own sample, two
//! stacked TMamba blocks (embedding + residual FC + dropout + twin parallel
//! selective-SSM blocks), residual summation, and a linear projection to the
//! horizon, inverted back to the original scale.
//!
//! Everything runs on a small f64 reverse-mode autodiff engine ([`tensor`])
//! so that gradients are checkable against finite differences end to end.

pub mod dataset;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod ssm;
pub mod tensor;
pub mod tmamba;
pub mod train;

pub use error::DtError;
pub use tensor::{Tape, Tensor, TensorId};

/// Library-wide result type.
pub type Result<T> = std::result::Result<T, DtError>;
