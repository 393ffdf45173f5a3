//! Minimal dense-tensor numeric core: row-major `f64` tensors, a reverse-mode
//! tape with the operations a small transformer needs, Adam, and a
//! finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckOptions, GradCheckReport};
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{AttnSegment, AttnSpec, SparseRows, Tape, Var};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout. Small enough that normalized rows have
/// unit variance to ~1e-10 for any row with non-negligible spread.
pub const LAYER_NORM_EPS: f64 = 1e-10;
