//! Minimal CPU neural-network toolkit used by the segmentation and refinement
//! networks.
//!
//! Everything runs single-threaded in `f64` so that training is bit-for-bit
//! reproducible for a fixed seed and finite-difference gradient checks are
//! meaningful. Feature maps are single-sample `[channels, height, width]`
//! tensors; mini-batches are formed by accumulating gradients.

pub mod archive;
pub mod conv;
pub mod error;
mod gemm;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod param;
pub mod tensor;

pub use conv::Conv2d;
pub use error::NnError;
pub use optim::{Adam, CosineSchedule};
pub use param::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Scalar type used by every tensor.
pub type Real = f64;
