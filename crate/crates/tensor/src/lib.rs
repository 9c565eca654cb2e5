//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Just enough machinery for small vision and language transformers:
//! matrix products, elementwise maps, patch projection, layer norm,
//! softmax, GELU, embedding lookup and cross-entropy, plus plain SGD over
//! freezable parameter groups and a binary checkpoint format.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
mod linalg;
mod ops;
pub mod param;
mod tensor;

pub use checkpoint::ModelCheckpoint;
pub use error::{Result, TensorError};
pub use ops::LAYER_NORM_EPS;
pub use param::{clip_grad_norm, sgd_step, ParamGroup};
pub use tensor::Tensor;
