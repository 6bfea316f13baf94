//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every differentiable value is a [`Var`] recorded on a [`Graph`]. The
//! primitive set is deliberately small: convolution, matrix products,
//! broadcasting arithmetic, pointwise nonlinearities, softmax, bilinear
//! resampling, concatenation/slicing/transposition, reductions and layer
//! normalisation. Attention is composed from these. Custom operations, such
//! as the splatting renderer, plug in through [`Graph::record`].

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ops;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{Result, TensorError};
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use ops::attention::attention_block;
pub use ops::elementwise::{sigmoid, softplus};
pub use ops::resample::{bilinear_taps, Taps};
pub use params::{ParamStore, Session};
pub use tensor::Tensor;
