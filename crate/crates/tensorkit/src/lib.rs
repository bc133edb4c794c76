//! Minimal differentiable tensor engine for volumetric segmentation networks.
//!
//! Tensors are dense `(N, C, D, H, W)` arrays of `f32` with `W` varying
//! fastest. Every operation comes as a forward kernel plus an analytic
//! backward kernel; [`layers`] wraps the kernels into stateful layers that
//! cache what their backward pass needs. There is no general autodiff
//! graph: networks wire the backward passes of their layers by hand.
//!
//! Reductions are accumulated in a fixed order (in `f64` where it matters)
//! so forward and backward passes are bit-reproducible regardless of the
//! rayon worker count.

pub mod activation;
pub mod adam;
pub mod checkpoint;
pub mod conv;
mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod norm;
mod param;
pub mod pool;
pub mod resize;
mod tensor;

pub use adam::Adam;
pub use error::TensorError;
pub use layers::{Layer, LayerKind, LayerSpec, Mode, Module};
pub use param::Parameter;
pub use tensor::{concat_channels, split_channels, stack_batch, Tensor};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
