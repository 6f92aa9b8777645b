//! Reverse-mode automatic differentiation over dense NCHW arrays.
//!
//! The engine covers what small convolutional generators and discriminators
//! need: broadcasting arithmetic, pointwise nonlinearities, reductions,
//! GEMM-backed convolution and matrix products, and 2x resampling. It is
//! generic over `f32` (training) and `f64` (gradient checking).

mod array;
mod element;
pub mod gradcheck;
pub mod kernels;
pub mod optim;
mod params;
mod tape;

pub use array::{broadcast_shape, broadcast_to, broadcast_zip, numel, sum_to_shape, Array};
pub use element::Element;
pub use optim::{Adam, AdamConfig};
pub use params::ParamStore;
pub use tape::{sigmoid, softplus, Gradients, Tape, Var};
