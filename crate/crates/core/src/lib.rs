//! Strip-attention dehazing toolkit.
//!
//! A small dense-tensor engine with reverse-mode differentiation, the
//! parallel cross strip attention blocks built on top of it, a three-scale
//! encoder-decoder dehazing network, losses and image-quality metrics,
//! synthetic haze data generation, and a deterministic trainer with binary
//! checkpoints.
//!
//! Everything is generic over the element type: `f32` for training and
//! inference, `f64` for gradient-check builds where finite differences
//! need the extra precision.

pub mod attention;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, TapeOp, TensorId};
pub use tensor::Tensor;
