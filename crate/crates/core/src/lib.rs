//! Handwritten math expression recognition with a shared convolutional
//! encoder, multi-scale coverage attention and two inverse-direction GRU
//! decoders trained by mutual distillation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks); the aliases below pin the common instantiations.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{Checkpoint, Progress};
pub use config::{ModelConfig, TrainConfig, Variant};
pub use error::{Error, Result};
pub use model::{Model, Model32, Model64, ObjectiveSettings};
pub use params::{Init, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tensor::{Gradients, Tape, Tensor, Var};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
