//! Bottom-up visual relationship detection over a language-defined label
//! space. Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision.

pub mod augment;
pub mod autodiff;
pub mod datagen;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod image;
pub mod infer;
pub mod language;
pub mod matchloss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod reldecoder;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};

pub type Matrix32 = tensor::Matrix<f32>;
pub type Matrix64 = tensor::Matrix<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type Checkpoint32 = pipeline::Checkpoint<f32>;
pub type Checkpoint64 = pipeline::Checkpoint<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
