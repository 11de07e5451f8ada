pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod ethogram;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod lora;
pub mod matrix;
pub mod model;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

/// Training precision.
pub type DualEncoder32 = model::DualEncoder<f32>;
/// Evaluation, gradient checks and serving.
pub type DualEncoder64 = model::DualEncoder<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
