//! Paragraph-level joint rationale selection and stance prediction for
//! scientific claim verification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the bottom of this module fix the precision for common use.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod retrieval;
pub mod scalar;
pub mod selftest;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type JointModelF32 = model::JointModel<f32>;
pub type JointModelF64 = model::JointModel<f64>;
pub type TapeF32 = tape::Tape<f32>;
pub type TapeF64 = tape::Tape<f64>;
