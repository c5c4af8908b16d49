//! Part-based fine-grained classification with two interchangeable part
//! alignment mechanisms: correlation-matrix graph matching and a
//! self-attention aligner.

pub mod align;
pub mod error;
pub mod geom;
pub mod harness;
pub mod losses;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
