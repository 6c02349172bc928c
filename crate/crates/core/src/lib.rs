//! Cross-modal metric learning for sketch-to-shape retrieval.
//!
//! Two encoders map sketches and 3D shapes (as pooled multi-view features)
//! into a shared embedding space. A transformation network, trained with
//! an adversarial term, a class-mean alignment term and a semantic
//! preservation term, then carries sketch embeddings onto the shape
//! manifold. Retrieval ranks shapes by Euclidean distance to a
//! transformed sketch.

pub mod autodiff;
pub mod batching;
pub mod config;
mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{DcaError, Result};
