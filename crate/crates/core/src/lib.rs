//! Query-conditioned routing of multimodal queries to specialist tools.
//!
//! The selector scores every tool of a sampled panel with an attentive neural
//! process conditioned on the tool's reference set, and is trained with a
//! cost-sensitive comp-sum surrogate of the selection loss.

pub mod baselines;
pub mod checkpoint;
pub mod diffcore;
pub mod domain;
pub mod evalharness;
mod error;
pub mod io;
pub mod objective;
pub mod selector;
pub mod simworld;
pub mod trainer;

pub use error::{Error, Result};
