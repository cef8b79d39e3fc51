//! Counterfactual patching for multi-label classification on synthetic
//! glyph scenes: data generation, models, training, fused inference,
//! evaluation and a small discrete causal model checker.

pub mod causal;
pub mod checkpoint;
pub mod error;
pub mod kv;
pub mod losses;
pub mod metrics;
pub mod numcore;
pub mod patching;
pub mod rng;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
