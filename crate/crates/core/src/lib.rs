//! Training and evaluation engine for session-aware sequential
//! recommendation.

pub mod autodiff;
pub mod batching;
pub mod config;
pub mod dataprep;
pub mod error;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
