//! Training, inference and evaluation toolkit for medical image segmentation.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod frontend;
pub mod inference;
pub mod inspection;
pub mod layer;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod preset;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
