//! Parameter-efficient fine-tuning of a tokenized encoder-decoder forecaster
//! on vital-sign series.

pub mod adapters;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
