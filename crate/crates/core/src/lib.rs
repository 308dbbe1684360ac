//! Frozen mini ViT segmenter with atrous low-rank adapters, trained on CPU.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod peft;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
