//! Frozen mini ViT, box prompt encoder and mask decoder.

mod checkpoint;
mod config;
mod decoder;
mod encoder;
mod prompt;
mod segmenter;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, ParamEntry};
pub use config::{AdapterConfig, DecoderConfig, ModelConfig, Target};
pub use decoder::{MaskDecoder, Mlp, TwoWayLayer};
pub use encoder::{EncoderBlock, ImageEncoder, Projection};
pub use prompt::{BBox, PromptEncoder};
pub use segmenter::{component_rng, ComponentCount, Segmenter};
