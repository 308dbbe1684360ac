//! Synthetic vessel slices, CT-style preprocessing and sample shards.

mod preprocess;
mod shard;
mod synth;

pub use preprocess::{
    label_components, perturb_bbox, remove_small_objects, tight_bbox, to_model_input, window_normalize,
    WindowSpec, PERTURB_RETRIES,
};
pub use shard::{read_shard, write_shard, ShardEntry, ShardIndex, INDEX, SHARD_SCHEMA};
pub use synth::{generate_raw, generate_sample, generate_samples, SegSample, SynthConfig};
