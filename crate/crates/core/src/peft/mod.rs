//! Low-rank adapters and the atrous attention bottleneck.

mod aam;
mod adapter;
mod count;
mod lora;

pub use aam::{Aspp, AtrousAttention, AttentionTrace};
pub use adapter::AtrousLoraAdapter;
pub use count::{count_parameters, ParamCount};
pub use lora::{lora_forward, LoraAdapter};
