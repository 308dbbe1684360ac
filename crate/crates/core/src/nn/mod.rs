//! Layers and differentiable building blocks.

mod attention;
mod conv;
mod linear;
mod norm;
pub mod param;
mod resize;

pub use attention::{scaled_dot_attention, MultiHeadAttention};
pub use conv::{conv2d, conv_transpose2d, Conv2d, ConvGeom, ConvTranspose2d};
pub use linear::Linear;
pub use norm::{batch_norm2d, layer_norm, BatchNorm2d, BnOutput, BnStats, LayerNorm, BN_EPS, BN_MOMENTUM, LN_EPS};
pub use param::{Mode, Module, Param, ParamId, ParamKind};
pub use resize::{bilinear_resize, bilinear_taps, global_avg_pool};
