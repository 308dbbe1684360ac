//! Segmentation losses and evaluation metrics.

mod loss;
mod mask;
mod overlap;

pub use loss::{bce_loss, combined_loss, dice_loss, DICE_SMOOTH, LOG_EPS};
pub use mask::{binarize, Mask};
pub use overlap::{dsc, hausdorff, squared_distance_map, Hausdorff};
