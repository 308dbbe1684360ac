//! Tape-based reverse-mode automatic differentiation.

pub mod gradcheck;
mod linalg;
mod ops;
mod tape;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use ops::{broadcast_shape, concat, sigmoid};
pub use tape::{Tape, Var};
