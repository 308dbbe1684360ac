use serde::Serialize;

use crate::nn::{Module, ParamKind};
use crate::tensor::Element;

/// Scalar parameter counts; buffers are not parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub trainable: usize,
    pub ratio: f64,
}

impl ParamCount {
    pub fn new(total: usize, trainable: usize) -> Self {
        let ratio = if total == 0 { 0.0 } else { trainable as f64 / total as f64 };
        ParamCount { total, trainable, ratio }
    }

    pub fn merge(self, other: ParamCount) -> Self {
        ParamCount::new(self.total + other.total, self.trainable + other.trainable)
    }
}

pub fn count_parameters<T: Element, M: Module<T> + ?Sized>(m: &M) -> ParamCount {
    let (mut total, mut trainable) = (0, 0);
    m.visit("", &mut |_, p| match p.kind() {
        ParamKind::Buffer => {}
        ParamKind::Frozen => total += p.tensor.numel(),
        ParamKind::Trainable => {
            total += p.tensor.numel();
            trainable += p.tensor.numel();
        }
    });
    ParamCount::new(total, trainable)
}
