use rand::Rng;

use super::param::{impl_module, Module, Param};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Affine map over the last axis; weight is `[out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl_module!(Linear { weight, bias });

impl<T: Element> Linear<T> {
    /// Trainable, uniform in `±1/√in`.
    pub fn new(c_in: usize, c_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (c_in as f64).sqrt();
        Linear {
            weight: Param::trainable(Tensor::uniform(vec![c_out, c_in], scale, rng)),
            bias: bias.then(|| Param::trainable(Tensor::uniform(vec![c_out], scale, rng))),
        }
    }

    pub fn frozen(mut self) -> Self {
        self.set_trainable(false);
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.as_ref().map(|p| tape.param(p));
        x.linear(tape.param(&self.weight), b)
    }
}
