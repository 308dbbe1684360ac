use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{Linear, Param};
use crate::tensor::{Element, Tensor};

/// Trainable low-rank pair: `w_a: [r, C_in]`, `w_b: [C_out, r]`.
#[derive(Clone, Debug)]
pub struct LoraAdapter<T> {
    pub w_a: Param<T>,
    pub w_b: Param<T>,
}

impl_module!(LoraAdapter { w_a, w_b });

pub(crate) fn check_rank(rank: usize, c_in: usize, c_out: usize) -> Result<()> {
    if rank == 0 || rank >= c_in.min(c_out) {
        return Err(Error::Config(format!(
            "lora rank {rank} must satisfy 1 <= r < min({c_in}, {c_out})"
        )));
    }
    Ok(())
}

impl<T: Element> LoraAdapter<T> {
    /// `w_a` uniform in `±1/√C_in`, `w_b` zero.
    pub fn new(c_in: usize, c_out: usize, rank: usize, rng: &mut impl Rng) -> Result<Self> {
        check_rank(rank, c_in, c_out)?;
        Ok(LoraAdapter {
            w_a: Param::trainable(Tensor::uniform(vec![rank, c_in], 1.0 / (c_in as f64).sqrt(), rng)),
            w_b: Param::trainable(Tensor::zeros(vec![c_out, rank])),
        })
    }

    pub fn rank(&self) -> usize {
        self.w_a.tensor.shape()[0]
    }

    /// `x·W_aᵀ`, shape `[.., r]`.
    pub fn down<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(tape.param(&self.w_a), None)
    }

    /// `h·W_bᵀ`, shape `[.., C_out]`.
    pub fn up<'t>(&self, tape: &'t Tape<T>, h: Var<'t, T>) -> Result<Var<'t, T>> {
        h.linear(tape.param(&self.w_b), None)
    }
}

/// `x·W_Oᵀ + (x·W_aᵀ)·W_bᵀ`.
pub fn lora_forward<'t, T: Element>(
    tape: &'t Tape<T>,
    x: Var<'t, T>,
    base: &Linear<T>,
    a: &LoraAdapter<T>,
) -> Result<Var<'t, T>> {
    if base.in_features() != a.w_a.tensor.shape()[1] || base.out_features() != a.w_b.tensor.shape()[0] {
        return Err(Error::Config(format!(
            "adapter {:?}/{:?} does not fit base {:?}",
            a.w_a.tensor.shape(),
            a.w_b.tensor.shape(),
            base.weight.tensor.shape()
        )));
    }
    let y = base.forward(tape, x)?;
    let delta = a.up(tape, a.down(tape, x)?)?;
    y.add(delta)
}
