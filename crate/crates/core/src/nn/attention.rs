use rand::Rng;

use super::linear::Linear;
use super::param::impl_module;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// `softmax(q·kᵀ/√d)·v` over the last two axes.
pub fn scaled_dot_attention<'t, T: Element>(
    q: Var<'t, T>,
    k: Var<'t, T>,
    v: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let d = *q.shape().last().ok_or_else(|| Error::shape("attention", "scalar query"))?;
    let r = k.rank_sub_2()?;
    let scores = q.matmul(k.transpose(r, r + 1)?)?.scale(T::from_f64(1.0 / (d as f64).sqrt()));
    scores.softmax_last().matmul(v)
}

impl<'t, T: Element> Var<'t, T> {
    fn rank_sub_2(&self) -> Result<usize> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::shape("attention", format!("rank {r} operand")));
        }
        Ok(r - 2)
    }
}

/// Multi-head attention with projections to an internal width.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T> {
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
}

impl_module!(MultiHeadAttention { q, k, v, out });

impl<T: Element> MultiHeadAttention<T> {
    pub fn new(dim: usize, inner: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || inner % heads != 0 {
            return Err(Error::Config(format!("{inner} channels do not split into {heads} heads")));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(dim, inner, true, rng),
            k: Linear::new(dim, inner, false, rng),
            v: Linear::new(dim, inner, true, rng),
            out: Linear::new(inner, dim, true, rng),
            heads,
        })
    }

    fn split<'t>(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, n, c) = (s[0], s[1], s[2]);
        x.reshape(&[b, n, self.heads, c / self.heads])?.permute(&[0, 2, 1, 3])
    }

    /// `q: [B, Nq, D]`, `k, v: [B, Nk, D]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        q: Var<'t, T>,
        k: Var<'t, T>,
        v: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let qs = q.shape();
        if qs.len() != 3 {
            return Err(Error::shape("attention", format!("expected [B, N, D], got {qs:?}")));
        }
        let qh = self.split(self.q.forward(tape, q)?)?;
        let kh = self.split(self.k.forward(tape, k)?)?;
        let vh = self.split(self.v.forward(tape, v)?)?;
        let o = scaled_dot_attention(qh, kh, vh)?.permute(&[0, 2, 1, 3])?;
        let inner = self.q.out_features();
        self.out.forward(tape, o.reshape(&[qs[0], qs[1], inner])?)
    }
}
