use rand::Rng;

use super::aam::AtrousAttention;
use super::lora::LoraAdapter;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{Linear, Mode};
use crate::tensor::Element;

/// Frozen projection plus a low-rank update whose bottleneck runs through
/// atrous attention on the token grid.
#[derive(Clone, Debug)]
pub struct AtrousLoraAdapter<T> {
    pub base: Linear<T>,
    pub lora: LoraAdapter<T>,
    /// `None` passes the bottleneck through unchanged.
    pub attention: Option<AtrousAttention<T>>,
    pub grid: (usize, usize),
}

impl_module!(AtrousLoraAdapter {
    base,
    lora,
    attention
});

impl<T: Element> AtrousLoraAdapter<T> {
    /// Wraps `base` (which is frozen here).
    pub fn new(
        base: Linear<T>,
        rank: usize,
        rates: Option<&[usize]>,
        grid: (usize, usize),
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let base = base.frozen();
        let lora = LoraAdapter::new(base.in_features(), base.out_features(), rank, rng)?;
        let attention = match rates {
            Some(r) => Some(AtrousAttention::new(rank, rank, r, rng)?),
            None => None,
        };
        Ok(AtrousLoraAdapter {
            base,
            lora,
            attention,
            grid,
        })
    }

    pub fn rank(&self) -> usize {
        self.lora.rank()
    }

    /// `x: [B, N, C_in]` with `N = H_p·W_p`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (hp, wp) = self.grid;
        if s.len() != 3 || s[1] != hp * wp {
            return Err(Error::shape(
                "atrous_lora",
                format!("{s:?} tokens do not map to a {hp}x{wp} grid (N must equal {})", hp * wp),
            ));
        }
        let (b, n, r) = (s[0], s[1], self.rank());
        let y = self.base.forward(tape, x)?;
        let h = self.lora.down(tape, x)?;
        let g = match &self.attention {
            Some(att) => {
                let map = h.reshape(&[b, hp, wp, r])?.permute(&[0, 3, 1, 2])?;
                att.forward(tape, map, mode)?.permute(&[0, 2, 3, 1])?.reshape(&[b, n, r])?
            }
            None => h,
        };
        y.add(self.lora.up(tape, g)?)
    }
}
