use rand::Rng;

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{global_avg_pool, BatchNorm2d, Conv2d, ConvGeom, Mode};
use crate::tensor::{Element, Tensor};

/// Parallel 3×3 dilated branches plus a pooled branch, fused by 1×1 → BN → ReLU.
#[derive(Clone, Debug)]
pub struct Aspp<T> {
    pub branches: Vec<Conv2d<T>>,
    pub pool_proj: Conv2d<T>,
    pub fuse_proj: Conv2d<T>,
    pub fuse_bn: BatchNorm2d<T>,
    pub rates: Vec<usize>,
}

impl_module!(Aspp {
    branches,
    pool_proj,
    fuse_proj,
    fuse_bn
});

impl<T: Element> Aspp<T> {
    pub fn new(c_in: usize, c_out: usize, rates: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if rates.is_empty() || rates.contains(&0) {
            return Err(Error::Config(format!("dilation rates {rates:?} must be non-empty and positive")));
        }
        // biases ahead of batch norm would be dead weights
        let branches = rates
            .iter()
            .map(|&d| Conv2d::new(c_in, c_out, 3, ConvGeom::same(3, d), false, rng))
            .collect();
        Ok(Aspp {
            branches,
            pool_proj: Conv2d::new(c_in, c_out, 1, ConvGeom::UNIT, false, rng),
            fuse_proj: Conv2d::new((rates.len() + 1) * c_out, c_out, 1, ConvGeom::UNIT, false, rng),
            fuse_bn: BatchNorm2d::new(c_out),
            rates: rates.to_vec(),
        })
    }

    pub fn out_channels(&self) -> usize {
        self.fuse_proj.out_channels()
    }

    /// Branch outputs, pooled branch and their concatenation, before fusion.
    pub fn concat<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = x.shape();
        let mut parts = Vec::with_capacity(self.branches.len() + 1);
        for b in &self.branches {
            parts.push(b.forward(tape, x)?);
        }
        let pooled = self.pool_proj.forward(tape, global_avg_pool(x)?)?;
        let c = self.pool_proj.out_channels();
        parts.push(pooled.broadcast_to(&[s[0], c, s[2], s[3]])?);
        concat(&parts, 1)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let y = self.fuse_proj.forward(tape, self.concat(tape, x)?)?;
        Ok(self.fuse_bn.forward(tape, y, mode)?.relu())
    }
}

/// ASPP output gated by a sigmoid map computed from itself.
#[derive(Clone, Debug)]
pub struct AtrousAttention<T> {
    pub aspp: Aspp<T>,
    pub attn_proj: Conv2d<T>,
}

impl_module!(AtrousAttention { aspp, attn_proj });

/// Intermediate values of one atrous attention pass.
pub struct AttentionTrace<'t, T: Element> {
    pub aspp: Var<'t, T>,
    pub gate: Var<'t, T>,
    pub out: Var<'t, T>,
}

impl<T: Element> AtrousAttention<T> {
    /// Gate projection starts with zero bias.
    pub fn new(c_in: usize, c_out: usize, rates: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let aspp = Aspp::new(c_in, c_out, rates, rng)?;
        let mut attn_proj = Conv2d::new(c_out, 1, 1, ConvGeom::UNIT, true, rng);
        if let Some(b) = &mut attn_proj.bias {
            b.tensor = Tensor::zeros(vec![1]);
            b.tensor.requires_grad = true;
        }
        Ok(AtrousAttention { aspp, attn_proj })
    }

    pub fn trace<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<AttentionTrace<'t, T>> {
        let y = self.aspp.forward(tape, x, mode)?;
        let gate = self.attn_proj.forward(tape, y)?.sigmoid();
        let out = y.mul(gate)?;
        Ok(AttentionTrace { aspp: y, gate, out })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        Ok(self.trace(tape, x, mode)?.out)
    }
}
