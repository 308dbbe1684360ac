use rand::Rng;

use super::config::{AdapterConfig, ModelConfig, Target};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::{impl_module, join};
use crate::nn::{scaled_dot_attention, LayerNorm, Linear, Mode, Module, Param};
use crate::peft::AtrousLoraAdapter;
use crate::tensor::{Element, Tensor};

/// A frozen projection, optionally wrapped by an adapter.
#[derive(Clone, Debug)]
pub enum Projection<T> {
    Frozen(Linear<T>),
    Adapted(AtrousLoraAdapter<T>),
}

impl<T: Element> Module<T> for Projection<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Param<T>)) {
        match self {
            Projection::Frozen(l) => l.visit(prefix, f),
            Projection::Adapted(a) => a.visit(prefix, f),
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Projection::Frozen(l) => l.visit_mut(prefix, f),
            Projection::Adapted(a) => a.visit_mut(prefix, f),
        }
    }
}

impl<T: Element> Projection<T> {
    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        match self {
            Projection::Frozen(l) => l.forward(tape, x),
            Projection::Adapted(a) => a.forward(tape, x, mode),
        }
    }

    pub fn adapter(&self) -> Option<&AtrousLoraAdapter<T>> {
        match self {
            Projection::Adapted(a) => Some(a),
            Projection::Frozen(_) => None,
        }
    }

    pub fn adapter_mut(&mut self) -> Option<&mut AtrousLoraAdapter<T>> {
        match self {
            Projection::Adapted(a) => Some(a),
            Projection::Frozen(_) => None,
        }
    }

    fn strip(&self) -> Self {
        match self {
            Projection::Frozen(l) => Projection::Frozen(l.clone()),
            Projection::Adapted(a) => Projection::Frozen(a.base.clone()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock<T> {
    pub norm1: LayerNorm<T>,
    pub q: Projection<T>,
    pub k: Projection<T>,
    pub v: Projection<T>,
    pub proj: Projection<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub heads: usize,
}

impl_module!(EncoderBlock {
    norm1,
    q,
    k,
    v,
    proj,
    norm2,
    fc1,
    fc2
});

impl<T: Element> EncoderBlock<T> {
    pub fn projections(&self) -> [(Target, &Projection<T>); 4] {
        [
            (Target::Q, &self.q),
            (Target::K, &self.k),
            (Target::V, &self.v),
            (Target::Proj, &self.proj),
        ]
    }

    pub fn projections_mut(&mut self) -> [(Target, &mut Projection<T>); 4] {
        [
            (Target::Q, &mut self.q),
            (Target::K, &mut self.k),
            (Target::V, &mut self.v),
            (Target::Proj, &mut self.proj),
        ]
    }

    fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let s = x.shape();
        let (b, n, d) = (s[0], s[1], s[2]);
        let hd = d / self.heads;
        let split = |v: Var<'t, T>| -> Result<Var<'t, T>> {
            v.reshape(&[b, n, self.heads, hd])?.permute(&[0, 2, 1, 3])
        };
        let h = self.norm1.forward(tape, x)?;
        let q = split(self.q.forward(tape, h, mode)?)?;
        let k = split(self.k.forward(tape, h, mode)?)?;
        let v = split(self.v.forward(tape, h, mode)?)?;
        let a = scaled_dot_attention(q, k, v)?.permute(&[0, 2, 1, 3])?.reshape(&[b, n, d])?;
        let x = x.add(self.proj.forward(tape, a, mode)?)?;
        let h = self.norm2.forward(tape, x)?;
        let m = self.fc2.forward(tape, self.fc1.forward(tape, h)?.gelu())?;
        x.add(m)
    }
}

/// Patch embedding, positional embedding, pre-norm transformer blocks and a
/// final norm. Every weight outside the adapters is frozen.
#[derive(Clone, Debug)]
pub struct ImageEncoder<T> {
    pub patch_embed: Linear<T>,
    pub pos_embed: Param<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub neck: LayerNorm<T>,
    pub patch_size: usize,
    pub grid: usize,
}

impl_module!(ImageEncoder {
    patch_embed,
    pos_embed,
    blocks,
    neck
});

fn frozen_norm<T: Element>(d: usize) -> LayerNorm<T> {
    let mut n = LayerNorm::new(d);
    n.set_trainable(false);
    n
}

impl<T: Element> ImageEncoder<T> {
    /// Random frozen backbone without adapters.
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, p) = (cfg.embed_dim, cfg.patch_size);
        let patch_embed = Linear::new(3 * p * p, d, true, rng).frozen();
        let pos_embed = Param::frozen(Tensor::randn(vec![1, cfg.tokens(), d], 0.02, rng));
        let blocks = (0..cfg.depth)
            .map(|_| {
                let mut lin = |i, o| Linear::new(i, o, true, rng).frozen();
                EncoderBlock {
                    norm1: frozen_norm(d),
                    q: Projection::Frozen(lin(d, d)),
                    k: Projection::Frozen(lin(d, d)),
                    v: Projection::Frozen(lin(d, d)),
                    proj: Projection::Frozen(lin(d, d)),
                    norm2: frozen_norm(d),
                    fc1: lin(d, cfg.mlp_hidden()),
                    fc2: lin(cfg.mlp_hidden(), d),
                    heads: cfg.heads,
                }
            })
            .collect();
        ImageEncoder {
            patch_embed,
            pos_embed,
            blocks,
            neck: frozen_norm(d),
            patch_size: p,
            grid: cfg.grid(),
        }
    }

    /// Wraps the configured projections with fresh adapters.
    pub fn attach_adapters(&mut self, cfg: &AdapterConfig, rng: &mut impl Rng) -> Result<()> {
        let grid = (self.grid, self.grid);
        let rates = cfg.attention.then_some(cfg.rates.as_slice());
        for (bi, block) in self.blocks.iter_mut().enumerate() {
            for (target, slot) in block.projections_mut() {
                if !cfg.applies(bi, target) {
                    continue;
                }
                let base = match slot {
                    Projection::Frozen(l) => l.clone(),
                    Projection::Adapted(_) => {
                        return Err(Error::Config(format!("block {bi} {target:?} already adapted")))
                    }
                };
                *slot = Projection::Adapted(AtrousLoraAdapter::new(base, cfg.rank, rates, grid, rng)?);
            }
        }
        Ok(())
    }

    /// Same backbone with every adapter removed.
    pub fn without_adapters(&self) -> Self {
        let mut out = self.clone();
        for block in &mut out.blocks {
            for (_, slot) in block.projections_mut() {
                *slot = slot.strip();
            }
        }
        out
    }

    pub fn adapters(&self) -> Vec<(String, &AtrousLoraAdapter<T>)> {
        let mut out = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            for (target, slot) in block.projections() {
                if let Some(a) = slot.adapter() {
                    out.push((join(&format!("blocks.{bi}"), &format!("{target:?}").to_lowercase()), a));
                }
            }
        }
        out
    }

    /// `[B, 3, S, S]` to `[B, N, 3·p²]`, each row one patch in (c, dy, dx) order.
    pub fn patchify<'t>(&self, img: Var<'t, T>) -> Result<Var<'t, T>> {
        let s = img.shape();
        let (p, g) = (self.patch_size, self.grid);
        if s.len() != 4 || s[1] != 3 || s[2] != g * p || s[3] != g * p {
            return Err(Error::shape(
                "encode_image",
                format!("expected [B, 3, {0}, {0}], got {s:?}", g * p),
            ));
        }
        img.reshape(&[s[0], 3, g, p, g, p])?
            .permute(&[0, 2, 4, 1, 3, 5])?
            .reshape(&[s[0], g * g, 3 * p * p])
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, img: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let tokens = self.patchify(img)?;
        let mut x = self.patch_embed.forward(tape, tokens)?.add(tape.param(&self.pos_embed))?;
        for block in &self.blocks {
            x = block.forward(tape, x, mode)?;
        }
        self.neck.forward(tape, x)
    }
}
