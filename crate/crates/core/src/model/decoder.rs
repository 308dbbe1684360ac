use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::{bilinear_resize, ConvGeom, ConvTranspose2d, LayerNorm, Linear, MultiHeadAttention, Param};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl_module!(Mlp { layers });

impl<T: Element> Mlp<T> {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Linear::new(w[0], w[1], true, rng)).collect(),
        }
    }

    /// ReLU between layers, none after the last.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, x)?;
            if i + 1 < self.layers.len() {
                x = x.relu();
            }
        }
        Ok(x)
    }
}

/// One layer of the two-way transformer: token self-attention, token→image
/// cross-attention, token MLP, image→token cross-attention.
#[derive(Clone, Debug)]
pub struct TwoWayLayer<T> {
    pub self_attn: MultiHeadAttention<T>,
    pub norm1: LayerNorm<T>,
    pub cross_t2i: MultiHeadAttention<T>,
    pub norm2: LayerNorm<T>,
    pub mlp: Mlp<T>,
    pub norm3: LayerNorm<T>,
    pub cross_i2t: MultiHeadAttention<T>,
    pub norm4: LayerNorm<T>,
    pub first: bool,
}

impl_module!(TwoWayLayer {
    self_attn,
    norm1,
    cross_t2i,
    norm2,
    mlp,
    norm3,
    cross_i2t,
    norm4
});

impl<T: Element> TwoWayLayer<T> {
    fn new(d: usize, heads: usize, hidden: usize, first: bool, rng: &mut impl Rng) -> Result<Self> {
        Ok(TwoWayLayer {
            self_attn: MultiHeadAttention::new(d, d, heads, rng)?,
            norm1: LayerNorm::new(d),
            cross_t2i: MultiHeadAttention::new(d, d, heads, rng)?,
            norm2: LayerNorm::new(d),
            mlp: Mlp::new(&[d, hidden, d], rng),
            norm3: LayerNorm::new(d),
            cross_i2t: MultiHeadAttention::new(d, d, heads, rng)?,
            norm4: LayerNorm::new(d),
            first,
        })
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        queries: Var<'t, T>,
        keys: Var<'t, T>,
        query_pe: Var<'t, T>,
        key_pe: Var<'t, T>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let mut q = if self.first {
            self.self_attn.forward(tape, queries, queries, queries)?
        } else {
            let qp = queries.add(query_pe)?;
            queries.add(self.self_attn.forward(tape, qp, qp, queries)?)?
        };
        q = self.norm1.forward(tape, q)?;

        let kp = keys.add(key_pe)?;
        let a = self.cross_t2i.forward(tape, q.add(query_pe)?, kp, keys)?;
        q = self.norm2.forward(tape, q.add(a)?)?;

        q = self.norm3.forward(tape, q.add(self.mlp.forward(tape, q)?)?)?;

        let a = self.cross_i2t.forward(tape, kp, q.add(query_pe)?, q)?;
        let k = self.norm4.forward(tape, keys.add(a)?)?;
        Ok((q, k))
    }
}

/// Trainable mask decoder: input projections, two-way transformer, two
/// stride-2 transposed convolutions and a hypernetwork head.
#[derive(Clone, Debug)]
pub struct MaskDecoder<T> {
    pub image_proj: Linear<T>,
    pub prompt_proj: Linear<T>,
    pub mask_token: Param<T>,
    pub layers: Vec<TwoWayLayer<T>>,
    pub final_attn: MultiHeadAttention<T>,
    pub final_norm: LayerNorm<T>,
    pub up1: ConvTranspose2d<T>,
    pub up_norm: LayerNorm<T>,
    pub up2: ConvTranspose2d<T>,
    pub hyper: Mlp<T>,
    pub grid: usize,
}

impl_module!(MaskDecoder {
    image_proj,
    prompt_proj,
    mask_token,
    layers,
    final_attn,
    final_norm,
    up1,
    up_norm,
    up2,
    hyper
});

impl<T: Element> MaskDecoder<T> {
    pub fn new(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let dc = &cfg.decoder;
        let d = dc.dim;
        let hidden = cfg.decoder_mlp_hidden();
        let layers = (0..dc.depth)
            .map(|i| TwoWayLayer::new(d, dc.heads, hidden, i == 0, rng))
            .collect::<Result<_>>()?;
        let s2 = ConvGeom {
            stride: 2,
            padding: 0,
            dilation: 1,
        };
        Ok(MaskDecoder {
            image_proj: Linear::new(cfg.embed_dim, d, true, rng),
            prompt_proj: Linear::new(cfg.corner_embed_dim, d, true, rng),
            mask_token: Param::trainable(Tensor::randn(vec![1, 1, d], 1.0, rng)),
            layers,
            final_attn: MultiHeadAttention::new(d, d, dc.heads, rng)?,
            final_norm: LayerNorm::new(d),
            up1: ConvTranspose2d::new(d, d / 4, 2, s2, true, rng),
            up_norm: LayerNorm::new(d / 4),
            up2: ConvTranspose2d::new(d / 4, d / 8, 2, s2, true, rng),
            hyper: Mlp::new(&[d, d, d, d / 8], rng),
            grid: cfg.grid(),
        })
    }

    /// Mask logits at the native `4g × 4g` resolution.
    ///
    /// `img_emb: [B, N, E]`, `prompt: [B, 2, D]`, `dense_pe: [1, N, D]`.
    pub fn logits<'t>(
        &self,
        tape: &'t Tape<T>,
        img_emb: Var<'t, T>,
        prompt: Var<'t, T>,
        dense_pe: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let s = img_emb.shape();
        let g = self.grid;
        if s.len() != 3 || s[1] != g * g {
            return Err(Error::shape("decode_mask", format!("image embedding {s:?} for a {g}x{g} grid")));
        }
        let ps = prompt.shape();
        if ps.len() != 3 || ps[0] != s[0] || ps[1] != 2 {
            return Err(Error::shape("decode_mask", format!("prompt {ps:?} for batch {}", s[0])));
        }
        let (b, n, d) = (s[0], s[1], self.mask_token.tensor.shape()[2]);
        let sparse = self.prompt_proj.forward(tape, prompt)?;
        let mask_tok = tape.param(&self.mask_token).broadcast_to(&[b, 1, d])?;
        let tokens = concat(&[mask_tok, sparse], 1)?;
        let key_pe = self.prompt_proj.forward(tape, dense_pe)?.broadcast_to(&[b, n, d])?;
        let mut keys = self.image_proj.forward(tape, img_emb)?;
        let mut queries = tokens;
        for layer in &self.layers {
            (queries, keys) = layer.forward(tape, queries, keys, tokens, key_pe)?;
        }
        let a = self
            .final_attn
            .forward(tape, queries.add(tokens)?, keys.add(key_pe)?, keys)?;
        queries = self.final_norm.forward(tape, queries.add(a)?)?;

        let map = keys.reshape(&[b, g, g, d])?.permute(&[0, 3, 1, 2])?;
        let up = self.up1.forward(tape, map)?;
        let up = self.up_norm.forward_channels(tape, up)?.gelu();
        let up = self.up2.forward(tape, up)?.gelu();
        let (c, r) = (d / 8, 4 * g);
        let w = self.hyper.forward(tape, queries.narrow(1, 0, 1)?)?;
        w.matmul(up.reshape(&[b, c, r * r])?)?.reshape(&[b, 1, r, r])
    }

    /// Probabilities resized to `out_size`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        img_emb: Var<'t, T>,
        prompt: Var<'t, T>,
        dense_pe: Var<'t, T>,
        out_size: usize,
    ) -> Result<Var<'t, T>> {
        let p = self.logits(tape, img_emb, prompt, dense_pe)?.sigmoid();
        bilinear_resize(p, out_size, out_size)
    }
}
