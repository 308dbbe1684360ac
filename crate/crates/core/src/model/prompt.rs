use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::param::impl_module;
use crate::nn::Param;
use crate::tensor::{Element, Tensor};

/// Box prompt in pixel coordinates, `x1`/`y1` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl BBox {
    pub fn new(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        BBox { x0, y0, x1, y1 }
    }

    pub fn validate(&self, img_size: usize) -> Result<()> {
        let s = img_size as u64;
        if self.x0 >= self.x1 || self.y0 >= self.y1 || self.x1 as u64 > s || self.y1 as u64 > s {
            return Err(Error::Validation(format!(
                "box {self:?} is degenerate or outside a {img_size}x{img_size} image"
            )));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        (self.x1.saturating_sub(self.x0) as u64) * (self.y1.saturating_sub(self.y0) as u64)
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Corners as `(x, y)` pixel coordinates.
    pub fn corners(&self) -> [(f64, f64); 2] {
        [
            (self.x0 as f64, self.y0 as f64),
            (self.x1 as f64, self.y1 as f64),
        ]
    }
}

/// Frozen random-Fourier positional encoding of box corners plus a learned
/// embedding per corner type.
#[derive(Clone, Debug)]
pub struct PromptEncoder<T> {
    /// `[2, D/2]` Gaussian frequencies.
    pub gaussian: Param<T>,
    /// `[2, D]`, top-left then bottom-right.
    pub corner_embed: Param<T>,
    pub img_size: usize,
}

impl_module!(PromptEncoder {
    gaussian,
    corner_embed
});

impl<T: Element> PromptEncoder<T> {
    pub fn new(dim: usize, img_size: usize, rng: &mut impl Rng) -> Self {
        PromptEncoder {
            gaussian: Param::frozen(Tensor::randn(vec![2, dim / 2], 1.0, rng)),
            corner_embed: Param::frozen(Tensor::randn(vec![2, dim], 1.0, rng)),
            img_size,
        }
    }

    pub fn dim(&self) -> usize {
        self.corner_embed.tensor.shape()[1]
    }

    /// `[sin(2π·u·G), cos(2π·u·G)]` for `u = 2c − 1` in each axis.
    pub fn positional(&self, cx: f64, cy: f64) -> Vec<f64> {
        let g = self.gaussian.tensor.to_f64_vec();
        let half = g.len() / 2;
        let (ux, uy) = (2.0 * cx - 1.0, 2.0 * cy - 1.0);
        let phase: Vec<f64> = (0..half).map(|j| 2.0 * PI * (ux * g[j] + uy * g[half + j])).collect();
        phase.iter().map(|p| p.sin()).chain(phase.iter().map(|p| p.cos())).collect()
    }

    /// `[2, D]` embedding of one box.
    pub fn encode(&self, b: &BBox) -> Result<Tensor<T>> {
        b.validate(self.img_size)?;
        let d = self.dim();
        let ce = self.corner_embed.tensor.to_f64_vec();
        let s = self.img_size as f64;
        let mut out = Vec::with_capacity(2 * d);
        for (i, (x, y)) in b.corners().into_iter().enumerate() {
            let pe = self.positional(x / s, y / s);
            out.extend(pe.iter().zip(&ce[i * d..(i + 1) * d]).map(|(p, c)| T::from_f64(p + c)));
        }
        Tensor::from_vec(vec![2, d], out)
    }

    /// `[B, 2, D]` embeddings of a batch of boxes.
    pub fn encode_batch(&self, boxes: &[BBox]) -> Result<Tensor<T>> {
        if boxes.is_empty() {
            return Err(Error::Validation("empty box batch".into()));
        }
        let d = self.dim();
        let mut data = Vec::with_capacity(boxes.len() * 2 * d);
        for b in boxes {
            data.extend(self.encode(b)?.into_data());
        }
        Tensor::from_vec(vec![boxes.len(), 2, d], data)
    }

    /// `[1, g·g, D]` encoding of the patch-grid centres.
    pub fn dense(&self, grid: usize) -> Tensor<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(grid * grid * d);
        for i in 0..grid {
            for j in 0..grid {
                let c = |k: usize| (k as f64 + 0.5) / grid as f64;
                data.extend(self.positional(c(j), c(i)).into_iter().map(T::from_f64));
            }
        }
        Tensor::from_vec(vec![1, grid * grid, d], data).expect("non-empty grid")
    }
}
