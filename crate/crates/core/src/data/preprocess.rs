use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::model::BBox;
use crate::nn::bilinear_resize;
use crate::tensor::{Element, Tensor};

/// CT display window, in Hounsfield units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub width: f64,
    pub level: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            width: 400.0,
            level: 40.0,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || !self.level.is_finite() {
            return Err(Error::Config(format!("window width {} must be positive", self.width)));
        }
        Ok(())
    }

    pub fn apply(&self, hu: f64) -> f64 {
        let lo = self.level - self.width / 2.0;
        ((hu - lo) / self.width).clamp(0.0, 1.0)
    }
}

/// Maps `[level − width/2, level + width/2]` linearly onto `[0, 1]`, clipping outside.
pub fn window_normalize<T: Element>(hu: &Tensor<T>, w: &WindowSpec) -> Result<Tensor<T>> {
    w.validate()?;
    let data = hu.data().iter().map(|&v| T::from_f64(w.apply(v.to_f64()))).collect();
    Tensor::from_vec(hu.shape().to_vec(), data)
}

/// 8-connected component labels (0 = background) and component areas.
pub fn label_components(mask: &Mask) -> (Vec<u32>, Vec<usize>) {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut areas = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        let label = areas.len() as u32 + 1;
        let mut area = 0;
        labels[start] = label;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            area += 1;
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && labels[j] == 0 {
                        labels[j] = label;
                        queue.push_back(j);
                    }
                }
            }
        }
        areas.push(area);
    }
    (labels, areas)
}

/// Drops 8-connected components with fewer than `min_pixels` pixels.
pub fn remove_small_objects(mask: &Mask, min_pixels: usize) -> Mask {
    let (labels, areas) = label_components(mask);
    let data = labels
        .iter()
        .map(|&l| l != 0 && areas[l as usize - 1] >= min_pixels)
        .collect();
    Mask {
        height: mask.height,
        width: mask.width,
        data,
    }
}

/// Bilinear resize of a `[S, S]` slice to `target`, copied into three channels.
pub fn to_model_input<T: Element>(slice: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    let s = slice.shape();
    if s.len() != 2 || target == 0 {
        return Err(Error::shape("to_model_input", format!("slice {s:?} to {target}")));
    }
    let tape = Tape::new();
    let x = tape.constant(&slice.clone().reshape(vec![1, 1, s[0], s[1]])?);
    let r = bilinear_resize(x, target, target)?.to_tensor().into_data();
    let mut data = Vec::with_capacity(3 * r.len());
    for _ in 0..3 {
        data.extend_from_slice(&r);
    }
    Tensor::from_vec(vec![3, target, target], data)
}

/// Tight box around the foreground (`None` for an empty mask).
pub fn tight_bbox(mask: &Mask) -> Option<BBox> {
    let mut b: Option<(usize, usize, usize, usize)> = None;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(y, x) {
                b = Some(match b {
                    None => (x, y, x, y),
                    Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                });
            }
        }
    }
    b.map(|(x0, y0, x1, y1)| BBox::new(x0 as u32, y0 as u32, x1 as u32 + 1, y1 as u32 + 1))
}

pub const PERTURB_RETRIES: usize = 10;

/// Shifts every coordinate by a uniform integer in `±max_shift`, clipped to the
/// image. Gives up after a few degenerate draws and returns the box unchanged.
pub fn perturb_bbox(b: &BBox, max_shift: u32, img_size: usize, rng: &mut impl Rng) -> BBox {
    if max_shift == 0 {
        return *b;
    }
    let m = max_shift as i64;
    let s = img_size as i64;
    for _ in 0..PERTURB_RETRIES {
        let mut shift = |v: u32, lo: i64, hi: i64| (v as i64 + rng.random_range(-m..=m)).clamp(lo, hi) as u32;
        let nb = BBox::new(
            shift(b.x0, 0, s - 1),
            shift(b.y0, 0, s - 1),
            shift(b.x1, 1, s),
            shift(b.y1, 1, s),
        );
        if nb.validate(img_size).is_ok() {
            return nb;
        }
    }
    *b
}
