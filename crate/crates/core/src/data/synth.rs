use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::preprocess::{remove_small_objects, tight_bbox, to_model_input, window_normalize, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::Mask;
use crate::model::BBox;
use crate::tensor::Tensor;

/// One image/mask/box triple.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    pub seed: u64,
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `[S, S]` with values in `{0, 1}`.
    pub mask: Tensor<f32>,
    /// Tight box around the mask.
    pub bbox: BBox,
}

/// Procedural vessel generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub size: usize,
    /// Side of the model input the slice is resized to.
    pub target: usize,
    pub vessels_min: usize,
    pub vessels_max: usize,
    /// Centreline length range in 1-px steps.
    pub length_min: usize,
    pub length_max: usize,
    /// Std of the heading change per step (radians).
    pub step_std: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Vessel intensity above background, HU.
    pub contrast: f64,
    pub background_hu: f64,
    pub noise_std: f64,
    /// Per-step chance of spawning the (single) side branch.
    pub branch_prob: f64,
    pub min_pixels: usize,
    pub window: WindowSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SynthConfig {
    pub fn desk() -> Self {
        SynthConfig {
            size: 64,
            target: 64,
            vessels_min: 1,
            vessels_max: 2,
            length_min: 24,
            length_max: 48,
            step_std: 0.12,
            radius_min: 2.5,
            radius_max: 4.5,
            contrast: 220.0,
            background_hu: 0.0,
            noise_std: 25.0,
            branch_prob: 0.02,
            min_pixels: 8,
            window: WindowSpec::default(),
            seed: 0,
        }
    }

    /// 1024-pixel slices with the 100-pixel small-object threshold; geometry
    /// scaled with the image side.
    pub fn paper() -> Self {
        let d = Self::desk();
        let k = 1024.0 / d.size as f64;
        SynthConfig {
            size: 1024,
            target: 1024,
            length_min: (d.length_min as f64 * k) as usize,
            length_max: (d.length_max as f64 * k) as usize,
            step_std: d.step_std / k.sqrt(),
            radius_min: d.radius_min * k,
            radius_max: d.radius_max * k,
            branch_prob: d.branch_prob / k,
            min_pixels: 100,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size == 0 || self.target == 0 {
            return bad("image sizes must be positive".into());
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return bad(format!("radius range [{}, {}] must start at >= 1 px", self.radius_min, self.radius_max));
        }
        if self.vessels_min == 0 || self.vessels_max < self.vessels_min {
            return bad(format!("vessel count range [{}, {}]", self.vessels_min, self.vessels_max));
        }
        if self.length_max < self.length_min {
            return bad(format!("length range [{}, {}]", self.length_min, self.length_max));
        }
        if !(self.noise_std >= 0.0 && self.step_std >= 0.0 && (0.0..=1.0).contains(&self.branch_prob)) {
            return bad("noise, smoothness and branch probability must be non-negative".into());
        }
        self.window.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    /// Seed of sample `index` in a shard generated from this config.
    pub fn sample_seed(&self, index: u64) -> u64 {
        // splitmix64 finaliser
        let mut z = self.seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Centreline points with radii.
struct Walk {
    points: Vec<(f64, f64, f64)>,
}

fn random_walk(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    start: (f64, f64),
    heading: f64,
    radius: (f64, f64),
    length: usize,
    branch: bool,
    out: &mut Vec<Walk>,
) {
    let lo = cfg.radius_max + 1.0;
    let hi = cfg.size as f64 - 1.0 - lo;
    let turn = Normal::new(0.0, cfg.step_std.max(1e-12)).expect("finite std");
    let (mut x, mut y) = start;
    let mut a = heading;
    let mut points = Vec::with_capacity(length + 1);
    let mut child = None;
    for i in 0..=length {
        let t = if length == 0 { 0.0 } else { i as f64 / length as f64 };
        let r = radius.0 + (radius.1 - radius.0) * t;
        points.push((x, y, r));
        if branch && child.is_none() && i > 0 && rng.random_bool(cfg.branch_prob) {
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            child = Some(((x, y), a + side * rng.random_range(0.4..1.0), r));
        }
        let (nx, ny) = (x + a.cos(), y + a.sin());
        if nx < lo || nx > hi || ny < lo || ny > hi {
            break;
        }
        x = nx;
        y = ny;
        a += turn.sample(rng);
    }
    out.push(Walk { points });
    if let Some((p, h, r)) = child {
        let r = (0.7 * r).max(cfg.radius_min);
        random_walk(cfg, rng, p, h, (r, r), length / 2, false, out);
    }
}

fn rasterize(size: usize, walks: &[Walk]) -> Mask {
    let mut m = Mask::empty(size, size);
    for w in walks {
        for &(cx, cy, r) in &w.points {
            let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(size - 1));
            let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(size - 1));
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let (dx, dy) = (px as f64 - cx, py as f64 - cy);
                    if dx * dx + dy * dy <= r * r {
                        m.data[py * size + px] = true;
                    }
                }
            }
        }
    }
    m
}

/// Raw HU slice and vessel mask before preprocessing.
pub fn generate_raw(cfg: &SynthConfig, seed: u64) -> Result<(Tensor<f64>, Mask)> {
    cfg.validate()?;
    let s = cfg.size as f64;
    let lo = cfg.radius_max + 1.0;
    if s - 1.0 - lo <= lo {
        return Err(Error::Generation(format!(
            "a vessel of radius {} does not fit in a {}px image",
            cfg.radius_max, cfg.size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.random_range(cfg.vessels_min..=cfg.vessels_max);
    let mut walks = Vec::new();
    for _ in 0..count {
        let start = (rng.random_range(lo..=s - 1.0 - lo), rng.random_range(lo..=s - 1.0 - lo));
        let heading = rng.random_range(0.0..2.0 * PI);
        let r0 = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let r1 = rng.random_range(cfg.radius_min..=r0);
        let len = rng.random_range(cfg.length_min..=cfg.length_max);
        random_walk(cfg, &mut rng, start, heading, (r0, r1), len, true, &mut walks);
    }
    let mask = rasterize(cfg.size, &walks);
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).expect("finite std");
    let hu = mask
        .data
        .iter()
        .map(|&fg| {
            let n = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            cfg.background_hu + n + if fg { cfg.contrast } else { 0.0 }
        })
        .collect();
    Ok((Tensor::from_vec(vec![cfg.size, cfg.size], hu)?, mask))
}

/// Full pipeline: raw slice, windowing, small-object removal, resize and
/// channel triplication.
pub fn generate_sample(cfg: &SynthConfig, seed: u64, id: impl Into<String>) -> Result<SegSample> {
    let (hu, raw) = generate_raw(cfg, seed)?;
    let mask = remove_small_objects(&raw, cfg.min_pixels);
    let bbox = tight_bbox(&mask).ok_or_else(|| {
        Error::Generation(format!("seed {seed}: no vessel survives the {}px threshold", cfg.min_pixels))
    })?;
    let slice = window_normalize(&hu, &cfg.window)?;
    let image = to_model_input(&slice, cfg.target)?.cast::<f32>();
    Ok(SegSample {
        id: id.into(),
        seed,
        image,
        mask: mask.to_tensor(),
        bbox,
    })
}

/// `count` samples with ids `00000, 00001, ...`, generated in parallel.
pub fn generate_samples(cfg: &SynthConfig, count: usize) -> Result<Vec<SegSample>> {
    use rayon::prelude::*;
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(cfg, cfg.sample_seed(i as u64), format!("{i:05}")))
        .collect()
}
