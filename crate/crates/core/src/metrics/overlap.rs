use serde::Serialize;

use super::mask::Mask;
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::shape(
            op,
            format!("{}x{} vs {}x{}", a.height, a.width, b.height, b.width),
        ));
    }
    Ok(())
}

/// `2|P∩T| / (|P|+|T|)`; two empty masks score 1.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_shape("dsc", pred, gt)?;
    let inter = pred.data.iter().zip(&gt.data).filter(|(&a, &b)| a && b).count();
    let total = pred.count() + gt.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Hausdorff {
    pub value: f64,
    /// Set when a boundary was empty and `value` is the image diagonal.
    pub sentinel: bool,
}

/// 1-D squared distance transform (lower envelope of parabolas); `f` holds
/// squared distances or infinity.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.fill(f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        let mut s;
        loop {
            let p = v[k] as f64;
            s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * (qf - p));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest of `points`.
pub fn squared_distance_map(h: usize, w: usize, points: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![f64::INFINITY; h * w];
    for &(y, x) in points {
        grid[y * w + x] = 0.0;
    }
    let n = h.max(w);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            grid[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        grid[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    grid
}

fn directed(from: &[(usize, usize)], to_map: &[f64], w: usize) -> f64 {
    from.iter().map(|&(y, x)| to_map[y * w + x]).fold(0.0, f64::max)
}

/// Exact symmetric Hausdorff distance between mask boundaries, in pixels.
pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<Hausdorff> {
    same_shape("hausdorff", pred, gt)?;
    let (h, w) = (pred.height, pred.width);
    let (bp, bt) = (pred.boundary(), gt.boundary());
    if bp.is_empty() || bt.is_empty() {
        return Ok(Hausdorff {
            value: ((h * h + w * w) as f64).sqrt(),
            sentinel: true,
        });
    }
    let dp = squared_distance_map(h, w, &bp);
    let dt = squared_distance_map(h, w, &bt);
    let sq = directed(&bp, &dt, w).max(directed(&bt, &dp, w));
    Ok(Hausdorff {
        value: sq.sqrt(),
        sentinel: false,
    })
}
