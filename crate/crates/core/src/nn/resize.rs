//! Spatial pooling and resampling on `[B, C, H, W]` tensors.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Element;

fn dims4<T: Element>(op: &'static str, x: &Var<'_, T>) -> Result<[usize; 4]> {
    let s = x.shape();
    match s[..] {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::shape(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

/// Mean over the spatial axes, keeping them as extent 1.
pub fn global_avg_pool<'t, T: Element>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let [b, c, h, w] = dims4("global_avg_pool", &x)?;
    x.reshape(&[b, c, h * w])?.mean_axis(2)?.reshape(&[b, c, 1, 1])
}

/// Source taps `(i0, i1, w0, w1)` along one axis, half-pixel centres.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let p = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (p.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let l = p - i0 as f64;
            (i0, i1, 1.0 - l, l)
        })
        .collect()
}

/// Bilinear resampling to `out_h × out_w` (half-pixel centres, edge clamped).
/// Equal sizes copy the input unchanged.
pub fn bilinear_resize<'t, T: Element>(x: Var<'t, T>, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
    let [b, c, h, w] = dims4("bilinear_resize", &x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("bilinear_resize", "zero output extent"));
    }
    let id = x.id;
    let xv = x.rc_value();
    if (h, w) == (out_h, out_w) {
        return Ok(x.tape.push_rc(x.shape(), xv, &[id], move |g, sink| sink.add(id, g)));
    }
    let cast = |t: Vec<(usize, usize, f64, f64)>| -> Vec<(usize, usize, T, T)> {
        t.into_iter()
            .map(|(a, b, u, v)| (a, b, T::from_f64(u), T::from_f64(v)))
            .collect()
    };
    let ty = cast(bilinear_taps(h, out_h));
    let tx = cast(bilinear_taps(w, out_w));
    let planes = b * c;
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &xv[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                dst[oy * out_w + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    }
    Ok(x.tape.push(vec![b, c, out_h, out_w], out, &[id], move |g, sink| {
        let acc = sink.slot(id);
        for p in 0..planes {
            let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
            let ap = &mut acc[p * h * w..(p + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                    let gv = gp[oy * out_w + ox];
                    ap[y0 * w + x0] += gv * wy0 * wx0;
                    ap[y0 * w + x1] += gv * wy0 * wx1;
                    ap[y1 * w + x0] += gv * wy1 * wx0;
                    ap[y1 * w + x1] += gv * wy1 * wx1;
                }
            }
        }
    }))
}
