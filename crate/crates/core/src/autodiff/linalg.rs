use std::rc::Rc;

use super::ops::broadcast_shape;
use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, strides, Element, MatRef};

/// Flat batch offsets (in matrices) of `src` batch dims for each broadcast batch index.
fn batch_map(src: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - src.len();
    let st = strides(src);
    let total = numel(out);
    let mut res = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    for _ in 0..total {
        let mut off = 0;
        for (i, &e) in src.iter().enumerate() {
            if e != 1 {
                off += idx[pad + i] * st[i];
            }
        }
        res.push(off);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    res
}

impl<'t, T: Element> Var<'t, T> {
    /// Batched matrix product `[.., m, k] × [.., k, n] -> [.., m, n]`; leading
    /// batch extents broadcast.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner extents differ: {sa:?} x {sb:?}"),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| {
            Error::shape("matmul", format!("batch extents differ: {sa:?} x {sb:?}"))
        })?;
        let map_a = batch_map(ba, &batch);
        let map_b = batch_map(bb, &batch);
        let (va, vb) = (self.rc_value(), other.rc_value());
        let nb = numel(&batch);
        let mut out = vec![T::zero(); nb * m * n];
        for i in 0..nb {
            let a = &va[map_a[i] * m * k..(map_a[i] + 1) * m * k];
            let b = &vb[map_b[i] * k * n..(map_b[i] + 1) * k * n];
            gemm(
                m,
                k,
                n,
                MatRef::rows(a, k),
                MatRef::rows(b, n),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        let (ia, ib) = (self.id, other.id);
        Ok(self.tape.push(out_shape, out, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let acc = sink.slot(ia);
                for i in 0..nb {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let b = &vb[map_b[i] * k * n..(map_b[i] + 1) * k * n];
                    // dA = dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        MatRef::rows(gi, n),
                        MatRef::rows_t(b, n),
                        T::one(),
                        &mut acc[map_a[i] * m * k..(map_a[i] + 1) * m * k],
                    );
                }
            }
            if sink.wants(ib) {
                let acc = sink.slot(ib);
                for i in 0..nb {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let a = &va[map_a[i] * m * k..(map_a[i] + 1) * m * k];
                    // dB = Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        MatRef::rows_t(a, k),
                        MatRef::rows(gi, n),
                        T::one(),
                        &mut acc[map_b[i] * k * n..(map_b[i] + 1) * k * n],
                    );
                }
            }
        }))
    }

    /// `x · Wᵀ + b` over the last axis of `x`, with `W` shaped `[out, in]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let sx = self.shape();
        let sw = weight.shape();
        let c_in = *sx.last().ok_or_else(|| Error::shape("linear", "scalar input"))?;
        if sw.len() != 2 || sw[1] != c_in {
            return Err(Error::shape(
                "linear",
                format!("input {sx:?} against weight {sw:?}"),
            ));
        }
        let c_out = sw[0];
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(
                    "linear",
                    format!("bias {:?} for {c_out} outputs", b.shape()),
                ));
            }
        }
        let rows = numel(&sx) / c_in;
        let x = self.rc_value();
        let w = weight.rc_value();
        let mut out = vec![T::zero(); rows * c_out];
        gemm(
            rows,
            c_in,
            c_out,
            MatRef::rows(&x, c_in),
            MatRef::rows_t(&w, c_in),
            T::zero(),
            &mut out,
        );
        let bias_val: Option<Rc<Vec<T>>> = bias.map(|b| b.rc_value());
        if let Some(bv) = &bias_val {
            for row in out.chunks_exact_mut(c_out) {
                for (o, &b) in row.iter_mut().zip(bv.iter()) {
                    *o += b;
                }
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().expect("rank >= 1") = c_out;
        let (ix, iw) = (self.id, weight.id);
        let ib = bias.map(|b| b.id);
        let mut parents = vec![ix, iw];
        parents.extend(ib);
        Ok(self.tape.push(out_shape, out, &parents, move |g, sink| {
            if sink.wants(ix) {
                // dX = dY · W
                gemm(
                    rows,
                    c_out,
                    c_in,
                    MatRef::rows(g, c_out),
                    MatRef::rows(&w, c_in),
                    T::one(),
                    sink.slot(ix),
                );
            }
            if sink.wants(iw) {
                // dW = dYᵀ · X
                gemm(
                    c_out,
                    rows,
                    c_in,
                    MatRef::rows_t(g, c_out),
                    MatRef::rows(&x, c_in),
                    T::one(),
                    sink.slot(iw),
                );
            }
            if let Some(ib) = ib {
                if sink.wants(ib) {
                    let acc = sink.slot(ib);
                    for row in g.chunks_exact(c_out) {
                        for (a, &v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax_last(self) -> Var<'t, T> {
        let shape = self.shape();
        let d = *shape.last().unwrap_or(&1);
        let x = self.rc_value();
        let mut y = vec![T::zero(); x.len()];
        for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
            let mx = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mx).exp();
                s += *o;
            }
            for o in yr.iter_mut() {
                *o /= s;
            }
        }
        let y = Rc::new(y);
        let yc = Rc::clone(&y);
        let id = self.id;
        self.tape.push_rc(shape, y, &[id], move |g, sink| {
            let acc = sink.slot(id);
            for ((gr, yr), ar) in g
                .chunks_exact(d)
                .zip(yc.chunks_exact(d))
                .zip(acc.chunks_exact_mut(d))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((a, &gv), &yv) in ar.iter_mut().zip(gr).zip(yr) {
                    *a += yv * (gv - dot);
                }
            }
        })
    }
}
