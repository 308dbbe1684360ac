use std::rc::Rc;

use super::param::{impl_module, Mode, Param};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Statistics used to normalise a batch-norm input.
pub enum BnStats<'a, T> {
    /// Compute per-channel batch statistics.
    Batch,
    /// Use the given running mean and variance.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Output plus the batch statistics (mean, biased variance) when they were computed.
pub struct BnOutput<'t, T: Element> {
    pub y: Var<'t, T>,
    pub batch_stats: Option<(Vec<T>, Vec<T>)>,
}

/// Per-channel normalisation of `x: [B, C, H, W]` followed by `gamma·x̂ + beta`.
pub fn batch_norm2d<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    stats: BnStats<'_, T>,
    eps: f64,
) -> Result<BnOutput<'t, T>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(Error::shape("batch_norm", format!("input must be rank 4, got {s:?}")));
    }
    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batch_norm",
            format!("affine params {:?}/{:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let n = b * plane;
    let xv = x.rc_value();
    let (mean, var, training) = match stats {
        BnStats::Batch => {
            if n < 2 {
                return Err(Error::shape(
                    "batch_norm",
                    format!("degenerate batch: B·H·W = {n} per channel in training mode"),
                ));
            }
            let nf = T::from_f64(n as f64);
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (i, chunk) in xv.chunks_exact(plane).enumerate() {
                mean[i % c] += chunk.iter().copied().sum::<T>();
            }
            for m in &mut mean {
                *m /= nf;
            }
            for (i, chunk) in xv.chunks_exact(plane).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
            }
            for v in &mut var {
                *v /= nf;
            }
            (mean, var, true)
        }
        BnStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batch_norm", "running statistics length"));
            }
            (mean.to_vec(), var.to_vec(), false)
        }
    };
    let eps = T::from_f64(eps);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gv = gamma.rc_value();
    let bv = beta.rc_value();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for (i, (xc, (hc, oc))) in xv
        .chunks_exact(plane)
        .zip(xhat.chunks_exact_mut(plane).zip(out.chunks_exact_mut(plane)))
        .enumerate()
    {
        let ci = i % c;
        for ((&xv, h), o) in xc.iter().zip(hc.iter_mut()).zip(oc.iter_mut()) {
            *h = (xv - mean[ci]) * inv_std[ci];
            *o = gv[ci] * *h + bv[ci];
        }
    }
    let xhat = Rc::new(xhat);
    let (ix, ig, ib) = (x.id, gamma.id, beta.id);
    let y = x.tape.push(s, out, &[ix, ig, ib], move |g, sink| {
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gx = vec![T::zero(); c];
        for (i, (gc, hc)) in g.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
            sum_g[i % c] += gc.iter().copied().sum::<T>();
            sum_gx[i % c] += gc.iter().zip(hc).map(|(&a, &b)| a * b).sum::<T>();
        }
        if sink.wants(ig) {
            for (a, &v) in sink.slot(ig).iter_mut().zip(&sum_gx) {
                *a += v;
            }
        }
        if sink.wants(ib) {
            for (a, &v) in sink.slot(ib).iter_mut().zip(&sum_g) {
                *a += v;
            }
        }
        if sink.wants(ix) {
            let acc = sink.slot(ix);
            let nf = T::from_f64(n as f64);
            for (i, ((gc, hc), ac)) in g
                .chunks_exact(plane)
                .zip(xhat.chunks_exact(plane))
                .zip(acc.chunks_exact_mut(plane))
                .enumerate()
            {
                let ci = i % c;
                let k = gv[ci] * inv_std[ci];
                if training {
                    let k = k / nf;
                    for ((a, &gi), &h) in ac.iter_mut().zip(gc).zip(hc) {
                        *a += k * (nf * gi - sum_g[ci] - h * sum_gx[ci]);
                    }
                } else {
                    for (a, &gi) in ac.iter_mut().zip(gc) {
                        *a += k * gi;
                    }
                }
            }
        }
    });
    Ok(BnOutput {
        y,
        batch_stats: training.then_some((mean, var)),
    })
}

/// Normalisation over the last axis of `x` followed by `gamma·x̂ + beta`.
pub fn layer_norm<'t, T: Element>(
    x: Var<'t, T>,
    gamma: Var<'t, T>,
    beta: Var<'t, T>,
    eps: f64,
) -> Result<Var<'t, T>> {
    let s = x.shape();
    let d = *s.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("affine params {:?}/{:?} for width {d}", gamma.shape(), beta.shape()),
        ));
    }
    let xv = x.rc_value();
    let gv = gamma.rc_value();
    let bv = beta.rc_value();
    let df = T::from_f64(d as f64);
    let eps = T::from_f64(eps);
    let rows = xv.len() / d;
    let mut xhat = vec![T::zero(); xv.len()];
    let mut inv_std = vec![T::zero(); rows];
    let mut out = vec![T::zero(); xv.len()];
    for r in 0..rows {
        let row = &xv[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / df;
        let inv = T::one() / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = gv[j] * h + bv[j];
        }
    }
    let (ix, ig, ib) = (x.id, gamma.id, beta.id);
    Ok(x.tape.push(s, out, &[ix, ig, ib], move |g, sink| {
        if sink.wants(ig) {
            let acc = sink.slot(ig);
            for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for ((a, &gv), &h) in acc.iter_mut().zip(gr).zip(hr) {
                    *a += gv * h;
                }
            }
        }
        if sink.wants(ib) {
            let acc = sink.slot(ib);
            for gr in g.chunks_exact(d) {
                for (a, &gv) in acc.iter_mut().zip(gr) {
                    *a += gv;
                }
            }
        }
        if sink.wants(ix) {
            let acc = sink.slot(ix);
            let mut dh = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    dh[j] = gr[j] * gv[j];
                }
                let s1: T = dh.iter().copied().sum();
                let s2: T = dh.iter().zip(hr).map(|(&a, &b)| a * b).sum();
                let k = inv_std[r] / df;
                for j in 0..d {
                    acc[r * d + j] += k * (df * dh[j] - s1 - hr[j] * s2);
                }
            }
        }
    }))
}

/// Batch normalisation layer with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl_module!(BatchNorm2d {
    gamma,
    beta,
    running_mean,
    running_var
});

impl<T: Element> BatchNorm2d<T> {
    pub fn new(c: usize) -> Self {
        BatchNorm2d {
            gamma: Param::trainable(Tensor::ones(vec![c])),
            beta: Param::trainable(Tensor::zeros(vec![c])),
            running_mean: Param::buffer(Tensor::zeros(vec![c])),
            running_var: Param::buffer(Tensor::ones(vec![c])),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    /// In [`Mode::Train`] the updated running statistics are queued on the tape
    /// (see [`Tape::take_stat_updates`]); the layer itself is not mutated.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>, mode: Mode) -> Result<Var<'t, T>> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let stats = match mode {
            Mode::Train => BnStats::Batch,
            Mode::Eval => BnStats::Running {
                mean: self.running_mean.tensor.data(),
                var: self.running_var.tensor.data(),
            },
        };
        let n = {
            let s = x.shape();
            s.first().copied().unwrap_or(0) * s.get(2).copied().unwrap_or(0) * s.get(3).copied().unwrap_or(0)
        };
        let out = batch_norm2d(x, gamma, beta, stats, self.eps)?;
        if let Some((mean, var)) = out.batch_stats {
            let m = T::from_f64(self.momentum);
            let keep = T::one() - m;
            let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
            let rm = self
                .running_mean
                .tensor
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| keep * r + m * b)
                .collect();
            let rv = self
                .running_var
                .tensor
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| keep * r + m * b * unbias)
                .collect();
            tape.record_stat(self.running_mean.id(), rm);
            tape.record_stat(self.running_var.id(), rv);
        }
        Ok(out.y)
    }
}

/// Layer normalisation over the trailing axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl_module!(LayerNorm { gamma, beta });

impl<T: Element> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Param::trainable(Tensor::ones(vec![d])),
            beta: Param::trainable(Tensor::zeros(vec![d])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        layer_norm(x, tape.param(&self.gamma), tape.param(&self.beta), LN_EPS)
    }

    /// Normalises the channel axis of `[B, C, H, W]` per pixel.
    pub fn forward_channels<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = self.forward(tape, x.permute(&[0, 2, 3, 1])?)?;
        y.permute(&[0, 3, 1, 2])
    }
}
