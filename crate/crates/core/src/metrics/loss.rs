use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LOG_EPS: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1e-6;

/// Splits `[B, ...]` into B rows (rank 1 is one row).
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let n: usize = shape.iter().product();
    if shape.len() <= 1 {
        (1, n)
    } else {
        (shape[0], n / shape[0])
    }
}

fn check_pair<T: Element>(op: &'static str, p: &Var<'_, T>, t: &Tensor<T>) -> Result<(usize, usize)> {
    if p.shape() != t.shape() {
        return Err(Error::shape(op, format!("prediction {:?} vs target {:?}", p.shape(), t.shape())));
    }
    if let Some(v) = t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::Validation(format!("{op}: target value {v} is not binary")));
    }
    Ok(rows_of(t.shape()))
}

/// Mean binary cross-entropy with `p` clamped to `[ε, 1−ε]`. Rows have equal
/// length, so this is also the mean of the per-row means.
pub fn bce_loss<'t, T: Element>(p: Var<'t, T>, t: &Tensor<T>) -> Result<Var<'t, T>> {
    check_pair("bce_loss", &p, t)?;
    let total = t.numel();
    let (lo, hi) = (T::from_f64(LOG_EPS), T::from_f64(1.0 - LOG_EPS));
    let pv = p.rc_value();
    let tv = t.data().to_vec();
    let mut sum = 0.0f64;
    for (&pi, &ti) in pv.iter().zip(&tv) {
        let c = pi.max(lo).min(hi);
        sum -= if ti == T::one() { c.ln() } else { (T::one() - c).ln() }.to_f64();
    }
    let value = T::from_f64(sum / total as f64);
    let id = p.id;
    Ok(p.tape.push(vec![], vec![value], &[id], move |g, sink| {
        let scale = g[0] / T::from_f64(total as f64);
        let acc = sink.slot(id);
        for ((a, &pi), &ti) in acc.iter_mut().zip(pv.iter()).zip(&tv) {
            if pi < lo || pi > hi {
                continue;
            }
            *a -= scale * if ti == T::one() { T::one() / pi } else { -T::one() / (T::one() - pi) };
        }
    }))
}

/// `1 − 2Σtp / (Σt² + Σp² + ε)` per row, averaged over rows. A row where both
/// sums vanish contributes 0.
pub fn dice_loss<'t, T: Element>(p: Var<'t, T>, t: &Tensor<T>) -> Result<Var<'t, T>> {
    let (b, m) = check_pair("dice_loss", &p, t)?;
    let pv = p.rc_value();
    let tv = t.data().to_vec();
    let eps = T::from_f64(DICE_SMOOTH);
    // (intersection, denominator) per row; denominator 0 marks an empty row.
    let mut stats = Vec::with_capacity(b);
    let mut loss = T::zero();
    for r in 0..b {
        let (pr, tr) = (&pv[r * m..(r + 1) * m], &tv[r * m..(r + 1) * m]);
        let inter: T = pr.iter().zip(tr).map(|(&a, &b)| a * b).sum();
        let sq: T = tr.iter().map(|&v| v * v).sum::<T>() + pr.iter().map(|&v| v * v).sum::<T>();
        if sq == T::zero() {
            stats.push((T::zero(), T::zero()));
        } else {
            let den = sq + eps;
            loss += T::one() - (inter + inter) / den;
            stats.push((inter, den));
        }
    }
    let bf = T::from_f64(b as f64);
    let id = p.id;
    Ok(p.tape.push(vec![], vec![loss / bf], &[id], move |g, sink| {
        let scale = g[0] / bf;
        let two = T::from_f64(2.0);
        let acc = sink.slot(id);
        for (r, &(inter, den)) in stats.iter().enumerate() {
            if den == T::zero() {
                continue;
            }
            for j in r * m..(r + 1) * m {
                acc[j] += scale * (two * inter * two * pv[j] / (den * den) - two * tv[j] / den);
            }
        }
    }))
}

/// Unweighted sum of Dice and BCE.
pub fn combined_loss<'t, T: Element>(p: Var<'t, T>, t: &Tensor<T>) -> Result<Var<'t, T>> {
    dice_loss(p, t)?.add(bce_loss(p, t)?)
}
