use std::ops::{Add, Mul, Neg, Sub};
use std::rc::Rc;

use super::tape::{GradSink, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Element};

/// Result shape of numpy-style broadcasting of `a` against `b`.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Offsets into a tensor of shape `src` for every element of the broadcast
/// shape `out`, in row-major order.
/// Compensated sum; keeps full reductions accurate to about one rounding.
pub fn neumaier_sum<T: Element>(x: &[T]) -> T {
    let (mut s, mut c) = (T::zero(), T::zero());
    for &v in x {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

fn broadcast_offsets(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0usize; rank];
    for i in 0..src.len() {
        eff[pad + i] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(out);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offs.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * out[d];
            idx[d] = 0;
        }
    }
    offs
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn name(self) -> &'static str {
        match self {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        }
    }

    fn apply<T: Element>(self, a: T, b: T) -> T {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }

    /// (∂/∂a, ∂/∂b) of the op at (a, b).
    fn partials<T: Element>(self, a: T, b: T) -> (T, T) {
        match self {
            BinOp::Add => (T::one(), T::one()),
            BinOp::Sub => (T::one(), -T::one()),
            BinOp::Mul => (b, a),
            BinOp::Div => (T::one() / b, -a / (b * b)),
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinOp) -> Result<Var<'t, T>> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let (sa, sb) = (self.shape(), other.shape());
        let (va, vb) = (self.rc_value(), other.rc_value());
        let (ia, ib) = (self.id, other.id);
        if sa == sb {
            let out: Vec<T> = va.iter().zip(vb.iter()).map(|(&x, &y)| op.apply(x, y)).collect();
            return Ok(self.tape.push(sa, out, &[ia, ib], move |g, sink| {
                if sink.wants(ia) {
                    let ga: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        _ => g
                            .iter()
                            .zip(va.iter().zip(vb.iter()))
                            .map(|(&g, (&x, &y))| g * op.partials(x, y).0)
                            .collect(),
                    };
                    sink.add_owned(ia, ga);
                }
                if sink.wants(ib) {
                    let gb: Vec<T> = g
                        .iter()
                        .zip(va.iter().zip(vb.iter()))
                        .map(|(&g, (&x, &y))| g * op.partials(x, y).1)
                        .collect();
                    sink.add_owned(ib, gb);
                }
            }));
        }
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(op.name(), format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let oa = broadcast_offsets(&sa, &out_shape);
        let ob = broadcast_offsets(&sb, &out_shape);
        let out: Vec<T> = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| op.apply(va[i], vb[j]))
            .collect();
        Ok(self.tape.push(out_shape, out, &[ia, ib], move |g, sink| {
            if sink.wants(ia) {
                let acc = sink.slot(ia);
                for (k, (&i, &j)) in oa.iter().zip(&ob).enumerate() {
                    acc[i] += g[k] * op.partials(va[i], vb[j]).0;
                }
            }
            if sink.wants(ib) {
                let acc = sink.slot(ib);
                for (k, (&i, &j)) in oa.iter().zip(&ob).enumerate() {
                    acc[j] += g[k] * op.partials(va[i], vb[j]).1;
                }
            }
        }))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Add)
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Sub)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Mul)
    }

    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinOp::Div)
    }

    /// Applies `f` elementwise; `df(x, y)` is the derivative given input and output.
    pub(crate) fn unary(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.rc_value();
        let y: Rc<Vec<T>> = Rc::new(x.iter().map(|&v| f(v)).collect());
        let yc = Rc::clone(&y);
        let id = self.id;
        self.tape.push_rc(self.shape(), y, &[id], move |g, sink| {
            let gx: Vec<T> = g
                .iter()
                .zip(x.iter().zip(yc.iter()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            sink.add_owned(id, gx);
        })
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        self.unary(move |v| v + c, |_, _| T::one())
    }

    pub fn neg(self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'t, T> {
        self.unary(|v| v * v, |x, _| x + x)
    }

    pub fn sqrt(self) -> Var<'t, T> {
        self.unary(|v| v.sqrt(), |_, y| T::from_f64(0.5) / y)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(
            |v| if v > T::zero() { v } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|v| v.tanh(), |_, y| T::one() - y * y)
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.unary(gelu, gelu_grad)
    }

    /// Clamps into `[lo, hi]`; gradient passes where `lo <= x <= hi`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'t, T> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    pub fn sum_all(self) -> Var<'t, T> {
        let x = self.rc_value();
        let n = x.len();
        let s = neumaier_sum(&x);
        let id = self.id;
        self.tape.push(Vec::new(), vec![s], &[id], move |g, sink| {
            let acc = sink.slot(id);
            for a in acc.iter_mut().take(n) {
                *a += g[0];
            }
        })
    }

    pub fn mean_all(self) -> Var<'t, T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum_all().scale(T::one() / n)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.rc_value();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let id = self.id;
        Ok(self.tape.push(out_shape, out, &[id], move |g, sink| {
            let acc = sink.slot(id);
            for o in 0..outer {
                for k in 0..len {
                    let base = (o * len + k) * inner;
                    for i in 0..inner {
                        acc[base + i] += g[o * inner + i];
                    }
                }
            }
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis}")))?;
        Ok(self.sum_axis(axis)?.scale(T::one() / T::from_f64(len as f64)))
    }

    /// Same data, new extents.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let old = self.shape();
        if numel(shape) != numel(&old) || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("{old:?} -> {shape:?}")));
        }
        let id = self.id;
        Ok(self
            .tape
            .push_rc(shape.to_vec(), self.rc_value(), &[id], move |g, sink| {
                sink.add(id, g);
            }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} for {shape:?}")));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self);
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let map = Rc::new(strided_offsets(&out_shape, &src_strides));
        let x = self.rc_value();
        let out: Vec<T> = map.iter().map(|&o| x[o]).collect();
        let id = self.id;
        Ok(self.tape.push(out_shape, out, &[id], move |g, sink| {
            let acc = sink.slot(id);
            for (k, &o) in map.iter().enumerate() {
                acc[o] += g[k];
            }
        }))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'t, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::shape("transpose", format!("axes {a},{b} of rank {rank}")));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.rc_value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let id = self.id;
        Ok(self.tape.push(out_shape, out, &[id], move |g, sink| {
            let acc = sink.slot(id);
            for o in 0..outer {
                let base = (o * full + start) * inner;
                for (a, &v) in acc[base..base + len * inner]
                    .iter_mut()
                    .zip(&g[o * len * inner..(o + 1) * len * inner])
                {
                    *a += v;
                }
            }
        }))
    }

    /// Materialises broadcasting of `self` to `shape`.
    pub fn broadcast_to(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let src = self.shape();
        match broadcast_shape(&src, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast_to",
                    format!("{src:?} -> {shape:?}"),
                ))
            }
        }
        if src == shape {
            return Ok(self);
        }
        let offs = broadcast_offsets(&src, shape);
        let x = self.rc_value();
        let out: Vec<T> = offs.iter().map(|&o| x[o]).collect();
        let id = self.id;
        Ok(self.tape.push(shape.to_vec(), out, &[id], move |g, sink| {
            let acc = sink.slot(id);
            for (k, &o) in offs.iter().enumerate() {
                acc[o] += g[k];
            }
        }))
    }
}

/// Joins `parts` along `axis`; all other extents must agree.
pub fn concat<'t, T: Element>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no inputs"))?;
    let tape = first.tape;
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let base = &shapes[0];
    if axis >= base.len() {
        return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
    }
    for s in &shapes[1..] {
        let same_rank = s.len() == base.len();
        if !same_rank || s.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = lens.iter().sum();
    let values: Vec<Rc<Vec<T>>> = parts.iter().map(|p| p.rc_value()).collect();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            out.extend_from_slice(&v[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let parents = ids.clone();
    Ok(tape.push(out_shape, out, &parents, move |g, sink: &mut GradSink<'_, T>| {
        let mut offset = 0;
        for (&id, &l) in ids.iter().zip(&lens) {
            if sink.wants(id) {
                let acc = sink.slot(id);
                for o in 0..outer {
                    let src = &g[(o * total + offset) * inner..(o * total + offset + l) * inner];
                    for (a, &v) in acc[o * l * inner..(o + 1) * l * inner].iter_mut().zip(src) {
                        *a += v;
                    }
                }
            }
            offset += l;
        }
    }))
}

/// Source offsets for walking `shape` in row-major order with `src_strides`.
pub(crate) fn strided_offsets(shape: &[usize], src_strides: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let total = numel(shape);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::from_f64(GELU_C) * x * x * x);
    T::from_f64(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Element>(x: T, _y: T) -> T {
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let half = T::from_f64(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

impl<'t, T: Element> Add for Var<'t, T> {
    type Output = Var<'t, T>;
    /// Panics on incompatible shapes; use [`Var::add`] for a `Result`.
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs).expect("broadcastable operands")
    }
}

impl<'t, T: Element> Sub for Var<'t, T> {
    type Output = Var<'t, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs).expect("broadcastable operands")
    }
}

impl<'t, T: Element> Mul for Var<'t, T> {
    type Output = Var<'t, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs).expect("broadcastable operands")
    }
}

impl<'t, T: Element> Neg for Var<'t, T> {
    type Output = Var<'t, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}
