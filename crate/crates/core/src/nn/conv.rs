//! Dilated and transposed 2-D convolution on `[B, C, H, W]` tensors.

use rand::Rng;

use super::param::{impl_module, Param};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Stride, zero padding and dilation shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub const UNIT: ConvGeom = ConvGeom {
        stride: 1,
        padding: 0,
        dilation: 1,
    };

    /// Stride 1 with `padding = dilation·(k−1)/2`, which keeps H×W for odd `k`.
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvGeom {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    /// Output extent of a forward convolution along one axis.
    pub fn conv_out(&self, size: usize, k: usize) -> Result<usize> {
        let eff = self.dilation * (k - 1) + 1;
        let padded = size + 2 * self.padding;
        if eff > padded {
            return Err(Error::shape(
                "conv2d",
                format!("effective kernel extent {eff} exceeds padded input extent {padded}"),
            ));
        }
        if (padded - eff) % self.stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "non-integral output extent ({padded} - {eff}) / {} + 1",
                    self.stride
                ),
            ));
        }
        Ok((padded - eff) / self.stride + 1)
    }

    /// Output extent of a transposed convolution along one axis.
    pub fn transposed_out(&self, size: usize, k: usize) -> Result<usize> {
        let full = (size - 1) * self.stride + self.dilation * (k - 1) + 1;
        if full <= 2 * self.padding {
            return Err(Error::shape(
                "transposed_conv2d",
                format!("non-positive output extent for input {size}, kernel {k}, {self:?}"),
            ));
        }
        Ok(full - 2 * self.padding)
    }
}

/// Lowering geometry: an image of `c × ih × iw` read through `kh × kw` taps
/// at `oh × ow` positions.
#[derive(Clone, Copy, Debug)]
struct Lowering {
    c: usize,
    ih: usize,
    iw: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    g: ConvGeom,
}

impl Lowering {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g == ConvGeom::UNIT
    }

    /// Source index for tap `(ki, kj)` at output `(oy, ox)`, or `None` in padding.
    #[inline]
    fn src(&self, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<(usize, usize)> {
        let y = (oy * self.g.stride + ki * self.g.dilation).checked_sub(self.g.padding)?;
        let x = (ox * self.g.stride + kj * self.g.dilation).checked_sub(self.g.padding)?;
        (y < self.ih && x < self.iw).then_some((y, x))
    }

    fn im2col<T: Element>(&self, img: &[T], cols: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            cols[row + oy * self.ow + ox] = match self.src(ki, kj, oy, ox) {
                                Some((y, x)) => img[(c * self.ih + y) * self.iw + x],
                                None => T::zero(),
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, cols: &[T], img: &mut [T]) {
        let n = self.cols();
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * n;
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some((y, x)) = self.src(ki, kj, oy, ox) {
                                img[(c * self.ih + y) * self.iw + x] += cols[row + oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_rank4(op: &'static str, what: &str, s: &[usize]) -> Result<()> {
    if s.len() != 4 {
        return Err(Error::shape(op, format!("{what} must be rank 4, got {s:?}")));
    }
    Ok(())
}

fn check_bias<T: Element>(op: &'static str, bias: Option<Var<'_, T>>, c: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::shape(op, format!("bias {:?} for {c} channels", b.shape())));
        }
    }
    Ok(())
}

fn add_channel_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Element>(g: &[T], acc: &mut [T], plane: usize) {
    let c = acc.len();
    for (i, chunk) in g.chunks_exact(plane).enumerate() {
        acc[i % c] += chunk.iter().copied().sum::<T>();
    }
}

/// Direct (optionally dilated/strided) convolution.
///
/// `x: [B, C_in, H, W]`, `weight: [C_out, C_in, k_h, k_w]`, `bias: [C_out]`.
pub fn conv2d<'t, T: Element>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    g: ConvGeom,
) -> Result<Var<'t, T>> {
    let (sx, sw) = (x.shape(), weight.shape());
    check_rank4("conv2d", "input", &sx)?;
    check_rank4("conv2d", "weight", &sw)?;
    let [b, c_in, h, w] = [sx[0], sx[1], sx[2], sx[3]];
    let [c_out, wc_in, kh, kw] = [sw[0], sw[1], sw[2], sw[3]];
    if wc_in != c_in {
        return Err(Error::shape(
            "conv2d",
            format!("input {sx:?} has {c_in} channels, weight {sw:?} expects {wc_in}"),
        ));
    }
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::shape("conv2d", "stride and dilation must be positive"));
    }
    check_bias("conv2d", bias, c_out)?;
    let oh = g.conv_out(h, kh)?;
    let ow = g.conv_out(w, kw)?;
    let low = Lowering {
        c: c_in,
        ih: h,
        iw: w,
        kh,
        kw,
        oh,
        ow,
        g,
    };
    let (k_rows, n_pos) = (low.rows(), low.cols());
    let xv = x.rc_value();
    let wv = weight.rc_value();
    let in_plane = c_in * h * w;
    let out_plane = c_out * n_pos;
    let mut out = vec![T::zero(); b * out_plane];
    let mut cols = vec![T::zero(); if low.is_pointwise() { 0 } else { k_rows * n_pos }];
    for bi in 0..b {
        let img = &xv[bi * in_plane..(bi + 1) * in_plane];
        let lowered: &[T] = if low.is_pointwise() {
            img
        } else {
            low.im2col(img, &mut cols);
            &cols
        };
        gemm(
            c_out,
            k_rows,
            n_pos,
            MatRef::rows(&wv, k_rows),
            MatRef::rows(lowered, n_pos),
            T::zero(),
            &mut out[bi * out_plane..(bi + 1) * out_plane],
        );
    }
    let bias_v = bias.map(|bv| bv.rc_value());
    if let Some(bv) = &bias_v {
        add_channel_bias(&mut out, bv, n_pos);
    }
    let (ix, iw) = (x.id, weight.id);
    let ib = bias.map(|bv| bv.id);
    let mut parents = vec![ix, iw];
    parents.extend(ib);
    Ok(x.tape.push(vec![b, c_out, oh, ow], out, &parents, move |gout, sink| {
        let want_x = sink.wants(ix);
        let want_w = sink.wants(iw);
        let mut cols = vec![T::zero(); if low.is_pointwise() { 0 } else { k_rows * n_pos }];
        let mut dcols = vec![T::zero(); k_rows * n_pos];
        for bi in 0..b {
            let go = &gout[bi * out_plane..(bi + 1) * out_plane];
            if want_w {
                let img = &xv[bi * in_plane..(bi + 1) * in_plane];
                let lowered: &[T] = if low.is_pointwise() {
                    img
                } else {
                    low.im2col(img, &mut cols);
                    &cols
                };
                // dW += dY · colsᵀ
                gemm(
                    c_out,
                    n_pos,
                    k_rows,
                    MatRef::rows(go, n_pos),
                    MatRef::rows_t(lowered, n_pos),
                    T::one(),
                    sink.slot(iw),
                );
            }
            if want_x {
                // dcols = Wᵀ · dY
                gemm(
                    k_rows,
                    c_out,
                    n_pos,
                    MatRef::rows_t(&wv, k_rows),
                    MatRef::rows(go, n_pos),
                    T::zero(),
                    &mut dcols,
                );
                let dx = &mut sink.slot(ix)[bi * in_plane..(bi + 1) * in_plane];
                if low.is_pointwise() {
                    for (a, &v) in dx.iter_mut().zip(&dcols) {
                        *a += v;
                    }
                } else {
                    low.col2im(&dcols, dx);
                }
            }
        }
        if let Some(ib) = ib {
            if sink.wants(ib) {
                bias_grad(gout, sink.slot(ib), n_pos);
            }
        }
    }))
}

/// Transposed convolution, the adjoint of [`conv2d`] with the same weight.
///
/// `x: [B, C_in, H, W]`, `weight: [C_in, C_out, k_h, k_w]` (the layout of the
/// forward convolution mapping `C_out → C_in`), `bias: [C_out]`. Output extent
/// is `(H−1)·stride − 2·padding + dilation·(k−1) + 1`.
pub fn conv_transpose2d<'t, T: Element>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    g: ConvGeom,
) -> Result<Var<'t, T>> {
    let (sx, sw) = (x.shape(), weight.shape());
    check_rank4("transposed_conv2d", "input", &sx)?;
    check_rank4("transposed_conv2d", "weight", &sw)?;
    let [b, c_in, h, w] = [sx[0], sx[1], sx[2], sx[3]];
    let [wc_in, c_out, kh, kw] = [sw[0], sw[1], sw[2], sw[3]];
    if wc_in != c_in {
        return Err(Error::shape(
            "transposed_conv2d",
            format!("input {sx:?} has {c_in} channels, weight {sw:?} expects {wc_in}"),
        ));
    }
    if g.stride == 0 || g.dilation == 0 {
        return Err(Error::shape(
            "transposed_conv2d",
            "stride and dilation must be positive",
        ));
    }
    check_bias("transposed_conv2d", bias, c_out)?;
    let oh = g.transposed_out(h, kh)?;
    let ow = g.transposed_out(w, kw)?;
    // Taps of the output image seen from the input grid.
    let low = Lowering {
        c: c_out,
        ih: oh,
        iw: ow,
        kh,
        kw,
        oh: h,
        ow: w,
        g,
    };
    let (k_rows, n_pos) = (low.rows(), low.cols());
    let xv = x.rc_value();
    let wv = weight.rc_value();
    let in_plane = c_in * n_pos;
    let out_plane = c_out * oh * ow;
    let mut out = vec![T::zero(); b * out_plane];
    let mut cols = vec![T::zero(); k_rows * n_pos];
    for bi in 0..b {
        // cols = Wᵀ · x_b, with W viewed as [C_in, C_out·k·k]
        gemm(
            k_rows,
            c_in,
            n_pos,
            MatRef::rows_t(&wv, k_rows),
            MatRef::rows(&xv[bi * in_plane..(bi + 1) * in_plane], n_pos),
            T::zero(),
            &mut cols,
        );
        low.col2im(&cols, &mut out[bi * out_plane..(bi + 1) * out_plane]);
    }
    let bias_v = bias.map(|bv| bv.rc_value());
    if let Some(bv) = &bias_v {
        add_channel_bias(&mut out, bv, oh * ow);
    }
    let (ix, iw) = (x.id, weight.id);
    let ib = bias.map(|bv| bv.id);
    let mut parents = vec![ix, iw];
    parents.extend(ib);
    Ok(x.tape.push(vec![b, c_out, oh, ow], out, &parents, move |gout, sink| {
        let want_x = sink.wants(ix);
        let want_w = sink.wants(iw);
        let mut dcols = vec![T::zero(); k_rows * n_pos];
        for bi in 0..b {
            low.im2col(&gout[bi * out_plane..(bi + 1) * out_plane], &mut dcols);
            if want_x {
                gemm(
                    c_in,
                    k_rows,
                    n_pos,
                    MatRef::rows(&wv, k_rows),
                    MatRef::rows(&dcols, n_pos),
                    T::one(),
                    &mut sink.slot(ix)[bi * in_plane..(bi + 1) * in_plane],
                );
            }
            if want_w {
                gemm(
                    c_in,
                    n_pos,
                    k_rows,
                    MatRef::rows(&xv[bi * in_plane..(bi + 1) * in_plane], n_pos),
                    MatRef::rows_t(&dcols, n_pos),
                    T::one(),
                    sink.slot(iw),
                );
            }
        }
        if let Some(ib) = ib {
            if sink.wants(ib) {
                bias_grad(gout, sink.slot(ib), oh * ow);
            }
        }
    }))
}

/// Convolution layer parameters.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geom: ConvGeom,
}

impl_module!(Conv2d { weight, bias });

impl<T: Element> Conv2d<T> {
    /// Trainable, uniform in `±1/√fan_in`.
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Param::trainable(Tensor::uniform(vec![c_out, c_in, k, k], scale, rng)),
            bias: bias.then(|| Param::trainable(Tensor::uniform(vec![c_out], scale, rng))),
            geom,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.tensor.shape()[2]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.as_ref().map(|p| tape.param(p));
        conv2d(x, tape.param(&self.weight), b, self.geom)
    }
}

/// Transposed convolution layer; weight is `[C_in, C_out, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub geom: ConvGeom,
}

impl_module!(ConvTranspose2d { weight, bias });

impl<T: Element> ConvTranspose2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let scale = 1.0 / ((c_out * k * k) as f64).sqrt();
        ConvTranspose2d {
            weight: Param::trainable(Tensor::uniform(vec![c_in, c_out, k, k], scale, rng)),
            bias: bias.then(|| Param::trainable(Tensor::uniform(vec![c_out], scale, rng))),
            geom,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let b = self.bias.as_ref().map(|p| tape.param(p));
        conv_transpose2d(x, tape.param(&self.weight), b, self.geom)
    }
}
