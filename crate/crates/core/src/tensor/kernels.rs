//! Forward and backward kernels for the tape operations.
//!
//! Convolutions lower to matrix products through `im2col`/`col2im`, one
//! batch item at a time. Transposed convolution is implemented as the exact
//! adjoint of convolution with the same geometry.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{gemm, Mat, Scalar, Tensor};
use crate::error::{argument, Result};

/// Geometry of a 2-D convolution seen from its (larger) input side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 || kernel == 0 {
            return Err(argument("kernel and stride must be positive"));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(argument("kernel larger than padded input"));
        }
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: (height + 2 * pad - kernel) / stride + 1,
            out_w: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Output columns `[lo, hi)` whose tap at kernel column `kj` lands
    /// inside the input.
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj).div_ceil(self.stride);
        let hi = match (self.width + self.pad).checked_sub(kj + 1) {
            Some(last) => (last / self.stride + 1).min(self.out_w),
            None => 0,
        };
        (lo.min(hi), hi)
    }

    /// Calls `f(col_row, input_row)` for every kernel tap and output row:
    /// `col_row` is the slice of `out_w` column entries, `input_row` the
    /// matching input row start (or `None` when the row lies in the padding),
    /// together with the valid column range.
    #[inline]
    fn for_each_row(&self, mut f: impl FnMut(usize, Option<usize>, (usize, usize), usize)) {
        let k = self.kernel;
        let ncols = self.col_cols();
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let range = self.valid_cols(kj);
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let col_row = row * ncols + oy * self.out_w;
                        if iy < 0 || iy >= self.height as isize {
                            f(col_row, None, range, kj);
                        } else {
                            let in_row = (c * self.height + iy as usize) * self.width;
                            f(col_row, Some(in_row), range, kj);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let (w, s) = (self.out_w, self.stride);
        self.for_each_row(|cr, input, (lo, hi), kj| {
            let dst = &mut col[cr..cr + w];
            match input {
                None => dst.fill(T::zero()),
                Some(ir) => {
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if lo < hi {
                        let start = ir + lo * s + kj - self.pad;
                        let src = x[start..].iter().step_by(s);
                        for (d, &v) in dst[lo..hi].iter_mut().zip(src) {
                            *d = v;
                        }
                    }
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let s = self.stride;
        self.for_each_row(|cr, input, (lo, hi), kj| {
            if let Some(ir) = input {
                if lo < hi {
                    let start = ir + lo * s + kj - self.pad;
                    let dst = dx[start..].iter_mut().step_by(s);
                    for (d, &v) in dst.zip(&col[cr + lo..cr + hi]) {
                        *d += v;
                    }
                }
            }
        });
    }
}

fn expect_rank<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank {
        return Err(argument(format!(
            "{what} must have rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_bias<T: Scalar>(bias: Option<&Tensor<T>>, n: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != n => Err(argument(format!(
            "bias has {} entries, expected {n}",
            b.len()
        ))),
        _ => Ok(()),
    }
}

fn add_channel_bias<T: Scalar>(out: &mut [T], bias: &[T], spatial: usize) {
    for (chunk, &b) in out.chunks_exact_mut(spatial).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums<T: Scalar>(dy: &[T], channels: usize, spatial: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in dy.chunks_exact(spatial).enumerate() {
        db[i % channels] += chunk.iter().copied().sum();
    }
    db
}

/// Cross-correlation of `input [B,C,H,W]` with `kernel [O,C,k,k]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    expect_rank(input, 4, "conv input")?;
    expect_rank(kernel, 4, "conv kernel")?;
    let &[batch, c, h, w] = input.shape() else {
        unreachable!()
    };
    let &[o, kc, kh, kw] = kernel.shape() else {
        unreachable!()
    };
    if kc != c || kh != kw {
        return Err(argument(format!(
            "kernel {:?} does not fit input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    check_bias(bias, o)?;
    let g = ConvGeometry::new(c, h, w, kh, stride, pad)?;
    let spatial = g.col_cols();
    let mut out = Tensor::zeros(&[batch, o, g.out_h, g.out_w]);
    let mut col = vec![T::zero(); g.col_rows() * spatial];
    for b in 0..batch {
        g.im2col(
            &input.data()[b * g.input_len()..(b + 1) * g.input_len()],
            &mut col,
        );
        let out_b = &mut out.data_mut()[b * o * spatial..(b + 1) * o * spatial];
        gemm(
            Mat::new(kernel.data(), o, g.col_rows()),
            Mat::new(&col, g.col_rows(), spatial),
            T::zero(),
            out_b,
        );
        if let Some(bias) = bias {
            add_channel_bias(out_b, bias.data(), spatial);
        }
    }
    Ok(out)
}

/// Input gradient (when requested), kernel gradient and bias gradient.
pub type ConvGrads<T> = (Option<Tensor<T>>, Tensor<T>, Tensor<T>);

/// Gradients of [`conv2d_forward`] with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (dx, dk, db) = conv2d_backward_with(input, kernel, grad_out, stride, pad, true)?;
    Ok((dx.expect("input gradient requested"), dk, db))
}

/// As [`conv2d_backward`]; the input gradient is skipped unless `want_dx`.
pub(crate) fn conv2d_backward_with<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_dx: bool,
) -> Result<ConvGrads<T>> {
    let &[batch, c, h, w] = input.shape() else {
        return Err(argument("conv input must have rank 4"));
    };
    let o = kernel.shape()[0];
    let g = ConvGeometry::new(c, h, w, kernel.shape()[2], stride, pad)?;
    let spatial = g.col_cols();
    if grad_out.shape() != [batch, o, g.out_h, g.out_w] {
        return Err(argument("output gradient has the wrong shape"));
    }
    let mut dx = want_dx.then(|| Tensor::zeros(input.shape()));
    let mut dk = Tensor::zeros(kernel.shape());
    let mut col = vec![T::zero(); g.col_rows() * spatial];
    let mut dcol = vec![T::zero(); if want_dx { g.col_rows() * spatial } else { 0 }];
    for b in 0..batch {
        let x_b = &input.data()[b * g.input_len()..(b + 1) * g.input_len()];
        let dy_b = &grad_out.data()[b * o * spatial..(b + 1) * o * spatial];
        g.im2col(x_b, &mut col);
        gemm(
            Mat::new(dy_b, o, spatial),
            Mat::new(&col, g.col_rows(), spatial).t(),
            T::one(),
            dk.data_mut(),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                Mat::new(kernel.data(), o, g.col_rows()).t(),
                Mat::new(dy_b, o, spatial),
                T::zero(),
                &mut dcol,
            );
            g.col2im(
                &dcol,
                &mut dx.data_mut()[b * g.input_len()..(b + 1) * g.input_len()],
            );
        }
    }
    let db = Tensor::from_vec(&[o], channel_sums(grad_out.data(), o, spatial))?;
    Ok((dx, dk, db))
}

/// Output geometry of a transposed convolution, as the geometry of the
/// forward convolution it is the adjoint of.
fn transpose_geometry(
    out_channels: usize,
    in_h: usize,
    in_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    let h = ((in_h - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| argument("padding too large for transposed convolution"))?;
    let w = ((in_w - 1) * stride + kernel)
        .checked_sub(2 * pad)
        .ok_or_else(|| argument("padding too large for transposed convolution"))?;
    let g = ConvGeometry::new(out_channels, h, w, kernel, stride, pad)?;
    debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
    Ok(g)
}

/// Transposed convolution of `input [B,Ci,H,W]` with `kernel [Ci,Co,k,k]`;
/// with kernel 4, stride 2 and padding 1 it doubles the resolution.
pub fn conv_transpose2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    expect_rank(input, 4, "transposed conv input")?;
    expect_rank(kernel, 4, "transposed conv kernel")?;
    let &[batch, ci, h, w] = input.shape() else {
        unreachable!()
    };
    let &[kci, co, kh, kw] = kernel.shape() else {
        unreachable!()
    };
    if kci != ci || kh != kw || h == 0 || w == 0 {
        return Err(argument(format!(
            "kernel {:?} does not fit input {:?}",
            kernel.shape(),
            input.shape()
        )));
    }
    check_bias(bias, co)?;
    let g = transpose_geometry(co, h, w, kh, stride, pad)?;
    let in_spatial = h * w;
    let out_len = g.input_len();
    let mut out = Tensor::zeros(&[batch, co, g.height, g.width]);
    let mut col = vec![T::zero(); g.col_rows() * in_spatial];
    for b in 0..batch {
        let x_b = &input.data()[b * ci * in_spatial..(b + 1) * ci * in_spatial];
        gemm(
            Mat::new(kernel.data(), ci, g.col_rows()).t(),
            Mat::new(x_b, ci, in_spatial),
            T::zero(),
            &mut col,
        );
        let out_b = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        g.col2im(&col, out_b);
        if let Some(bias) = bias {
            add_channel_bias(out_b, bias.data(), g.height * g.width);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[batch, ci, h, w] = input.shape() else {
        return Err(argument("transposed conv input must have rank 4"));
    };
    let co = kernel.shape()[1];
    let g = transpose_geometry(co, h, w, kernel.shape()[2], stride, pad)?;
    if grad_out.shape() != [batch, co, g.height, g.width] {
        return Err(argument("output gradient has the wrong shape"));
    }
    let in_spatial = h * w;
    let out_len = g.input_len();
    let mut dx = Tensor::zeros(input.shape());
    let mut dk = Tensor::zeros(kernel.shape());
    let mut dcol = vec![T::zero(); g.col_rows() * in_spatial];
    for b in 0..batch {
        let x_b = &input.data()[b * ci * in_spatial..(b + 1) * ci * in_spatial];
        g.im2col(&grad_out.data()[b * out_len..(b + 1) * out_len], &mut dcol);
        gemm(
            Mat::new(kernel.data(), ci, g.col_rows()),
            Mat::new(&dcol, g.col_rows(), in_spatial),
            T::zero(),
            &mut dx.data_mut()[b * ci * in_spatial..(b + 1) * ci * in_spatial],
        );
        gemm(
            Mat::new(x_b, ci, in_spatial),
            Mat::new(&dcol, g.col_rows(), in_spatial).t(),
            T::one(),
            dk.data_mut(),
        );
    }
    let db = Tensor::from_vec(&[co], channel_sums(grad_out.data(), co, g.height * g.width))?;
    Ok((dx, dk, db))
}

/// `x [B,I] * weight^T + bias`, with `weight [O,I]`.
pub fn dense_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    expect_rank(input, 2, "dense input")?;
    expect_rank(weight, 2, "dense weight")?;
    let &[batch, i] = input.shape() else {
        unreachable!()
    };
    let &[o, wi] = weight.shape() else {
        unreachable!()
    };
    if wi != i {
        return Err(argument(format!(
            "weight {:?} does not fit input {:?}",
            weight.shape(),
            input.shape()
        )));
    }
    check_bias(bias, o)?;
    let mut out = Tensor::zeros(&[batch, o]);
    gemm(
        Mat::new(input.data(), batch, i),
        Mat::new(weight.data(), o, i).t(),
        T::zero(),
        out.data_mut(),
    );
    if let Some(bias) = bias {
        for row in out.data_mut().chunks_exact_mut(o) {
            row.iter_mut().zip(bias.data()).for_each(|(v, &b)| *v += b);
        }
    }
    Ok(out)
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[batch, i] = input.shape() else {
        return Err(argument("dense input must have rank 2"));
    };
    let o = weight.shape()[0];
    if grad_out.shape() != [batch, o] {
        return Err(argument("output gradient has the wrong shape"));
    }
    let mut dx = Tensor::zeros(&[batch, i]);
    let mut dw = Tensor::zeros(&[o, i]);
    gemm(
        Mat::new(grad_out.data(), batch, o),
        Mat::new(weight.data(), o, i),
        T::zero(),
        dx.data_mut(),
    );
    gemm(
        Mat::new(grad_out.data(), batch, o).t(),
        Mat::new(input.data(), batch, i),
        T::zero(),
        dw.data_mut(),
    );
    let mut db = vec![T::zero(); o];
    for row in grad_out.data().chunks_exact(o) {
        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
    }
    Ok((dx, dw, Tensor::from_vec(&[o], db)?))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(argument(format!(
            "shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Summed KL divergence of diagonal Gaussians `N(mu, exp(logvar))` from the
/// standard normal prior.
pub fn kl_gaussian<T: Scalar>(mu: &Tensor<T>, logvar: &Tensor<T>) -> Result<T> {
    same_shape(mu, logvar)?;
    let half = T::of(0.5);
    Ok(mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| half * (m * m + lv.exp() - T::one() - lv))
        .sum())
}

/// Summed negative log-likelihood of `target` under Bernoulli pixels with
/// the given logits, in the overflow-free form
/// `max(l, 0) - l * x + ln(1 + exp(-|l|))`.
pub fn bernoulli_nll<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    same_shape(logits, target)?;
    Ok(logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&l, &x)| l.max(T::zero()) - l * x + (-l.abs()).exp().ln_1p())
        .sum())
}

/// `z = mu + exp(logvar / 2) * eps` with `eps ~ N(0, I)`; returns `(z, eps)`.
pub fn reparameterize<T: Scalar, R: Rng + ?Sized>(
    mu: &Tensor<T>,
    logvar: &Tensor<T>,
    rng: &mut R,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape(mu, logvar)?;
    let eps = Tensor::from_fn(mu.shape(), |_| {
        let e: f64 = StandardNormal.sample(rng);
        T::of(e)
    });
    let z = Tensor::from_fn(mu.shape(), |i| {
        mu.data()[i] + (T::of(0.5) * logvar.data()[i]).exp() * eps.data()[i]
    });
    Ok((z, eps))
}
