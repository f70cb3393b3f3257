//! Forward and backward numeric kernels for the layer primitives. The tape
//! in [`crate::autodiff`] wires these together; nothing here records
//! anything.

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// Inputs above this are returned unchanged by softplus.
pub const SOFTPLUS_THRESHOLD: f64 = 30.0;

#[inline]
pub fn softplus_scalar<T: Scalar>(x: T) -> T {
    if x > T::cast_from(SOFTPLUS_THRESHOLD) {
        x
    } else {
        // Floor at the smallest normal so the result stays strictly positive
        // even where exp(x) underflows.
        x.exp().ln_1p().max(T::min_positive_value())
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::cast_from(0.5);
    x * half * (T::one() + (x * T::cast_from(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let half = T::cast_from(0.5);
    let cdf = half * (T::one() + (x * T::cast_from(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::cast_from(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().expect("softmax of a scalar");
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    for v in row.iter_mut() {
        *v -= max;
    }
    T::exp_in_place(row);
    let sum: T = row.iter().copied().sum();
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Gradient of row softmax given its output `y` and upstream `g`.
pub fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let mut out = g.clone();
    for (orow, yrow) in out.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        let dot: T = orow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
        for (o, &yv) in orow.iter_mut().zip(yrow) {
            *o = yv * (*o - dot);
        }
    }
    out
}

pub struct LayerNormCache<T: Scalar> {
    pub xhat: Tensor<T>,
    pub rstd: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("layer_norm of a scalar"))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gamma.shape()));
    }
    if eps < 0.0 {
        return Err(Error::invalid("layer_norm eps must be non-negative"));
    }
    let eps = T::cast_from(eps);
    let inv_d = T::cast_from(1.0 / d as f64);
    let rows = x.numel() / d;
    let mut xhat = x.clone();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(rows);
    for (hrow, orow) in xhat
        .data_mut()
        .chunks_mut(d)
        .zip(out.data_mut().chunks_mut(d))
    {
        let mean = hrow.iter().copied().sum::<T>() * inv_d;
        let var = hrow.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for ((h, o), (&g, &b)) in hrow
            .iter_mut()
            .zip(orow.iter_mut())
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *h = (*h - mean) * r;
            *o = g * *h + b;
        }
    }
    Ok((out, LayerNormCache { xhat, rstd }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = gamma.numel();
    let inv_d = T::cast_from(1.0 / d as f64);
    let mut dx = g.clone();
    let mut dgamma = vec![T::zero(); d];
    let mut dbeta = vec![T::zero(); d];
    for ((dxrow, hrow), &r) in dx
        .data_mut()
        .chunks_mut(d)
        .zip(cache.xhat.data().chunks(d))
        .zip(&cache.rstd)
    {
        let mut mean_dh = T::zero();
        let mut mean_dh_h = T::zero();
        for i in 0..d {
            let gi = dxrow[i];
            dgamma[i] += gi * hrow[i];
            dbeta[i] += gi;
            let dh = gi * gamma.data()[i];
            mean_dh += dh;
            mean_dh_h += dh * hrow[i];
        }
        mean_dh *= inv_d;
        mean_dh_h *= inv_d;
        for i in 0..d {
            let dh = dxrow[i] * gamma.data()[i];
            dxrow[i] = r * (dh - mean_dh - hrow[i] * mean_dh_h);
        }
    }
    (
        dx,
        Tensor::from_parts(vec![d], dgamma),
        Tensor::from_parts(vec![d], dbeta),
    )
}

/// Geometry of a stride-1, zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn of(x: &[usize], w: &[usize], bias: &[usize], pad: usize) -> Result<Self> {
        if x.len() != 3 || w.len() != 4 {
            return Err(Error::shape("conv2d", x, w));
        }
        let (c_in, h, wd) = (x[0], x[1], x[2]);
        let (c_out, wc_in, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wc_in != c_in {
            return Err(Error::shape("conv2d", x, w));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be square with odd side, got {kh}x{kw}"
            )));
        }
        if bias != [c_out] {
            return Err(Error::shape("conv2d bias", w, bias));
        }
        let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
        if hp < kh || wp < kw {
            return Err(Error::invalid(format!(
                "conv2d: empty output for input {x:?} with k={kh}, pad={pad}"
            )));
        }
        Ok(ConvGeometry {
            c_in,
            h,
            w: wd,
            c_out,
            k: kh,
            pad,
            h_out: hp - kh + 1,
            w_out: wp - kw + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfold `x` into a `[c_in*k*k, h_out*w_out]` patch matrix.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let n = g.out_len();
    let mut cols = vec![T::zero(); g.patch_len() * n];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for y in 0..g.h_out {
                    let sy = y as isize + ky as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + sy as usize) * g.w..(c * g.h + sy as usize + 1) * g.w];
                    let drow = &mut dst[y * g.w_out..(y + 1) * g.w_out];
                    // Valid output columns satisfy 0 <= x + kx - pad < w.
                    let lo = g.pad.saturating_sub(kx);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.w_out);
                    if lo < hi {
                        let s0 = lo + kx - g.pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back to the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let n = g.out_len();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for y in 0..g.h_out {
                    let sy = y as isize + ky as isize - g.pad as isize;
                    if sy < 0 || sy >= g.h as isize {
                        continue;
                    }
                    let dst =
                        &mut x[(c * g.h + sy as usize) * g.w..(c * g.h + sy as usize + 1) * g.w];
                    let srow = &src[y * g.w_out..(y + 1) * g.w_out];
                    let lo = g.pad.saturating_sub(kx);
                    let hi = (g.w + g.pad).saturating_sub(kx).min(g.w_out);
                    for xo in lo..hi {
                        dst[xo + kx - g.pad] += srow[xo];
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation (no kernel flip), stride 1, zero padding `pad`.
/// Returns the output and the unfolded input for reuse in backward.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeometry)> {
    let g = ConvGeometry::of(x.shape(), w.shape(), bias.shape(), pad)?;
    let cols = im2col(x.data(), &g);
    let n = g.out_len();
    let mut out = vec![T::zero(); g.c_out * n];
    for (o, &b) in bias.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(b);
    }
    gemm(
        T::one(),
        MatRef::row_major(w.data(), g.c_out, g.patch_len()),
        MatRef::row_major(&cols, g.patch_len(), n),
        T::one(),
        &mut out,
    );
    Ok((
        Tensor::from_parts(vec![g.c_out, g.h_out, g.w_out], out),
        cols,
        g,
    ))
}

/// Returns `(dx, dw, dbias)` as flat buffers in the shapes of the inputs.
pub fn conv2d_backward<T: Scalar>(
    cols: &[T],
    w: &Tensor<T>,
    geo: &ConvGeometry,
    g: &Tensor<T>,
    need_x: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let n = geo.out_len();
    let pl = geo.patch_len();
    let gm = MatRef::row_major(g.data(), geo.c_out, n);
    let mut dw = vec![T::zero(); geo.c_out * pl];
    gemm(
        T::one(),
        gm,
        MatRef::row_major(cols, pl, n).t(),
        T::zero(),
        &mut dw,
    );
    let db = g
        .data()
        .chunks(n)
        .map(|r| r.iter().copied().sum())
        .collect();
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); pl * n];
        gemm(
            T::one(),
            MatRef::row_major(w.data(), geo.c_out, pl).t(),
            gm,
            T::zero(),
            &mut dcols,
        );
        col2im(&dcols, geo)
    });
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize) -> Tensor {
        let (ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
        let (co, k) = (w.dim(0), w.dim(2));
        let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
        let mut out = Tensor::zeros([co, ho, wo]);
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.get(&[o]);
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let sy = y as isize + ky as isize - pad as isize;
                                let sx = xx as isize + kx as isize - pad as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                    acc += w.get(&[o, c, ky, kx])
                                        * x.get(&[c, sy as usize, sx as usize]);
                                }
                            }
                        }
                    }
                    out.set(&[o, y, xx], acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::rand_uniform([1, 4, 5], 0.0, 1.0, &mut rng);
        let w = Tensor::ones([1, 1, 1, 1]);
        let (y, _, _) = conv2d(&x, &w, &Tensor::zeros([1]), 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_constant_interior() {
        let x = Tensor::<f64>::full([1, 5, 5], 0.7);
        let (y, _, _) = conv2d(&x, &Tensor::ones([1, 1, 3, 3]), &Tensor::zeros([1]), 1).unwrap();
        assert!((y.get(&[0, 2, 2]) - 9.0 * 0.7).abs() < 1e-12);
        assert!((y.get(&[0, 0, 0]) - 4.0 * 0.7).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (ci, co, h, w, k, pad) in [
            (2, 3, 5, 5, 3, 1),
            (3, 2, 4, 7, 3, 0),
            (1, 4, 8, 6, 5, 2),
            (2, 2, 3, 3, 1, 0),
        ] {
            let x = Tensor::rand_uniform([ci, h, w], -1.0, 1.0, &mut rng);
            let wt = Tensor::rand_uniform([co, ci, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::rand_uniform([co], -1.0, 1.0, &mut rng);
            let (y, _, _) = conv2d(&x, &wt, &b, pad).unwrap();
            assert!(y.max_abs_diff(&naive_conv(&x, &wt, &b, pad)) < 1e-12);
        }
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::zeros([2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), &Tensor::zeros([1]), 1).is_err());
        assert!(conv2d(&x, &Tensor::zeros([1, 2, 2, 2]), &Tensor::zeros([1]), 1).is_err());
        assert!(conv2d(
            &Tensor::<f64>::zeros([2, 1, 1]),
            &Tensor::zeros([1, 2, 3, 3]),
            &Tensor::zeros([1]),
            0
        )
        .is_err());
    }

    #[test]
    fn layer_norm_closed_form() {
        let x = Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3]), 0.0).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in y.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!((y.data()[0] + 1.224745).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::full([2, 4], 3.5);
        let (y, _) = layer_norm(&x, &Tensor::ones([4]), &Tensor::zeros([4]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::rand_uniform([16, 32], -5.0, 5.0, &mut rng);
        let eps = 1e-5;
        let (y, _) = layer_norm(&x, &Tensor::ones([32]), &Tensor::zeros([32]), eps).unwrap();
        for (row, xrow) in y.data().chunks(32).zip(x.data().chunks(32)) {
            let mean: f64 = row.iter().sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            let xm: f64 = xrow.iter().sum::<f64>() / 32.0;
            let xvar: f64 = xrow.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-10);
            // Exact variance is xvar / (xvar + eps).
            assert!((var - xvar / (xvar + eps)).abs() < 1e-10);
            assert!((1.0 - var).abs() <= eps / xvar + 1e-12);
        }
    }

    #[test]
    fn activation_values() {
        assert!((softplus_scalar(0.0f64) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus_scalar(40.0f64), 40.0);
        assert!(softplus_scalar(-800.0f64) > 0.0);
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let s = softmax_rows(&Tensor::<f64>::zeros([1, 3]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
