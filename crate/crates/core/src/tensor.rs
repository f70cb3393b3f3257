//! Dense row-major tensors and the numeric scalar abstraction.
//!
//! Everything in the crate is written against [`Scalar`] so the same model
//! code runs in 64-bit (the default, used by every correctness check) and in
//! 32-bit (used only to time inference).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::{Rng, RngExt};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    fn cast_from(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn erf(self) -> Self;

    /// Elementwise `exp` over a slice. The 32-bit variant uses a polynomial
    /// that the compiler vectorizes; 64-bit stays on the libm routine.
    fn exp_in_place(xs: &mut [Self]);

    /// `xs[i] = exp(xs[i] - shift)`, returning the sum of the results.
    fn exp_shift_sum(xs: &mut [Self], shift: Self) -> Self {
        for x in xs.iter_mut() {
            *x -= shift;
        }
        Self::exp_in_place(xs);
        xs.iter().copied().sum()
    }

    /// Elementwise softplus; see [`crate::nn::softplus_scalar`].
    fn softplus_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = crate::nn::softplus_scalar(*x);
        }
    }

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// All pointers must be valid for the index ranges implied by the sizes
    /// and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn cast_from(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn cast_from(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        erf_f32_fast(self)
    }
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32_fast(*x);
        }
    }
    fn exp_shift_sum(xs: &mut [Self], shift: Self) -> Self {
        let mut acc = [0.0f32; 16];
        let mut chunks = xs.chunks_exact_mut(16);
        for c in &mut chunks {
            for (a, x) in acc.iter_mut().zip(c.iter_mut()) {
                *x = exp_f32_fast(*x - shift);
                *a += *x;
            }
        }
        let mut total = 0.0;
        for x in chunks.into_remainder() {
            *x = exp_f32_fast(*x - shift);
            total += *x;
        }
        total + acc.iter().sum::<f32>()
    }
    fn softplus_in_place(xs: &mut [Self]) {
        for x in xs {
            // max(x, 0) + log1p(e) with e = exp(-|x|) in (0, 1], and
            // log1p(e) = 2 atanh(e / (2 + e)) summed as an odd series.
            let e = exp_f32_fast(-x.abs());
            let t = e / (2.0 + e);
            let t2 = t * t;
            let series = 1.0
                + t2 * (1.0 / 3.0
                    + t2 * (0.2 + t2 * (1.0 / 7.0 + t2 * (1.0 / 9.0 + t2 * (1.0 / 11.0)))));
            *x = (x.max(0.0) + 2.0 * t * series).max(f32::MIN_POSITIVE);
        }
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Cody-Waite range reduction plus a degree-7 polynomial; max relative error
/// about 1e-7 on [-87, 88]. Branch-free so loops over it vectorize.
#[inline(always)]
fn exp_f32_fast(x: f32) -> f32 {
    let x = if x < -87.0 { -87.0 } else { x };
    let x = if x > 88.0 { 88.0 } else { x };
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23
    let m = x * std::f32::consts::LOG2_E + MAGIC;
    let n = m - MAGIC;
    let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let p = p * r * r + r + 1.0;
    let bits = m.to_bits().wrapping_sub(MAGIC.to_bits()).wrapping_add(127) << 23;
    p * f32::from_bits(bits)
}

/// Rational approximation of erf with absolute error below 1.5e-7, written
/// without branches so it vectorizes.
#[inline(always)]
fn erf_f32_fast(x: f32) -> f32 {
    let a = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * a);
    let poly = t
        * (0.254_829_6
            + t * (-0.284_496_72 + t * (1.421_413_8 + t * (-1.453_152_1 + t * 1.061_405_4))));
    let y = 1.0 - poly * exp_f32_fast(-a * a);
    y.copysign(x)
}

/// A strided, read-only matrix view handed to [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c` where `c` is row-major `a.rows x b.cols`.
pub(crate) fn gemm<T: Scalar>(alpha: T, a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    assert!(
        a.span() <= a.data.len() && b.span() <= b.data.len(),
        "gemm operand out of bounds"
    );
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() {
                T::zero()
            } else {
                *v * beta
            };
        }
        return;
    }
    // SAFETY: bounds of all three operands were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Visit every element of `shape` in row-major order, passing the flat output
/// position and the offset computed from `src_strides`.
pub(crate) fn for_each_strided(
    shape: &[usize],
    src_strides: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let nd = shape.len();
    if nd == 0 {
        f(0, 0);
        return;
    }
    let inner = shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let outer: usize = shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    let mut out = 0usize;
    for _ in 0..outer {
        for j in 0..inner {
            f(out, base + j * inner_stride);
            out += 1;
        }
        for d in (0..nd - 1).rev() {
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < shape[d] {
                break;
            }
            base -= src_strides[d] * shape[d];
            idx[d] = 0;
        }
    }
}

/// How a right-aligned operand maps onto an output shape.
pub(crate) enum Broadcast {
    Same,
    /// Operand equals the trailing dims of the output; index is `i % len`.
    Suffix(usize),
    /// Strides into the operand, zero along broadcast axes.
    Strided(Vec<usize>),
}

pub(crate) fn broadcast_plan(out: &[usize], b: &[usize]) -> Option<Broadcast> {
    if b.len() > out.len() {
        return None;
    }
    let off = out.len() - b.len();
    for (i, &d) in b.iter().enumerate() {
        if d != out[off + i] && d != 1 {
            return None;
        }
    }
    if b == out {
        return Some(Broadcast::Same);
    }
    let numel: usize = b.iter().product();
    if b.iter().zip(&out[off..]).all(|(x, y)| x == y) {
        return Some(Broadcast::Suffix(numel));
    }
    let bs = strides(b);
    let mut st = vec![0usize; out.len()];
    for (i, &d) in b.iter().enumerate() {
        st[off + i] = if d == 1 { 0 } else { bs[i] };
    }
    Some(Broadcast::Strided(st))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "zero-sized dimension in shape {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for d in (0..shape.len()).rev() {
                idx[d] += 1;
                if idx[d] < shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Tensor { shape, data }
    }

    /// Independent uniform samples from `[lo, hi)`.
    pub fn rand_uniform<R: Rng + ?Sized>(
        shape: impl Into<Vec<usize>>,
        lo: f64,
        hi: f64,
        rng: &mut R,
    ) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::cast_from(lo + (hi - lo) * rng.random::<f64>()))
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank");
        let mut off = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < d, "index {x} out of range for axis {i} of size {d}");
            off = off * d + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", &self.shape, &[]));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        self.clone().into_reshape(shape)
    }

    pub fn into_reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape("zip_map", &self.shape, &other.shape));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::cast_from(x.as_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::cast_from(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute elementwise difference; `inf` when shapes differ.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign_tensor(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::invalid(format!(
                "permutation {perm:?} invalid for rank {nd}"
            )));
        }
        let src = strides(&self.shape);
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let st: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let mut data = vec![T::zero(); self.data.len()];
        for_each_strided(&shape, &st, |o, s| data[o] = self.data[s]);
        Ok(Tensor { shape, data })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let nd = self.shape.len();
        if nd < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(&perm)
    }

    fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Toroidal roll: `out[(i + shift) mod n] = x[i]` along `axis`.
    pub fn roll(&self, axis: usize, shift: isize) -> Self {
        let (outer, n, inner) = self.split_at_axis(axis);
        let s = shift.rem_euclid(n as isize) as usize;
        if s == 0 {
            return self.clone();
        }
        let mut data = vec![T::zero(); self.data.len()];
        for o in 0..outer {
            let base = o * n * inner;
            for i in 0..n {
                let j = (i + s) % n;
                data[base + j * inner..base + (j + 1) * inner]
                    .copy_from_slice(&self.data[base + i * inner..base + (i + 1) * inner]);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }

    /// Append `amount` zeros at the end of `axis`.
    pub fn pad_end(&self, axis: usize, amount: usize) -> Self {
        if amount == 0 {
            return self.clone();
        }
        let (outer, n, inner) = self.split_at_axis(axis);
        let m = n + amount;
        let mut data = vec![T::zero(); outer * m * inner];
        for o in 0..outer {
            data[o * m * inner..(o * m + n) * inner]
                .copy_from_slice(&self.data[o * n * inner..(o + 1) * n * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = m;
        Tensor { shape, data }
    }

    /// Keep `len` entries of `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || len == 0 || start + len > self.shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = self.split_at_axis(axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Batched matrix product. `other` is either batched with identical
    /// leading dims or a plain 2-D matrix shared by every batch entry.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let geo = MatmulGeometry::of(&self.shape, &other.shape)?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        for bi in 0..geo.batch {
            let a = MatRef::row_major(
                &self.data[bi * geo.m * geo.k..(bi + 1) * geo.m * geo.k],
                geo.m,
                geo.k,
            );
            let boff = if geo.b_shared { 0 } else { bi * geo.k * geo.n };
            let b = MatRef::row_major(&other.data[boff..boff + geo.k * geo.n], geo.k, geo.n);
            gemm(
                T::one(),
                a,
                b,
                T::zero(),
                &mut out[bi * geo.m * geo.n..(bi + 1) * geo.m * geo.n],
            );
        }
        Ok(Tensor {
            shape: geo.out_shape,
            data: out,
        })
    }

    /// Elementwise binary op where `other` broadcasts (right-aligned) to
    /// `self`'s shape.
    pub fn broadcast_zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        let plan = broadcast_plan(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape("broadcast", &self.shape, &other.shape))?;
        let mut data = Vec::with_capacity(self.data.len());
        match plan {
            Broadcast::Same => {
                data.extend(self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)))
            }
            Broadcast::Suffix(len) => {
                for chunk in self.data.chunks(len) {
                    data.extend(chunk.iter().zip(&other.data).map(|(&a, &b)| f(a, b)));
                }
            }
            Broadcast::Strided(st) => {
                data.resize(self.data.len(), T::zero());
                for_each_strided(&self.shape, &st, |o, s| {
                    data[o] = f(self.data[o], other.data[s])
                });
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Sum `self` down to `shape`, the inverse of broadcasting `shape` up to
    /// `self.shape()`.
    pub(crate) fn reduce_to(&self, shape: &[usize]) -> Tensor<T> {
        match broadcast_plan(&self.shape, shape).expect("reduce_to: incompatible shapes") {
            Broadcast::Same => self.clone(),
            Broadcast::Suffix(len) => {
                let mut acc = vec![T::zero(); len];
                for chunk in self.data.chunks(len) {
                    for (a, &g) in acc.iter_mut().zip(chunk) {
                        *a += g;
                    }
                }
                Tensor::from_parts(shape.to_vec(), acc)
            }
            Broadcast::Strided(st) => {
                let mut acc = vec![T::zero(); shape.iter().product()];
                for_each_strided(&self.shape, &st, |o, s| acc[s] += self.data[o]);
                Tensor::from_parts(shape.to_vec(), acc)
            }
        }
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = self.split_at_axis(axis);
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let src = &self.data[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (d, &s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Ok(Tensor { shape, data })
    }

    /// Repeat a size-1 `axis` `n` times (inverse of [`Tensor::sum_axis`]'s shape change).
    pub(crate) fn expand_axis(&self, axis: usize, n: usize) -> Self {
        let (outer, one, inner) = self.split_at_axis(axis);
        debug_assert_eq!(one, 1);
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let src = &self.data[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = n;
        Tensor { shape, data }
    }
}

pub(crate) struct MatmulGeometry {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_shared: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulGeometry {
    pub fn of(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let b_shared = b_batch.is_empty();
        if !b_shared && a_batch != b_batch {
            return Err(Error::shape("matmul", a, b));
        }
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(MatmulGeometry {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            b_shared,
            out_shape,
        })
    }
}
