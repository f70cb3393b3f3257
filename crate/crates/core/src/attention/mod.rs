//! Window attention: the quadratic softmax reference, a brute-force kernel
//! attention oracle, the linear-cost kernel attention, and multi-head
//! wrappers over all of them.

pub mod kernels;

use crate::autodiff::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use kernels::SoftmaxDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub window_side: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl AttentionConfig {
    pub fn new(window_side: usize, num_heads: usize, embed_dim: usize) -> Result<Self> {
        if window_side == 0 || num_heads == 0 || embed_dim == 0 {
            return Err(Error::invalid("attention sizes must be positive"));
        }
        if embed_dim % num_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {embed_dim} is not divisible by num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig {
            window_side,
            num_heads,
            head_dim: embed_dim / num_heads,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.window_side * self.window_side
    }
}

/// Projections for kernel attention. `x · W` convention, no biases.
#[derive(Clone, Debug)]
pub struct KernelAttentionParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
}

/// Projections plus the relative position bias table
/// `[(2M-1)^2, heads]` and per-head log temperatures `[heads]`.
#[derive(Clone, Debug)]
pub struct SoftmaxAttentionParams<P> {
    pub w_q: P,
    pub w_k: P,
    pub w_v: P,
    pub w_o: P,
    pub bias_table: P,
    pub log_tau: P,
}

/// For every (query, key) pair of an `M x M` window in row-major order, the
/// row of the bias table holding their offset.
pub fn relative_position_index(m: usize) -> Vec<usize> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / m, i % m);
        for j in 0..n {
            let (yj, xj) = (j / m, j % m);
            let dy = yi + m - 1 - yj;
            let dx = xi + m - 1 - xj;
            idx.push(dy * side + dx);
        }
    }
    idx
}

/// Gather a `[(2M-1)^2, heads]` bias table into `[heads, M*M, M*M]`
/// per-pair biases, using [`relative_position_index`] ordering.
pub fn relative_position_bias<T: Scalar>(
    tape: &Tape<T>,
    table: &Var<T>,
    m: usize,
) -> Result<Var<T>> {
    let s = table.shape();
    let side = 2 * m - 1;
    if m == 0 || s.len() != 2 || s[0] != side * side {
        return Err(Error::invalid(format!(
            "bias table {s:?} does not fit a {m}x{m} window"
        )));
    }
    let heads = s[1];
    let n = m * m;
    let out = Tensor::new(
        vec![heads, n, n],
        kernels::relative_bias_forward(table.value().data(), m, heads),
    )?;
    Ok(tape.record(out, &[table], || Op::RelativeBias { m, heads }))
}

fn slab_dims(op: &'static str, q: &[usize], k: &[usize], v: &[usize]) -> Result<(usize, usize)> {
    if q.len() < 2 || q != k || q != v {
        return Err(Error::shape(op, q, if q != k { k } else { v }));
    }
    Ok((q[q.len() - 2], q[q.len() - 1]))
}

/// Linear-cost kernel attention over the last two axes `[.., n, d]`.
/// Never forms the `n x n` weight matrix.
pub fn kernel_attention_linear<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
) -> Result<Var<T>> {
    let (n, d) = slab_dims("kernel_attention_linear", q.shape(), k.shape(), v.shape())?;
    let batch = q.value().numel() / (n * d);
    let out = kernels::kernel_attention_forward(
        q.value().data(),
        k.value().data(),
        v.value().data(),
        batch,
        n,
        d,
    );
    let out = Tensor::new(q.shape().to_vec(), out)?;
    Ok(tape.record(out, &[q, k, v], || Op::KernelAttention {
        q: q.shared(),
        k: k.shared(),
        v: v.shared(),
    }))
}

/// Kernel attention with the weight matrix written out explicitly. Quadratic
/// in `n`; used as a correctness reference.
pub fn kernel_attention_bruteforce<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
) -> Result<Var<T>> {
    slab_dims(
        "kernel_attention_bruteforce",
        q.shape(),
        k.shape(),
        v.shape(),
    )?;
    let fq = tape.softplus(q);
    let fk = tape.softplus(k);
    let sim = tape.matmul(&fq, &tape.transpose(&fk)?)?;
    let den = tape.sum_axis(&sim, sim.shape().len() - 1)?;
    let w = tape.div(&sim, &den)?;
    tape.matmul(&w, v)
}

/// Fused multi-head cosine softmax attention. `q`, `k`, `v` are
/// `[batch, heads, n, d]`; `bias` is `[heads, n, n]`; `log_tau` is
/// `[heads]`; `mask` is `[mask_windows, n, n]` where window `b` uses mask
/// `b % mask_windows`.
pub fn window_softmax<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    bias: Option<&Var<T>>,
    log_tau: &Var<T>,
    mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let s = q.shape();
    if s.len() != 4 || k.shape() != s || v.shape() != s {
        return Err(Error::shape("window_softmax", s, k.shape()));
    }
    let (batch, heads, n, d) = (s[0], s[1], s[2], s[3]);
    if log_tau.shape() != [heads] {
        return Err(Error::shape("window_softmax log_tau", s, log_tau.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [heads, n, n] {
            return Err(Error::shape("window_softmax bias", s, b.shape()));
        }
    }
    let mask_windows = match mask {
        Some(m) => {
            let ms = m.shape();
            if ms.len() != 3 || ms[1] != n || ms[2] != n || batch % ms[0] != 0 {
                return Err(Error::shape("window_softmax mask", s, ms));
            }
            ms[0]
        }
        None => 1,
    };
    let dims = SoftmaxDims {
        batch,
        heads,
        n,
        d,
        mask_windows,
    };
    let out = kernels::window_softmax_forward(
        q.value().data(),
        k.value().data(),
        v.value().data(),
        bias.map(|b| b.value().data()),
        log_tau.value().data(),
        mask.map(|m| m.data()),
        dims,
    );
    let out = Tensor::new(s.to_vec(), out)?;
    let mut inputs = vec![q, k, v];
    inputs.extend(bias);
    inputs.push(log_tau);
    Ok(tape.record(out, &inputs, || Op::WindowSoftmax {
        q: q.shared(),
        k: k.shared(),
        v: v.shared(),
        bias: bias.map(Var::shared),
        log_tau: log_tau.shared(),
        mask: mask.map(|m| std::sync::Arc::new(m.clone())),
        dims,
    }))
}

/// Single-head softmax attention on one window: `q`, `k`, `v` are `[n, d]`,
/// `bias` is `[n, n]`, `log_tau` has one element.
pub fn softmax_window_attention<T: Scalar>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    bias: Option<&Var<T>>,
    log_tau: &Var<T>,
) -> Result<Var<T>> {
    let (n, d) = slab_dims("softmax_window_attention", q.shape(), k.shape(), v.shape())?;
    if q.shape().len() != 2 {
        return Err(Error::invalid(
            "softmax_window_attention expects [n, d] inputs",
        ));
    }
    let q4 = tape.reshape(q, [1, 1, n, d])?;
    let k4 = tape.reshape(k, [1, 1, n, d])?;
    let v4 = tape.reshape(v, [1, 1, n, d])?;
    let b3 = bias.map(|b| tape.reshape(b, [1, n, n])).transpose()?;
    let lt = tape.reshape(log_tau, [1])?;
    let out = window_softmax(tape, &q4, &k4, &v4, b3.as_ref(), &lt, None)?;
    tape.reshape(&out, [n, d])
}

/// Project `[B, n, D]` tokens and split into `[B, H, n, d]` heads.
fn split_heads<T: Scalar>(tape: &Tape<T>, x: &Var<T>, w: &Var<T>, heads: usize) -> Result<Var<T>> {
    let s = x.shape();
    let (b, n, dm) = (s[0], s[1], s[2]);
    let p = tape.matmul(x, w)?;
    let p = tape.reshape(&p, [b, n, heads, dm / heads])?;
    tape.permute(&p, &[0, 2, 1, 3])
}

fn merge_heads<T: Scalar>(tape: &Tape<T>, x: &Var<T>, w_o: &Var<T>) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    let m = tape.permute(x, &[0, 2, 1, 3])?;
    let m = tape.reshape(&m, [b, n, h * d])?;
    tape.matmul(&m, w_o)
}

/// Accept `[n, D]` or `[B, n, D]`; returns the 3-D view and whether the
/// input was 2-D.
fn as_batched<T: Scalar>(tape: &Tape<T>, x: &Var<T>, heads: usize) -> Result<(Var<T>, bool)> {
    let s = x.shape();
    let (x3, squeezed) = match s.len() {
        2 => (tape.reshape(x, [1, s[0], s[1]])?, true),
        3 => (x.clone(), false),
        _ => {
            return Err(Error::invalid(format!(
                "attention input must be [n, D] or [B, n, D], got {s:?}"
            )))
        }
    };
    let dm = x3.shape()[2];
    if heads == 0 || dm % heads != 0 {
        return Err(Error::invalid(format!(
            "embed_dim {dm} is not divisible by num_heads {heads}"
        )));
    }
    Ok((x3, squeezed))
}

fn unbatch<T: Scalar>(tape: &Tape<T>, y: Var<T>, squeezed: bool) -> Result<Var<T>> {
    if squeezed {
        let s = y.shape().to_vec();
        tape.reshape(&y, [s[1], s[2]])
    } else {
        Ok(y)
    }
}

/// Multi-head kernel attention over windows of tokens.
pub fn multi_head_kernel_attention<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    params: &KernelAttentionParams<Var<T>>,
    num_heads: usize,
) -> Result<Var<T>> {
    let (x3, squeezed) = as_batched(tape, x, num_heads)?;
    let q = split_heads(tape, &x3, &params.w_q, num_heads)?;
    let k = split_heads(tape, &x3, &params.w_k, num_heads)?;
    let v = split_heads(tape, &x3, &params.w_v, num_heads)?;
    let a = kernel_attention_linear(tape, &q, &k, &v)?;
    unbatch(tape, merge_heads(tape, &a, &params.w_o)?, squeezed)
}

/// Multi-head softmax attention with relative position bias over windows
/// of `window_side^2` tokens. `mask` is additive, `[n, n]` or
/// `[mask_windows, n, n]`.
pub fn multi_head_softmax_attention<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    params: &SoftmaxAttentionParams<Var<T>>,
    num_heads: usize,
    window_side: usize,
    mask: Option<&Tensor<T>>,
) -> Result<Var<T>> {
    let (x3, squeezed) = as_batched(tape, x, num_heads)?;
    let n = x3.shape()[1];
    if n != window_side * window_side {
        return Err(Error::invalid(format!(
            "{n} tokens do not form a {window_side}x{window_side} window"
        )));
    }
    let side = 2 * window_side - 1;
    if params.bias_table.shape() != [side * side, num_heads] {
        return Err(Error::shape(
            "bias_table",
            &[side * side, num_heads],
            params.bias_table.shape(),
        ));
    }
    let mask3;
    let mask = match mask {
        Some(m) if m.ndim() == 2 => {
            mask3 = m.reshape([1, m.dim(0), m.dim(1)])?;
            Some(&mask3)
        }
        other => other,
    };
    let bias = relative_position_bias(tape, &params.bias_table, window_side)?;
    let q = split_heads(tape, &x3, &params.w_q, num_heads)?;
    let k = split_heads(tape, &x3, &params.w_k, num_heads)?;
    let v = split_heads(tape, &x3, &params.w_v, num_heads)?;
    let a = window_softmax(tape, &q, &k, &v, Some(&bias), &params.log_tau, mask)?;
    unbatch(tape, merge_heads(tape, &a, &params.w_o)?, squeezed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        Tensor::rand_uniform(
            shape.to_vec(),
            -1.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn relative_index_corners() {
        let idx = relative_position_index(2);
        // token 0 = (0,0), token 3 = (1,1)
        assert_eq!(idx[0], 4); // offset (0,0) -> (1)(3)+(1)
        assert_eq!(idx[3], 0); // (0,0)-(1,1) = (-1,-1)
        assert_eq!(idx[3 * 4], 8); // (1,1)-(0,0) = (1,1)
        assert_eq!(relative_position_index(1), vec![0]);
    }

    #[test]
    fn fused_bias_matches_gather() {
        let t = Tape::<f64>::no_grad();
        let m = 3;
        let table = t.constant(rand(&[25, 2], 8));
        let fused = relative_position_bias(&t, &table, m).unwrap();
        let g = t.index_select(&table, &relative_position_index(m)).unwrap();
        let g = t
            .permute(&t.reshape(&g, [9, 9, 2]).unwrap(), &[2, 0, 1])
            .unwrap();
        assert_eq!(fused.value(), g.value());
    }

    #[test]
    fn singleton_window_returns_v() {
        let t = Tape::<f64>::no_grad();
        let q = t.constant(rand(&[1, 5], 1));
        let k = t.constant(rand(&[1, 5], 2));
        let v = t.constant(rand(&[1, 5], 3));
        let lin = kernel_attention_linear(&t, &q, &k, &v).unwrap();
        assert!(lin.value().max_abs_diff(v.value()) < 1e-15);
        let lt = t.constant(Tensor::zeros([1]));
        let sm = softmax_window_attention(&t, &q, &k, &v, None, &lt).unwrap();
        assert!(sm.value().max_abs_diff(v.value()) < 1e-15);
    }

    #[test]
    fn linear_matches_bruteforce() {
        let t = Tape::<f64>::no_grad();
        let q = t.constant(rand(&[16, 8], 4));
        let k = t.constant(rand(&[16, 8], 5));
        let v = t.constant(rand(&[16, 8], 6));
        let a = kernel_attention_linear(&t, &q, &k, &v).unwrap();
        let b = kernel_attention_bruteforce(&t, &q, &k, &v).unwrap();
        assert!(a.value().max_abs_diff(b.value()) < 1e-10);
    }

    #[test]
    fn head_count_must_divide() {
        let t = Tape::<f64>::no_grad();
        let w = t.constant(Tensor::zeros([6, 6]));
        let p = KernelAttentionParams {
            w_q: w.clone(),
            w_k: w.clone(),
            w_v: w.clone(),
            w_o: w,
        };
        let x = t.constant(Tensor::zeros([4, 6]));
        assert!(multi_head_kernel_attention(&t, &x, &p, 4).is_err());
        assert!(AttentionConfig::new(4, 4, 6).is_err());
    }
}
