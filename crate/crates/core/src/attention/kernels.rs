//! Fused attention kernels with hand-written adjoints.
//!
//! Both kernels work on batches of independent `[n, d]` query/key/value
//! slabs. Neither stores intermediates; backward recomputes what it needs
//! from the inputs.

use crate::nn::{sigmoid_scalar, softmax_in_place};
use crate::tensor::{gemm, MatRef, Scalar};

/// Floor applied to query/key row norms before the cosine similarity.
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

const SOFTMAX_ROW_BLOCK: usize = 32;

/// Lower clamp on the attention temperature.
pub const TAU_MIN: f64 = 0.01;

fn softplus_slice<T: Scalar>(x: &[T]) -> Vec<T> {
    let mut out = x.to_vec();
    T::softplus_in_place(&mut out);
    out
}

/// Linear-cost kernel attention over `batch` slabs of shape `[n, d]`:
/// `S = phi(K)^T V`, `z = sum_j phi(k_j)`, `out_i = phi(q_i)^T S / phi(q_i)^T z`
/// with `phi = softplus`.
pub fn kernel_attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    batch: usize,
    n: usize,
    d: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * n * d];
    let mut s = vec![T::zero(); d * d];
    for b in 0..batch {
        let r = b * n * d..(b + 1) * n * d;
        let fq = softplus_slice(&q[r.clone()]);
        let fk = softplus_slice(&k[r.clone()]);
        let vb = &v[r.clone()];
        gemm(
            T::one(),
            MatRef::row_major(&fk, n, d).t(),
            MatRef::row_major(vb, n, d),
            T::zero(),
            &mut s,
        );
        let z = column_sums(&fk, n, d);
        let ob = &mut out[r];
        gemm(
            T::one(),
            MatRef::row_major(&fq, n, d),
            MatRef::row_major(&s, d, d),
            T::zero(),
            ob,
        );
        for (orow, fqrow) in ob.chunks_mut(d).zip(fq.chunks(d)) {
            let den: T = fqrow.iter().zip(&z).map(|(&a, &b)| a * b).sum();
            let inv = T::one() / den;
            for o in orow {
                *o *= inv;
            }
        }
    }
    out
}

fn column_sums<T: Scalar>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let mut z = vec![T::zero(); d];
    for row in x.chunks(d).take(n) {
        for (a, &b) in z.iter_mut().zip(row) {
            *a += b;
        }
    }
    z
}

/// Adjoint of [`kernel_attention_forward`]; returns `(dq, dk, dv)`.
pub fn kernel_attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    g: &[T],
    batch: usize,
    n: usize,
    d: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let len = batch * n * d;
    let (mut dq, mut dk, mut dv) = (
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
    );
    let mut s = vec![T::zero(); d * d];
    let mut ds = vec![T::zero(); d * d];
    let mut num = vec![T::zero(); n * d];
    let mut dnum = vec![T::zero(); n * d];
    let mut dden = vec![T::zero(); n];
    for b in 0..batch {
        let r = b * n * d..(b + 1) * n * d;
        let (qb, kb, vb, gb) = (&q[r.clone()], &k[r.clone()], &v[r.clone()], &g[r.clone()]);
        let fq = softplus_slice(qb);
        let fk = softplus_slice(kb);
        gemm(
            T::one(),
            MatRef::row_major(&fk, n, d).t(),
            MatRef::row_major(vb, n, d),
            T::zero(),
            &mut s,
        );
        let z = column_sums(&fk, n, d);
        gemm(
            T::one(),
            MatRef::row_major(&fq, n, d),
            MatRef::row_major(&s, d, d),
            T::zero(),
            &mut num,
        );

        // out_i = num_i / den_i
        for i in 0..n {
            let fqrow = &fq[i * d..(i + 1) * d];
            let den: T = fqrow.iter().zip(&z).map(|(&a, &b)| a * b).sum();
            let inv = T::one() / den;
            let grow = &gb[i * d..(i + 1) * d];
            let nrow = &num[i * d..(i + 1) * d];
            let mut dot = T::zero();
            for j in 0..d {
                dnum[i * d + j] = grow[j] * inv;
                dot += grow[j] * nrow[j];
            }
            dden[i] = -dot * inv * inv;
        }

        // phi(Q) gradient: dnum S^T + dden z^T
        let dqb = &mut dq[r.clone()];
        gemm(
            T::one(),
            MatRef::row_major(&dnum, n, d),
            MatRef::row_major(&s, d, d).t(),
            T::zero(),
            dqb,
        );
        for i in 0..n {
            for j in 0..d {
                dqb[i * d + j] += dden[i] * z[j];
            }
        }
        // dS = phi(Q)^T dnum, dz = phi(Q)^T dden
        gemm(
            T::one(),
            MatRef::row_major(&fq, n, d).t(),
            MatRef::row_major(&dnum, n, d),
            T::zero(),
            &mut ds,
        );
        let mut dz = vec![T::zero(); d];
        for i in 0..n {
            for j in 0..d {
                dz[j] += fq[i * d + j] * dden[i];
            }
        }
        // phi(K) gradient: V dS^T + 1 dz^T ; dV = phi(K) dS
        let dkb = &mut dk[r.clone()];
        gemm(
            T::one(),
            MatRef::row_major(vb, n, d),
            MatRef::row_major(&ds, d, d).t(),
            T::zero(),
            dkb,
        );
        for row in dkb.chunks_mut(d) {
            for (a, &b) in row.iter_mut().zip(&dz) {
                *a += b;
            }
        }
        gemm(
            T::one(),
            MatRef::row_major(&fk, n, d),
            MatRef::row_major(&ds, d, d),
            T::zero(),
            &mut dv[r.clone()],
        );

        for (gq, &x) in dqb.iter_mut().zip(qb) {
            *gq *= sigmoid_scalar(x);
        }
        for (gk, &x) in dk[r].iter_mut().zip(kb) {
            *gk *= sigmoid_scalar(x);
        }
    }
    (dq, dk, dv)
}

/// Shapes for [`window_softmax_forward`]: `batch` windows, `heads` heads,
/// `n` tokens per window, `d` channels per head. `mask_windows` is the
/// number of distinct masks (window `b` uses mask `b % mask_windows`).
#[derive(Clone, Copy, Debug)]
pub struct SoftmaxDims {
    pub batch: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
    pub mask_windows: usize,
}

pub(crate) fn inverse_temperature<T: Scalar>(log_tau: T) -> (T, bool) {
    let e = log_tau.exp();
    let min = T::cast_from(TAU_MIN);
    if e > min {
        (T::one() / e, false)
    } else {
        (T::one() / min, true)
    }
}

fn normalize_rows<T: Scalar>(x: &[T], d: usize) -> (Vec<T>, Vec<T>) {
    let floor = T::cast_from(COSINE_NORM_FLOOR);
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / d);
    for row in out.chunks_mut(d) {
        let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        let r = nrm.max(floor);
        norms.push(nrm);
        for v in row {
            *v /= r;
        }
    }
    (out, norms)
}

/// Build the pre-softmax scores for a block of query rows of one
/// (window, head) into `s`: `s = cos(Q, K) / tau + bias + mask`. `bias` and
/// `mask` hold the matching rows.
#[allow(clippy::too_many_arguments)]
fn scores<T: Scalar>(
    qn: &[T],
    kn: &[T],
    inv_tau: T,
    bias: Option<&[T]>,
    mask: Option<&[T]>,
    n: usize,
    d: usize,
    s: &mut [T],
) {
    let beta = match (bias, mask) {
        (None, None) => T::zero(),
        _ => {
            match bias {
                Some(bh) => s.copy_from_slice(bh),
                None => s.fill(T::zero()),
            }
            if let Some(m) = mask {
                for (a, &b) in s.iter_mut().zip(m) {
                    *a += b;
                }
            }
            T::one()
        }
    };
    let rows = qn.len() / d;
    gemm(
        inv_tau,
        MatRef::row_major(qn, rows, d),
        MatRef::row_major(kn, n, d).t(),
        beta,
        s,
    );
}

/// Windowed multi-head softmax attention with cosine similarity, a learned
/// per-head temperature and an additive per-head bias.
///
/// `q`, `k`, `v` are `[batch, heads, n, d]`; `bias` is `[heads, n, n]`;
/// `log_tau` is `[heads]`; `mask` is `[mask_windows, n, n]`.
pub fn window_softmax_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    log_tau: &[T],
    mask: Option<&[T]>,
    dims: SoftmaxDims,
) -> Vec<T> {
    let SoftmaxDims {
        batch,
        heads,
        n,
        d,
        mask_windows,
    } = dims;
    let mut out = vec![T::zero(); batch * heads * n * d];
    let mut qn = vec![T::zero(); q.len()];
    let mut kn = vec![T::zero(); k.len()];
    for (bh, (qs, ks)) in q.chunks(n * d).zip(k.chunks(n * d)).enumerate() {
        let r = bh * n * d..(bh + 1) * n * d;
        qn[r.clone()].copy_from_slice(&normalize_rows(qs, d).0);
        kn[r].copy_from_slice(&normalize_rows(ks, d).0);
    }
    // Query rows go in blocks so the score block stays in cache. Row blocks
    // are the outer loop so the matching bias rows of every head and mask
    // rows of each window are reused while still cached.
    let rb = n.min(SOFTMAX_ROW_BLOCK);
    let mut s = vec![T::zero(); rb * n];
    let mut inv_sums = vec![T::zero(); rb];
    let inv_taus: Vec<T> = log_tau
        .iter()
        .map(|&lt| inverse_temperature(lt).0)
        .collect();
    for r0 in (0..n).step_by(rb) {
        let rows = rb.min(n - r0);
        let cells = r0 * n..(r0 + rows) * n;
        let sb = &mut s[..rows * n];
        for b in 0..batch {
            let mw = b % mask_windows;
            for (h, &inv_tau) in inv_taus.iter().enumerate() {
                let bh = bias.map(|bb| &bb[h * n * n..(h + 1) * n * n]);
                let base = (b * heads + h) * n * d;
                let r = base..base + n * d;
                scores(
                    &qn[base + r0 * d..base + (r0 + rows) * d],
                    &kn[r.clone()],
                    inv_tau,
                    bh.map(|x| &x[cells.clone()]),
                    mask.map(|m| &m[mw * n * n..(mw + 1) * n * n][cells.clone()]),
                    n,
                    d,
                    sb,
                );
                for (row, inv) in sb.chunks_mut(n).zip(inv_sums.iter_mut()) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    *inv = T::one() / T::exp_shift_sum(row, max);
                }
                let oblk = &mut out[base + r0 * d..base + (r0 + rows) * d];
                gemm(
                    T::one(),
                    MatRef::row_major(sb, rows, n),
                    MatRef::row_major(&v[r], n, d),
                    T::zero(),
                    oblk,
                );
                for (orow, &inv) in oblk.chunks_mut(d).zip(&inv_sums) {
                    for o in orow {
                        *o *= inv;
                    }
                }
            }
        }
    }
    out
}

pub struct SoftmaxGrads<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
    pub dbias: Vec<T>,
    pub dlog_tau: Vec<T>,
}

/// Adjoint of [`window_softmax_forward`].
#[allow(clippy::too_many_arguments)]
pub fn window_softmax_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    bias: Option<&[T]>,
    log_tau: &[T],
    mask: Option<&[T]>,
    g: &[T],
    dims: SoftmaxDims,
) -> SoftmaxGrads<T> {
    let SoftmaxDims {
        batch,
        heads,
        n,
        d,
        mask_windows,
    } = dims;
    let len = batch * heads * n * d;
    let mut grads = SoftmaxGrads {
        dq: vec![T::zero(); len],
        dk: vec![T::zero(); len],
        dv: vec![T::zero(); len],
        dbias: vec![T::zero(); heads * n * n],
        dlog_tau: vec![T::zero(); heads],
    };
    let mut dinv = vec![T::zero(); heads];
    let mut p = vec![T::zero(); n * n];
    let mut cos = vec![T::zero(); n * n];
    let mut dp = vec![T::zero(); n * n];
    let mut dqn = vec![T::zero(); n * d];
    let mut dkn = vec![T::zero(); n * d];
    let floor = T::cast_from(COSINE_NORM_FLOOR);
    for b in 0..batch {
        let mb = mask.map(|m| &m[(b % mask_windows) * n * n..(b % mask_windows + 1) * n * n]);
        for h in 0..heads {
            let r = (b * heads + h) * n * d..(b * heads + h + 1) * n * d;
            let (qn, qnorm) = normalize_rows(&q[r.clone()], d);
            let (kn, knorm) = normalize_rows(&k[r.clone()], d);
            let (inv_tau, _) = inverse_temperature(log_tau[h]);
            let bh = bias.map(|bb| &bb[h * n * n..(h + 1) * n * n]);
            gemm(
                T::one(),
                MatRef::row_major(&qn, n, d),
                MatRef::row_major(&kn, n, d).t(),
                T::zero(),
                &mut cos,
            );
            scores(&qn, &kn, inv_tau, bh, mb, n, d, &mut p);
            for row in p.chunks_mut(n) {
                softmax_in_place(row);
            }
            let gb = &g[r.clone()];
            let vb = &v[r.clone()];
            // dV = P^T G ; dP = G V^T
            gemm(
                T::one(),
                MatRef::row_major(&p, n, n).t(),
                MatRef::row_major(gb, n, d),
                T::zero(),
                &mut grads.dv[r.clone()],
            );
            gemm(
                T::one(),
                MatRef::row_major(gb, n, d),
                MatRef::row_major(vb, n, d).t(),
                T::zero(),
                &mut dp,
            );
            // dS = P * (dP - rowdot(dP, P)), stored in dp
            for (dprow, prow) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: T = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pv) in dprow.iter_mut().zip(prow) {
                    *x = pv * (*x - dot);
                }
            }
            if bias.is_some() {
                for (a, &x) in grads.dbias[h * n * n..(h + 1) * n * n].iter_mut().zip(&dp) {
                    *a += x;
                }
            }
            dinv[h] += dp.iter().zip(&cos).map(|(&a, &c)| a * c).sum::<T>();
            gemm(
                inv_tau,
                MatRef::row_major(&dp, n, n),
                MatRef::row_major(&kn, n, d),
                T::zero(),
                &mut dqn,
            );
            gemm(
                inv_tau,
                MatRef::row_major(&dp, n, n).t(),
                MatRef::row_major(&qn, n, d),
                T::zero(),
                &mut dkn,
            );
            normalize_backward(&qn, &qnorm, &dqn, d, floor, &mut grads.dq[r.clone()]);
            normalize_backward(&kn, &knorm, &dkn, d, floor, &mut grads.dk[r]);
        }
    }
    for h in 0..heads {
        let (inv_tau, clamped) = inverse_temperature(log_tau[h]);
        // inv = exp(-log_tau) when unclamped.
        grads.dlog_tau[h] = if clamped {
            T::zero()
        } else {
            -dinv[h] * inv_tau
        };
    }
    grads
}

fn normalize_backward<T: Scalar>(
    xn: &[T],
    norms: &[T],
    dxn: &[T],
    d: usize,
    floor: T,
    dx: &mut [T],
) {
    for (i, &nrm) in norms.iter().enumerate() {
        let row = i * d..(i + 1) * d;
        let (xr, gr) = (&xn[row.clone()], &dxn[row.clone()]);
        let out = &mut dx[row];
        if nrm > floor {
            let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
            for j in 0..d {
                out[j] = (gr[j] - xr[j] * dot) / nrm;
            }
        } else {
            for j in 0..d {
                out[j] = gr[j] / floor;
            }
        }
    }
}

/// Expand a `[(2M-1)^2, heads]` relative position table into per-head
/// `[heads, M*M, M*M]` biases.
pub fn relative_bias_forward<T: Scalar>(table: &[T], m: usize, heads: usize) -> Vec<T> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut out = vec![T::zero(); heads * n * n];
    let mut col = vec![T::zero(); side * side];
    for h in 0..heads {
        for (c, row) in col.iter_mut().zip(table.chunks(heads)) {
            *c = row[h];
        }
        let plane = &mut out[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let (yi, xi) = (i / m, i % m);
            for yj in 0..m {
                // Offsets for xj = 0..m run backwards from `base`.
                let base = (yi + m - 1 - yj) * side + xi + m - 1;
                let dst = &mut plane[i * n + yj * m..i * n + (yj + 1) * m];
                for (xj, o) in dst.iter_mut().enumerate() {
                    *o = col[base - xj];
                }
            }
        }
    }
    out
}

/// Adjoint of [`relative_bias_forward`]: scatter-add into the table.
pub fn relative_bias_backward<T: Scalar>(g: &[T], m: usize, heads: usize) -> Vec<T> {
    let n = m * m;
    let side = 2 * m - 1;
    let mut dt = vec![T::zero(); side * side * heads];
    for h in 0..heads {
        let plane = &g[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let (yi, xi) = (i / m, i % m);
            for (j, &gv) in plane[i * n..(i + 1) * n].iter().enumerate() {
                let (yj, xj) = (j / m, j % m);
                let idx = (yi + m - 1 - yj) * side + (xi + m - 1 - xj);
                dt[idx * heads + h] += gv;
            }
        }
    }
    dt
}
