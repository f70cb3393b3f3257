use std::sync::Arc;

use super::{Tape, Var};
use crate::attention::kernels::{self, SoftmaxDims};
use crate::error::{Error, Result};
use crate::nn::{self, ConvGeometry, LayerNormCache};
use crate::tensor::{broadcast_plan, gemm, MatRef, MatmulGeometry, Scalar, Tensor};

type Shared<T> = Arc<Tensor<T>>;

/// A recorded operation and whatever it saved for its adjoint.
pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add {
        b_shape: Vec<usize>,
    },
    Sub {
        b_shape: Vec<usize>,
    },
    Mul {
        a: Shared<T>,
        b: Shared<T>,
    },
    Div {
        a: Shared<T>,
        b: Shared<T>,
    },
    Scale(T),
    Matmul {
        a: Shared<T>,
        b: Shared<T>,
    },
    Permute(Vec<usize>),
    Reshape(Vec<usize>),
    Roll {
        axis: usize,
        shift: isize,
    },
    PadEnd {
        axis: usize,
        len: usize,
    },
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    SumAll(Vec<usize>),
    MeanAll(Vec<usize>),
    SumAxis {
        axis: usize,
        len: usize,
    },
    Abs(Shared<T>),
    Exp(Shared<T>),
    Softplus(Shared<T>),
    Gelu(Shared<T>),
    SoftmaxRows(Shared<T>),
    LayerNorm {
        cache: LayerNormCache<T>,
        gamma: Shared<T>,
    },
    Conv2d {
        cols: Vec<T>,
        w: Shared<T>,
        geo: ConvGeometry,
    },
    IndexSelect {
        indices: Vec<usize>,
        rows: usize,
    },
    KernelAttention {
        q: Shared<T>,
        k: Shared<T>,
        v: Shared<T>,
    },
    RelativeBias {
        m: usize,
        heads: usize,
    },
    WindowSoftmax {
        q: Shared<T>,
        k: Shared<T>,
        v: Shared<T>,
        bias: Option<Shared<T>>,
        log_tau: Shared<T>,
        mask: Option<Shared<T>>,
        dims: SoftmaxDims,
    },
}

fn zeros_with_slice<T: Scalar>(g: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let shape = g.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let mut data = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        let dst = (o * len + start) * inner;
        data[dst..dst + n * inner].copy_from_slice(&g.data()[o * n * inner..(o + 1) * n * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = len;
    Tensor::from_parts(s, data)
}

impl<T: Scalar> Op<T> {
    /// Gradients for each input given the output gradient `g`. Entries for
    /// inputs with `needs[i] == false` may be `None`.
    pub(crate) fn backward(&self, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Leaf => vec![],
            Op::Add { b_shape } => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| g.reduce_to(b_shape)),
            ],
            Op::Sub { b_shape } => vec![
                want(0).then(|| g.clone()),
                want(1).then(|| g.reduce_to(b_shape).map(|x| -x)),
            ],
            Op::Mul { a, b } => vec![
                want(0).then(|| g.broadcast_zip(b, |x, y| x * y).unwrap()),
                want(1).then(|| g.zip_map(a, |x, y| x * y).unwrap().reduce_to(b.shape())),
            ],
            Op::Div { a, b } => vec![
                want(0).then(|| g.broadcast_zip(b, |x, y| x / y).unwrap()),
                want(1).then(|| {
                    g.zip_map(a, |x, y| x * y)
                        .unwrap()
                        .broadcast_zip(b, |x, y| -x / (y * y))
                        .unwrap()
                        .reduce_to(b.shape())
                }),
            ],
            Op::Scale(c) => vec![Some(g.map(|x| x * *c))],
            Op::Matmul { a, b } => matmul_backward(a, b, g, want(0), want(1)),
            Op::Permute(perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(g.permute(&inv).unwrap())]
            }
            Op::Reshape(shape) => vec![Some(g.reshape(shape.clone()).unwrap())],
            Op::Roll { axis, shift } => vec![Some(g.roll(*axis, -shift))],
            Op::PadEnd { axis, len } => vec![Some(g.narrow(*axis, 0, *len).unwrap())],
            Op::Narrow { axis, start, len } => vec![Some(zeros_with_slice(g, *axis, *start, *len))],
            Op::SumAll(shape) => vec![Some(Tensor::full(shape.clone(), g.data()[0]))],
            Op::MeanAll(shape) => {
                let n = T::cast_from(shape.iter().product::<usize>() as f64);
                vec![Some(Tensor::full(shape.clone(), g.data()[0] / n))]
            }
            Op::SumAxis { axis, len } => vec![Some(g.expand_axis(*axis, *len))],
            Op::Abs(x) => vec![Some(
                g.zip_map(x, |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                })
                .unwrap(),
            )],
            Op::Exp(y) => vec![Some(g.zip_map(y, |gv, yv| gv * yv).unwrap())],
            Op::Softplus(x) => vec![Some(
                g.zip_map(x, |gv, xv| gv * nn::sigmoid_scalar(xv)).unwrap(),
            )],
            Op::Gelu(x) => vec![Some(
                g.zip_map(x, |gv, xv| gv * nn::gelu_grad_scalar(xv))
                    .unwrap(),
            )],
            Op::SoftmaxRows(y) => vec![Some(nn::softmax_rows_backward(y, g))],
            Op::LayerNorm { cache, gamma } => {
                let (dx, dg, db) = nn::layer_norm_backward(cache, gamma, g);
                vec![Some(dx), Some(dg), Some(db)]
            }
            Op::Conv2d { cols, w, geo } => {
                let (dx, dw, db) = nn::conv2d_backward(cols, w, geo, g, want(0));
                vec![
                    dx.map(|d| Tensor::from_parts(vec![geo.c_in, geo.h, geo.w], d)),
                    Some(Tensor::from_parts(w.shape().to_vec(), dw)),
                    Some(Tensor::from_parts(vec![geo.c_out], db)),
                ]
            }
            Op::IndexSelect { indices, rows } => {
                let cols = g.numel() / indices.len();
                let mut out = vec![T::zero(); rows * cols];
                for (i, &r) in indices.iter().enumerate() {
                    for (o, &gv) in out[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g.data()[i * cols..(i + 1) * cols])
                    {
                        *o += gv;
                    }
                }
                vec![Some(Tensor::from_parts(vec![*rows, cols], out))]
            }
            Op::KernelAttention { q, k, v } => {
                let (n, d) = last2(q.shape());
                let batch = q.numel() / (n * d);
                let (dq, dk, dv) = kernels::kernel_attention_backward(
                    q.data(),
                    k.data(),
                    v.data(),
                    g.data(),
                    batch,
                    n,
                    d,
                );
                let s = q.shape().to_vec();
                vec![
                    Some(Tensor::from_parts(s.clone(), dq)),
                    Some(Tensor::from_parts(s.clone(), dk)),
                    Some(Tensor::from_parts(s, dv)),
                ]
            }
            Op::RelativeBias { m, heads } => {
                let side = 2 * m - 1;
                vec![Some(Tensor::from_parts(
                    vec![side * side, *heads],
                    kernels::relative_bias_backward(g.data(), *m, *heads),
                ))]
            }
            Op::WindowSoftmax {
                q,
                k,
                v,
                bias,
                log_tau,
                mask,
                dims,
            } => {
                let gr = kernels::window_softmax_backward(
                    q.data(),
                    k.data(),
                    v.data(),
                    bias.as_ref().map(|b| b.data()),
                    log_tau.data(),
                    mask.as_ref().map(|m| m.data()),
                    g.data(),
                    *dims,
                );
                let s = q.shape().to_vec();
                let mut out = vec![
                    Some(Tensor::from_parts(s.clone(), gr.dq)),
                    Some(Tensor::from_parts(s.clone(), gr.dk)),
                    Some(Tensor::from_parts(s, gr.dv)),
                ];
                if let Some(b) = bias {
                    out.push(Some(Tensor::from_parts(b.shape().to_vec(), gr.dbias)));
                }
                out.push(Some(Tensor::from_parts(
                    log_tau.shape().to_vec(),
                    gr.dlog_tau,
                )));
                out
            }
        }
    }
}

fn last2(shape: &[usize]) -> (usize, usize) {
    (shape[shape.len() - 2], shape[shape.len() - 1])
}

fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> Vec<Option<Tensor<T>>> {
    let geo = MatmulGeometry::of(a.shape(), b.shape()).expect("shapes validated in forward");
    let (m, k, n) = (geo.m, geo.k, geo.n);
    let mut ga = want_a.then(|| vec![T::zero(); a.numel()]);
    let mut gb = want_b.then(|| vec![T::zero(); b.numel()]);
    for bi in 0..geo.batch {
        let gm = MatRef::row_major(&g.data()[bi * m * n..(bi + 1) * m * n], m, n);
        let am = MatRef::row_major(&a.data()[bi * m * k..(bi + 1) * m * k], m, k);
        let boff = if geo.b_shared { 0 } else { bi * k * n };
        let bm = MatRef::row_major(&b.data()[boff..boff + k * n], k, n);
        if let Some(ga) = ga.as_mut() {
            gemm(
                T::one(),
                gm,
                bm.t(),
                T::zero(),
                &mut ga[bi * m * k..(bi + 1) * m * k],
            );
        }
        if let Some(gb) = gb.as_mut() {
            let beta = if geo.b_shared && bi > 0 {
                T::one()
            } else {
                T::zero()
            };
            gemm(T::one(), am.t(), gm, beta, &mut gb[boff..boff + k * n]);
        }
    }
    vec![
        ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
        gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
    ]
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// `a + b`, with `b` broadcast (right-aligned) to `a`'s shape.
    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().broadcast_zip(b.value(), |x, y| x + y)?;
        Ok(self.record(out, &[a, b], || Op::Add {
            b_shape: b.shape().to_vec(),
        }))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().broadcast_zip(b.value(), |x, y| x - y)?;
        Ok(self.record(out, &[a, b], || Op::Sub {
            b_shape: b.shape().to_vec(),
        }))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().broadcast_zip(b.value(), |x, y| x * y)?;
        Ok(self.record(out, &[a, b], || Op::Mul {
            a: a.shared(),
            b: b.shared(),
        }))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().broadcast_zip(b.value(), |x, y| x / y)?;
        Ok(self.record(out, &[a, b], || Op::Div {
            a: a.shared(),
            b: b.shared(),
        }))
    }

    pub fn scale(&self, a: &Var<T>, c: f64) -> Var<T> {
        let c = T::cast_from(c);
        self.record(a.value().map(|x| x * c), &[a], || Op::Scale(c))
    }

    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let out = a.value().matmul(b.value())?;
        Ok(self.record(out, &[a, b], || Op::Matmul {
            a: a.shared(),
            b: b.shared(),
        }))
    }

    pub fn permute(&self, a: &Var<T>, perm: &[usize]) -> Result<Var<T>> {
        let out = a.value().permute(perm)?;
        Ok(self.record(out, &[a], || Op::Permute(perm.to_vec())))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, a: &Var<T>) -> Result<Var<T>> {
        let nd = a.shape().len();
        if nd < 2 {
            return Err(Error::invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: &Var<T>, shape: impl Into<Vec<usize>>) -> Result<Var<T>> {
        let out = a.value().reshape(shape)?;
        Ok(self.record(out, &[a], || Op::Reshape(a.shape().to_vec())))
    }

    pub fn roll(&self, a: &Var<T>, axis: usize, shift: isize) -> Result<Var<T>> {
        check_axis("roll", a.shape(), axis)?;
        let out = a.value().roll(axis, shift);
        Ok(self.record(out, &[a], || Op::Roll { axis, shift }))
    }

    pub fn pad_end(&self, a: &Var<T>, axis: usize, amount: usize) -> Result<Var<T>> {
        check_axis("pad_end", a.shape(), axis)?;
        if amount == 0 {
            return Ok(a.clone());
        }
        let out = a.value().pad_end(axis, amount);
        Ok(self.record(out, &[a], || Op::PadEnd {
            axis,
            len: a.shape()[axis],
        }))
    }

    pub fn narrow(&self, a: &Var<T>, axis: usize, start: usize, len: usize) -> Result<Var<T>> {
        let out = a.value().narrow(axis, start, len)?;
        Ok(self.record(out, &[a], || Op::Narrow {
            axis,
            start,
            len: a.shape()[axis],
        }))
    }

    pub fn sum(&self, a: &Var<T>) -> Var<T> {
        self.record(Tensor::scalar(a.value().sum()), &[a], || {
            Op::SumAll(a.shape().to_vec())
        })
    }

    pub fn mean(&self, a: &Var<T>) -> Var<T> {
        self.record(Tensor::scalar(a.value().mean()), &[a], || {
            Op::MeanAll(a.shape().to_vec())
        })
    }

    /// Sum along `axis`, keeping it with size 1.
    pub fn sum_axis(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        let out = a.value().sum_axis(axis)?;
        Ok(self.record(out, &[a], || Op::SumAxis {
            axis,
            len: a.shape()[axis],
        }))
    }

    /// Elementwise `|x|`; the subgradient at 0 is 0.
    pub fn abs(&self, a: &Var<T>) -> Var<T> {
        self.record(a.value().map(|x| x.abs()), &[a], || Op::Abs(a.shared()))
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        let y = a.value().map(|x| x.exp());
        let saved = self.is_recording().then(|| Arc::new(y.clone()));
        self.record(y, &[a], || Op::Exp(saved.expect("recording tape")))
    }

    /// `log(1 + e^x)`, returning `x` itself above 30.
    pub fn softplus(&self, a: &Var<T>) -> Var<T> {
        self.record(a.value().map(nn::softplus_scalar), &[a], || {
            Op::Softplus(a.shared())
        })
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        self.record(a.value().map(nn::gelu_scalar), &[a], || {
            Op::Gelu(a.shared())
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&self, a: &Var<T>) -> Var<T> {
        let y = nn::softmax_rows(a.value());
        let saved = self.is_recording().then(|| Arc::new(y.clone()));
        self.record(y, &[a], || Op::SoftmaxRows(saved.expect("recording tape")))
    }

    pub fn layer_norm(
        &self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        eps: f64,
    ) -> Result<Var<T>> {
        let (out, cache) = nn::layer_norm(x.value(), gamma.value(), beta.value(), eps)?;
        Ok(self.record(out, &[x, gamma, beta], || Op::LayerNorm {
            cache,
            gamma: gamma.shared(),
        }))
    }

    /// Stride-1 cross-correlation of a `[C_in, H, W]` image with
    /// `[C_out, C_in, k, k]` weights, zero padding `pad`.
    pub fn conv2d(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>, pad: usize) -> Result<Var<T>> {
        let (out, cols, geo) = nn::conv2d(x.value(), w.value(), bias.value(), pad)?;
        Ok(self.record(out, &[x, w, bias], || Op::Conv2d {
            cols,
            w: w.shared(),
            geo,
        }))
    }

    /// Gather rows of a 2-D table: `out[i] = table[indices[i]]`.
    pub fn index_select(&self, table: &Var<T>, indices: &[usize]) -> Result<Var<T>> {
        let shape = table.shape();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "index_select expects a 2-D table, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if indices.is_empty() {
            return Err(Error::invalid("index_select with no indices"));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &r in indices {
            if r >= rows {
                return Err(Error::invalid(format!(
                    "index {r} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(&table.value().data()[r * cols..(r + 1) * cols]);
        }
        let out = Tensor::from_parts(vec![indices.len(), cols], data);
        Ok(self.record(out, &[table], || Op::IndexSelect {
            indices: indices.to_vec(),
            rows,
        }))
    }
}

/// Check that `b` broadcasts onto `a`; used by callers that want an early,
/// descriptive error.
#[allow(dead_code)]
pub(crate) fn ensure_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    broadcast_plan(a, b)
        .map(|_| ())
        .ok_or_else(|| Error::shape(op, a, b))
}
