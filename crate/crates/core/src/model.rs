//! The super-resolution network: a 3x3 shallow conv, a chain of residual
//! blocks of (shifted) window-attention layers, a deep-feature conv, a long
//! skip and a pixel-shuffle reconstruction head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    multi_head_kernel_attention, multi_head_softmax_attention, KernelAttentionParams,
    SoftmaxAttentionParams,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use crate::window::{padded_len, partition_hwc, reverse_hwc, WindowLayout};

pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Subtracted from every input pixel and added back to the output.
pub const INPUT_MEAN: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Kernel,
    Softmax,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Kernel => "kernel",
            AttentionKind::Softmax => "softmax",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kernel" => Ok(AttentionKind::Kernel),
            "softmax" => Ok(AttentionKind::Softmax),
            _ => Err(Error::invalid(format!("unknown attention kind {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub window_side: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub upscale: usize,
    pub attention_kind: AttentionKind,
}

impl Default for ModelConfig {
    /// The lightweight benchmark configuration.
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            embed_dim: 60,
            num_blocks: 4,
            layers_per_block: 6,
            window_side: 8,
            num_heads: 6,
            mlp_ratio: 2.0,
            upscale: 2,
            attention_kind: AttentionKind::Kernel,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.in_channels == 0
            || self.embed_dim == 0
            || self.window_side == 0
            || self.num_heads == 0
        {
            return bad(format!("config sizes must be positive: {self:?}"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.layers_per_block % 2 != 0 {
            return bad(format!(
                "layers_per_block must be even, got {}",
                self.layers_per_block
            ));
        }
        if ![2, 4, 8].contains(&self.upscale) {
            return bad(format!("upscale must be 2, 4 or 8, got {}", self.upscale));
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("invalid mlp_ratio {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn with_kind(mut self, kind: AttentionKind) -> Self {
        self.attention_kind = kind;
        self
    }

    pub fn with_window(mut self, m: usize) -> Self {
        self.window_side = m;
        self
    }
}

#[derive(Clone, Debug)]
pub enum AttentionParams<P> {
    Kernel(KernelAttentionParams<P>),
    Softmax(SoftmaxAttentionParams<P>),
}

#[derive(Clone, Debug)]
pub struct LayerParams<P> {
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub attn: AttentionParams<P>,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub fc1_weight: P,
    pub fc1_bias: P,
    pub fc2_weight: P,
    pub fc2_bias: P,
}

#[derive(Clone, Debug)]
pub struct BlockParams<P> {
    pub embed_gamma: P,
    pub embed_beta: P,
    pub layers: Vec<LayerParams<P>>,
    pub conv_weight: P,
    pub conv_bias: P,
}

/// Every learnable tensor of the network. `P` is `Tensor` for stored
/// weights, `Var` while running on a tape, or any per-parameter payload
/// (optimizer state, layouts).
#[derive(Clone, Debug)]
pub struct ModelWeights<P = Tensor> {
    pub shallow_weight: P,
    pub shallow_bias: P,
    pub blocks: Vec<BlockParams<P>>,
    pub deep_weight: P,
    pub deep_bias: P,
    pub recon_weight: P,
    pub recon_bias: P,
}

impl<P> ModelWeights<P> {
    /// Apply `f` to every parameter in a fixed order, passing its name.
    pub fn map<'a, Q>(&'a self, f: &mut impl FnMut(&str, &'a P) -> Q) -> ModelWeights<Q> {
        let shallow_weight = f("shallow.weight", &self.shallow_weight);
        let shallow_bias = f("shallow.bias", &self.shallow_bias);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let pre = format!("blocks.{i}");
                BlockParams {
                    embed_gamma: f(&format!("{pre}.embed_norm.gamma"), &b.embed_gamma),
                    embed_beta: f(&format!("{pre}.embed_norm.beta"), &b.embed_beta),
                    layers: b
                        .layers
                        .iter()
                        .enumerate()
                        .map(|(j, l)| {
                            let p = format!("{pre}.layers.{j}");
                            let n1g = f(&format!("{p}.norm1.gamma"), &l.norm1_gamma);
                            let n1b = f(&format!("{p}.norm1.beta"), &l.norm1_beta);
                            let attn = match &l.attn {
                                AttentionParams::Kernel(a) => {
                                    AttentionParams::Kernel(KernelAttentionParams {
                                        w_q: f(&format!("{p}.attn.w_q"), &a.w_q),
                                        w_k: f(&format!("{p}.attn.w_k"), &a.w_k),
                                        w_v: f(&format!("{p}.attn.w_v"), &a.w_v),
                                        w_o: f(&format!("{p}.attn.w_o"), &a.w_o),
                                    })
                                }
                                AttentionParams::Softmax(a) => {
                                    AttentionParams::Softmax(SoftmaxAttentionParams {
                                        w_q: f(&format!("{p}.attn.w_q"), &a.w_q),
                                        w_k: f(&format!("{p}.attn.w_k"), &a.w_k),
                                        w_v: f(&format!("{p}.attn.w_v"), &a.w_v),
                                        w_o: f(&format!("{p}.attn.w_o"), &a.w_o),
                                        bias_table: f(
                                            &format!("{p}.attn.bias_table"),
                                            &a.bias_table,
                                        ),
                                        log_tau: f(&format!("{p}.attn.log_tau"), &a.log_tau),
                                    })
                                }
                            };
                            LayerParams {
                                norm1_gamma: n1g,
                                norm1_beta: n1b,
                                attn,
                                norm2_gamma: f(&format!("{p}.norm2.gamma"), &l.norm2_gamma),
                                norm2_beta: f(&format!("{p}.norm2.beta"), &l.norm2_beta),
                                fc1_weight: f(&format!("{p}.mlp.fc1.weight"), &l.fc1_weight),
                                fc1_bias: f(&format!("{p}.mlp.fc1.bias"), &l.fc1_bias),
                                fc2_weight: f(&format!("{p}.mlp.fc2.weight"), &l.fc2_weight),
                                fc2_bias: f(&format!("{p}.mlp.fc2.bias"), &l.fc2_bias),
                            }
                        })
                        .collect(),
                    conv_weight: f(&format!("{pre}.conv.weight"), &b.conv_weight),
                    conv_bias: f(&format!("{pre}.conv.bias"), &b.conv_bias),
                }
            })
            .collect();
        ModelWeights {
            shallow_weight,
            shallow_bias,
            blocks,
            deep_weight: f("deep.weight", &self.deep_weight),
            deep_bias: f("deep.bias", &self.deep_bias),
            recon_weight: f("recon.weight", &self.recon_weight),
            recon_bias: f("recon.bias", &self.recon_bias),
        }
    }

    /// `(name, parameter)` pairs in the order used by [`ModelWeights::map`].
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.map(&mut |n, p| out.push((n.to_string(), p)));
        out
    }

    /// Mutable references in the same order as [`ModelWeights::named`].
    pub fn params_mut(&mut self) -> Vec<&mut P> {
        let mut out = vec![&mut self.shallow_weight, &mut self.shallow_bias];
        for b in &mut self.blocks {
            out.push(&mut b.embed_gamma);
            out.push(&mut b.embed_beta);
            for l in &mut b.layers {
                out.push(&mut l.norm1_gamma);
                out.push(&mut l.norm1_beta);
                match &mut l.attn {
                    AttentionParams::Kernel(a) => {
                        out.extend([&mut a.w_q, &mut a.w_k, &mut a.w_v, &mut a.w_o]);
                    }
                    AttentionParams::Softmax(a) => {
                        out.extend([
                            &mut a.w_q,
                            &mut a.w_k,
                            &mut a.w_v,
                            &mut a.w_o,
                            &mut a.bias_table,
                            &mut a.log_tau,
                        ]);
                    }
                }
                out.extend([
                    &mut l.norm2_gamma,
                    &mut l.norm2_beta,
                    &mut l.fc1_weight,
                    &mut l.fc1_bias,
                    &mut l.fc2_weight,
                    &mut l.fc2_bias,
                ]);
            }
            out.push(&mut b.conv_weight);
            out.push(&mut b.conv_bias);
        }
        out.extend([
            &mut self.deep_weight,
            &mut self.deep_bias,
            &mut self.recon_weight,
            &mut self.recon_bias,
        ]);
        out
    }
}

/// How a parameter is initialized.
pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    /// `U(-b, b)`.
    Uniform(f64),
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        shape: shape.to_vec(),
        init,
    }
}

impl ModelWeights<ParamSpec> {
    /// Shapes and initializers of every parameter for `cfg`.
    pub fn layout(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, d, hid, m, h) = (
            cfg.in_channels,
            cfg.embed_dim,
            cfg.hidden_dim(),
            cfg.window_side,
            cfg.num_heads,
        );
        let conv = |co: usize, ci: usize| {
            (
                spec(&[co, ci, 3, 3], Init::FanIn(ci * 9)),
                spec(&[co], Init::Zeros),
            )
        };
        // Token-mixing layers start small (std 0.02) so every residual branch
        // is close to the identity at initialization.
        let lin = |i: usize, o: usize| spec(&[i, o], Init::Uniform(LINEAR_INIT_STD * 3f64.sqrt()));
        let ln = || (spec(&[d], Init::Ones), spec(&[d], Init::Zeros));
        let layer = || {
            let (n1g, n1b) = ln();
            let (n2g, n2b) = ln();
            let attn = match cfg.attention_kind {
                AttentionKind::Kernel => AttentionParams::Kernel(KernelAttentionParams {
                    w_q: lin(d, d),
                    w_k: lin(d, d),
                    w_v: lin(d, d),
                    w_o: lin(d, d),
                }),
                AttentionKind::Softmax => AttentionParams::Softmax(SoftmaxAttentionParams {
                    w_q: lin(d, d),
                    w_k: lin(d, d),
                    w_v: lin(d, d),
                    w_o: lin(d, d),
                    bias_table: spec(&[(2 * m - 1) * (2 * m - 1), h], Init::Zeros),
                    log_tau: spec(&[h], Init::Zeros),
                }),
            };
            LayerParams {
                norm1_gamma: n1g,
                norm1_beta: n1b,
                attn,
                norm2_gamma: n2g,
                norm2_beta: n2b,
                fc1_weight: lin(d, hid),
                fc1_bias: spec(&[hid], Init::Zeros),
                fc2_weight: lin(hid, d),
                fc2_bias: spec(&[d], Init::Zeros),
            }
        };
        let blocks = (0..cfg.num_blocks)
            .map(|_| {
                let (g, b) = ln();
                let (cw, cb) = conv(d, d);
                BlockParams {
                    embed_gamma: g,
                    embed_beta: b,
                    layers: (0..cfg.layers_per_block).map(|_| layer()).collect(),
                    conv_weight: cw,
                    conv_bias: cb,
                }
            })
            .collect();
        let (sw, sb) = conv(d, c);
        let (dw, db) = conv(d, d);
        let (rw, rb) = conv(c * cfg.upscale * cfg.upscale, d);
        Ok(ModelWeights {
            shallow_weight: sw,
            shallow_bias: sb,
            blocks,
            deep_weight: dw,
            deep_bias: db,
            recon_weight: rw,
            recon_bias: rb,
        })
    }
}

/// Deterministic initialization from `seed`.
pub fn init_weights(cfg: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    let layout = ModelWeights::layout(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(layout.map(&mut |_, s| match s.init {
        Init::FanIn(fan_in) => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::rand_uniform(s.shape.clone(), -bound, bound, &mut rng)
        }
        Init::Uniform(b) => Tensor::rand_uniform(s.shape.clone(), -b, b, &mut rng),
        Init::Zeros => Tensor::zeros(s.shape.clone()),
        Init::Ones => Tensor::ones(s.shape.clone()),
    }))
}

pub fn param_count<T: Scalar>(w: &ModelWeights<Tensor<T>>) -> usize {
    w.named().iter().map(|(_, t)| t.numel()).sum()
}

impl<T: Scalar> ModelWeights<Tensor<T>> {
    pub fn cast<U: Scalar>(&self) -> ModelWeights<Tensor<U>> {
        self.map(&mut |_, t| t.cast())
    }

    /// Wrap every tensor as a tape constant (inference).
    pub fn constants(&self) -> ModelWeights<Var<T>> {
        let tape = Tape::no_grad();
        self.map(&mut |_, t| tape.constant(t.clone()))
    }

    /// Register every tensor as a differentiable leaf on `tape`.
    pub fn vars(&self, tape: &Tape<T>) -> ModelWeights<Var<T>> {
        self.map(&mut |_, t| tape.var(t.clone()))
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }
}

/// 3x3 same-padding conv from `C` input channels to `D` features.
pub fn shallow_extract<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    w: &ModelWeights<Var<T>>,
) -> Result<Var<T>> {
    let want = w.shallow_weight.shape()[1];
    if x.shape().len() != 3 || x.shape()[0] != want {
        return Err(Error::invalid(format!(
            "expected a [{want}, h, w] image, got {:?}",
            x.shape()
        )));
    }
    tape.conv2d(x, &w.shallow_weight, &w.shallow_bias, 1)
}

/// One transformer layer on channel-last tokens `[h, w, D]`:
/// `x += attn(LN(x))`, then `x += MLP(LN(x))`. Shifted layers roll the grid
/// by `floor(M/2)` before windowing and roll it back afterwards.
pub fn lstl_forward<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    p: &LayerParams<Var<T>>,
    cfg: &ModelConfig,
    shifted: bool,
) -> Result<Var<T>> {
    let s = x.shape();
    if s.len() != 3 || s[2] != cfg.embed_dim {
        return Err(Error::invalid(format!(
            "layer expects [h, w, {}] tokens, got {s:?}",
            cfg.embed_dim
        )));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let m = cfg.window_side;
    let (hp, wp) = (padded_len(h, m), padded_len(w, m));

    let y = tape.layer_norm(x, &p.norm1_gamma, &p.norm1_beta, LAYER_NORM_EPS)?;
    let y = tape.pad_end(&y, 0, hp - h)?;
    let y = tape.pad_end(&y, 1, wp - w)?;
    let shift = (m / 2) as isize;
    let y = if shifted && shift > 0 {
        let y = tape.roll(&y, 0, shift)?;
        tape.roll(&y, 1, shift)?
    } else {
        y
    };
    let wins = partition_hwc(tape, &y, m)?;
    let a = match &p.attn {
        AttentionParams::Kernel(k) => multi_head_kernel_attention(tape, &wins, k, cfg.num_heads)?,
        AttentionParams::Softmax(sp) => {
            multi_head_softmax_attention(tape, &wins, sp, cfg.num_heads, m, None)?
        }
    };
    let y = reverse_hwc(tape, &a, WindowLayout::new(hp, wp, m)?)?;
    let y = if shifted && shift > 0 {
        let y = tape.roll(&y, 0, -shift)?;
        tape.roll(&y, 1, -shift)?
    } else {
        y
    };
    let y = if hp != h {
        tape.narrow(&y, 0, 0, h)?
    } else {
        y
    };
    let y = if wp != w {
        tape.narrow(&y, 1, 0, w)?
    } else {
        y
    };
    let x = tape.add(x, &y)?;

    let z = tape.layer_norm(&x, &p.norm2_gamma, &p.norm2_beta, LAYER_NORM_EPS)?;
    let z = tape.reshape(&z, [h * w, d])?;
    let z = tape.add(&tape.matmul(&z, &p.fc1_weight)?, &p.fc1_bias)?;
    let z = tape.gelu(&z);
    let z = tape.add(&tape.matmul(&z, &p.fc2_weight)?, &p.fc2_bias)?;
    let z = tape.reshape(&z, [h, w, d])?;
    tape.add(&x, &z)
}

/// Residual block on a `[D, h, w]` map: embedding LayerNorm, `K` layers
/// alternating regular/shifted, a 3x3 conv, plus the block input.
pub fn rlstb_forward<T: Scalar>(
    tape: &Tape<T>,
    f_in: &Var<T>,
    b: &BlockParams<Var<T>>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let tokens = tape.permute(f_in, &[1, 2, 0])?;
    let mut x = tape.layer_norm(&tokens, &b.embed_gamma, &b.embed_beta, LAYER_NORM_EPS)?;
    for (j, layer) in b.layers.iter().enumerate() {
        x = lstl_forward(tape, &x, layer, cfg, j % 2 == 1)?;
    }
    let fmap = tape.permute(&x, &[2, 0, 1])?;
    let c = tape.conv2d(&fmap, &b.conv_weight, &b.conv_bias, 1)?;
    tape.add(&c, f_in)
}

/// The block chain followed by the deep-feature conv.
pub fn deep_extract<T: Scalar>(
    tape: &Tape<T>,
    f_sf: &Var<T>,
    w: &ModelWeights<Var<T>>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    let mut f = f_sf.clone();
    for b in &w.blocks {
        f = rlstb_forward(tape, &f, b, cfg)?;
    }
    tape.conv2d(&f, &w.deep_weight, &w.deep_bias, 1)
}

/// Depth-to-space: `out[c, s*y+dy, s*x+dx] = in[c*s*s + dy*s + dx, y, x]`.
pub fn pixel_shuffle<T: Scalar>(tape: &Tape<T>, x: &Var<T>, s: usize) -> Result<Var<T>> {
    let sh = x.shape();
    if sh.len() != 3 || s == 0 || sh[0] % (s * s) != 0 {
        return Err(Error::invalid(format!(
            "cannot pixel-shuffle {sh:?} by {s}"
        )));
    }
    let (c, h, w) = (sh[0] / (s * s), sh[1], sh[2]);
    let r = tape.reshape(x, [c, s, s, h, w])?;
    let p = tape.permute(&r, &[0, 3, 1, 4, 2])?;
    tape.reshape(&p, [c, h * s, w * s])
}

/// Inverse of [`pixel_shuffle`].
pub fn space_to_depth<T: Scalar>(tape: &Tape<T>, x: &Var<T>, s: usize) -> Result<Var<T>> {
    let sh = x.shape();
    if sh.len() != 3 || s == 0 || sh[1] % s != 0 || sh[2] % s != 0 {
        return Err(Error::invalid(format!(
            "cannot space-to-depth {sh:?} by {s}"
        )));
    }
    let (c, h, w) = (sh[0], sh[1] / s, sh[2] / s);
    let r = tape.reshape(x, [c, h, s, w, s])?;
    let p = tape.permute(&r, &[0, 2, 4, 1, 3])?;
    tape.reshape(&p, [c * s * s, h, w])
}

/// Long skip, 3x3 conv to `C*s*s` channels, then pixel shuffle.
pub fn reconstruct<T: Scalar>(
    tape: &Tape<T>,
    f_sf: &Var<T>,
    f_df: &Var<T>,
    w: &ModelWeights<Var<T>>,
    s: usize,
) -> Result<Var<T>> {
    if ![2, 4, 8].contains(&s) {
        return Err(Error::invalid(format!(
            "upscale must be 2, 4 or 8, got {s}"
        )));
    }
    let sum = tape.add(f_sf, f_df)?;
    let c = tape.conv2d(&sum, &w.recon_weight, &w.recon_bias, 1)?;
    pixel_shuffle(tape, &c, s)
}

/// Full network on one `[C, h, w]` image. The output is not clamped.
pub fn forward<T: Scalar>(
    tape: &Tape<T>,
    x: &Var<T>,
    w: &ModelWeights<Var<T>>,
    cfg: &ModelConfig,
) -> Result<Var<T>> {
    // Centre the input so zero padding at the borders reads as mid-gray.
    let mean = tape.constant(Tensor::scalar(T::cast_from(INPUT_MEAN)));
    let f_sf = shallow_extract(tape, &tape.sub(x, &mean)?, w)?;
    let f_df = deep_extract(tape, &f_sf, w, cfg)?;
    tape.add(&reconstruct(tape, &f_sf, &f_df, w, cfg.upscale)?, &mean)
}

/// Inference on one image with output clamped to `[0, 1]`.
pub fn infer<T: Scalar>(
    w: &ModelWeights<Var<T>>,
    cfg: &ModelConfig,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let tape = Tape::no_grad();
    let out = forward(&tape, &tape.constant(x.clone()), w, cfg)?;
    Ok(out.value().map(|v| v.max(T::zero()).min(T::one())))
}
