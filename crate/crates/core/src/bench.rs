//! Analytic multiply-accumulate counts and wall-clock throughput of the
//! network, for comparing the kernel and softmax attention variants.
//!
//! Counts cover convolutions, linear layers and the attention products.
//! LayerNorm, activations, softmax exponentials, cosine normalization and
//! bias additions are not counted.

use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{infer, init_weights, AttentionKind, ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::window::padded_len;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacEntry {
    pub layer: String,
    pub macs: u64,
    /// Part of the attention core (token-token products).
    pub attention_core: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacReport {
    pub config: ModelConfig,
    pub height: usize,
    pub width: usize,
    pub entries: Vec<MacEntry>,
}

impl MacReport {
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn attention_core(&self) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.attention_core)
            .map(|e| e.macs)
            .sum()
    }

    pub fn other(&self) -> u64 {
        self.total() - self.attention_core()
    }

    /// Human-readable table.
    pub fn render(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# MACs for {}x{} input, D={} blocks={} K={} M={} heads={} mlp_ratio={} s={} attention={}\n\
             # excluded: LayerNorm, activations, softmax exp, normalization, bias adds\n",
            self.height,
            self.width,
            c.embed_dim,
            c.num_blocks,
            c.layers_per_block,
            c.window_side,
            c.num_heads,
            c.mlp_ratio,
            c.upscale,
            c.attention_kind.name()
        );
        for e in &self.entries {
            s.push_str(&format!("{:<40} {:>16}\n", e.layer, e.macs));
        }
        s.push_str(&format!(
            "{:<40} {:>16}\n",
            "attention core",
            self.attention_core()
        ));
        s.push_str(&format!("{:<40} {:>16}\n", "total", self.total()));
        s
    }
}

/// MACs of a `k x k` same-padded convolution.
pub fn conv_macs(h: usize, w: usize, c_in: usize, c_out: usize, k: usize) -> u64 {
    (h * w * c_in * c_out * k * k) as u64
}

/// Attention-core MACs of one window of `n = M*M` tokens.
///
/// Softmax: scores and their application, `2 n^2 D`. Kernel: `phi(K)^T V`
/// and `phi(Q) S` at `n d^2` per head each, plus the normalizer
/// `phi(Q) sum phi(K)` at `n d` per head, i.e. `2 n D d + n D`.
pub fn attention_core_macs_per_window(
    kind: AttentionKind,
    m: usize,
    dim: usize,
    heads: usize,
) -> u64 {
    let n = (m * m) as u64;
    let (d_model, d_head) = (dim as u64, (dim / heads) as u64);
    match kind {
        AttentionKind::Softmax => 2 * n * n * d_model,
        AttentionKind::Kernel => 2 * n * d_model * d_head + n * d_model,
    }
}

/// Per-layer closed-form counts on an `h x w` LR input.
pub fn count_macs(cfg: &ModelConfig, h: usize, w: usize) -> Result<MacReport> {
    cfg.validate()?;
    if h == 0 || w == 0 {
        return Err(Error::invalid("input must be at least 1x1"));
    }
    let (c, d, m) = (cfg.in_channels, cfg.embed_dim, cfg.window_side);
    let (hp, wp) = (padded_len(h, m), padded_len(w, m));
    let padded_tokens = (hp * wp) as u64;
    let tokens = (h * w) as u64;
    let windows = ((hp / m) * (wp / m)) as u64;
    let dd = (d * d) as u64;
    let mut entries = Vec::new();
    let mut push = |layer: String, macs: u64, attention_core: bool| {
        entries.push(MacEntry {
            layer,
            macs,
            attention_core,
        })
    };
    push("shallow.conv".into(), conv_macs(h, w, c, d, 3), false);
    for b in 0..cfg.num_blocks {
        for l in 0..cfg.layers_per_block {
            let p = format!("blocks.{b}.layers.{l}");
            // Projections run on the padded grid; the MLP on real tokens.
            push(format!("{p}.attn.qkv"), 3 * padded_tokens * dd, false);
            push(
                format!("{p}.attn.core"),
                windows * attention_core_macs_per_window(cfg.attention_kind, m, d, cfg.num_heads),
                true,
            );
            push(format!("{p}.attn.out"), padded_tokens * dd, false);
            push(
                format!("{p}.mlp"),
                2 * tokens * (d * cfg.hidden_dim()) as u64,
                false,
            );
        }
        push(format!("blocks.{b}.conv"), conv_macs(h, w, d, d, 3), false);
    }
    push("deep.conv".into(), conv_macs(h, w, d, d, 3), false);
    push(
        "recon.conv".into(),
        conv_macs(h, w, d, c * cfg.upscale * cfg.upscale, 3),
        false,
    );
    Ok(MacReport {
        config: *cfg,
        height: h,
        width: w,
        entries,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpsReport {
    /// `[batch, C, h, w]`.
    pub input_shape: [usize; 4],
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    /// Seconds per batch for each timed repetition.
    pub latencies: Vec<f64>,
}

impl FpsReport {
    pub fn mean_latency(&self) -> f64 {
        self.latencies.iter().sum::<f64>() / self.latencies.len() as f64
    }

    pub fn median_latency(&self) -> f64 {
        let mut v = self.latencies.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }

    pub fn fps(&self) -> f64 {
        self.input_shape[0] as f64 / self.median_latency()
    }
}

pub const MIN_WARMUP: usize = 2;
pub const MIN_REPS: usize = 5;

/// Forward-only timing in 32-bit floats on a seeded random batch. Each
/// repetition runs the whole batch; with `threads > 1` the images are split
/// across scoped threads.
pub fn measure_fps(
    weights: &ModelWeights<Tensor<f32>>,
    cfg: &ModelConfig,
    input_shape: [usize; 4],
    warmup: usize,
    reps: usize,
    threads: usize,
) -> Result<FpsReport> {
    cfg.validate()?;
    let [batch, c, h, w] = input_shape;
    if batch == 0 || c != cfg.in_channels || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "bad benchmark input shape {input_shape:?}"
        )));
    }
    if warmup < MIN_WARMUP || reps < MIN_REPS {
        return Err(Error::invalid(format!(
            "timing needs at least {MIN_WARMUP} warmup and {MIN_REPS} timed repetitions"
        )));
    }
    let threads = threads.clamp(1, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let images: Vec<Tensor<f32>> = (0..batch)
        .map(|_| Tensor::rand_uniform([c, h, w], 0.0, 1.0, &mut rng))
        .collect();
    let consts = weights.constants();

    let run = || -> Result<()> {
        if threads == 1 {
            for x in &images {
                std::hint::black_box(infer(&consts, cfg, x)?);
            }
            return Ok(());
        }
        let per = batch.div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(per)
                .map(|chunk| {
                    s.spawn(move || -> Result<()> {
                        let local = weights.constants();
                        for x in chunk {
                            std::hint::black_box(infer(&local, cfg, x)?);
                        }
                        Ok(())
                    })
                })
                .collect();
            handles.into_iter().try_for_each(|h| {
                h.join()
                    .map_err(|_| Error::Numeric("benchmark thread panicked".into()))?
            })
        })
    };

    for _ in 0..warmup {
        run()?;
    }
    let mut latencies = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        run()?;
        latencies.push(t.elapsed().as_secs_f64());
    }
    Ok(FpsReport {
        input_shape,
        warmup,
        reps,
        threads,
        latencies,
    })
}

/// One row of the window-size comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub window: usize,
    pub model: String,
    pub macs_total: u64,
    pub macs_attention: u64,
    pub fps: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub windows: Vec<usize>,
    pub input_shape: [usize; 4],
    pub warmup: usize,
    pub reps: usize,
    pub threads: usize,
    /// Skip timing and report only MAC counts (fps is then 0).
    pub macs_only: bool,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            windows: vec![8, 16, 32],
            input_shape: [4, 3, 128, 128],
            warmup: MIN_WARMUP,
            reps: MIN_REPS,
            threads: 1,
            macs_only: false,
            seed: 0,
        }
    }
}

/// MACs and throughput of both attention variants of `base` at each window
/// size; rows are ordered by window, kernel first.
pub fn compare_report(base: &ModelConfig, opts: &BenchOptions) -> Result<Vec<CompareRow>> {
    let [_, _, h, w] = opts.input_shape;
    let mut rows = Vec::new();
    for &m in &opts.windows {
        for kind in [AttentionKind::Kernel, AttentionKind::Softmax] {
            let cfg = base.with_kind(kind).with_window(m);
            let macs = count_macs(&cfg, h, w)?;
            let fps = if opts.macs_only {
                0.0
            } else {
                let weights = init_weights(&cfg, opts.seed)?.cast::<f32>();
                measure_fps(
                    &weights,
                    &cfg,
                    opts.input_shape,
                    opts.warmup,
                    opts.reps,
                    opts.threads,
                )?
                .fps()
            };
            rows.push(CompareRow {
                window: m,
                model: kind.name().to_string(),
                macs_total: macs.total(),
                macs_attention: macs.attention_core(),
                fps,
            });
        }
    }
    Ok(rows)
}

/// `window,model,macs_total,macs_attention,fps`.
pub fn write_compare_csv(out: impl Write, rows: &[CompareRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_compare_csv(input: impl Read) -> Result<Vec<CompareRow>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize()
        .collect::<std::result::Result<Vec<CompareRow>, _>>()?)
}

/// Growth of total and attention MACs and the FPS ratio per window.
pub fn summarize(rows: &[CompareRow]) -> String {
    let mut s = String::new();
    let find = |m: usize, model: &str| rows.iter().find(|r| r.window == m && r.model == model);
    let mut windows: Vec<usize> = rows.iter().map(|r| r.window).collect();
    windows.dedup();
    for &m in &windows {
        if let (Some(k), Some(sm)) = (find(m, "kernel"), find(m, "softmax")) {
            s.push_str(&format!(
                "M={m:<3} kernel {:>7.2} GMACs {:>7.2} fps | softmax {:>7.2} GMACs {:>7.2} fps",
                k.macs_total as f64 / 1e9,
                k.fps,
                sm.macs_total as f64 / 1e9,
                sm.fps
            ));
            if k.fps > 0.0 && sm.fps > 0.0 {
                s.push_str(&format!(" | speedup {:.2}x", k.fps / sm.fps));
            }
            s.push('\n');
        }
    }
    if let (Some(&lo), Some(&hi)) = (windows.first(), windows.last()) {
        for model in ["kernel", "softmax"] {
            if let (Some(a), Some(b)) = (find(lo, model), find(hi, model)) {
                s.push_str(&format!(
                    "{model}: total MACs x{:.2}, attention MACs x{:.2} from M={lo} to M={hi}\n",
                    b.macs_total as f64 / a.macs_total as f64,
                    b.macs_attention as f64 / a.macs_attention as f64
                ));
            }
        }
    }
    s
}
