//! Fast built-in checks of the numerical core, for the `selftest`
//! subcommand.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{kernel_attention_bruteforce, kernel_attention_linear};
use crate::autodiff::{grad_check_many, Tape, Var};
use crate::bench::count_macs;
use crate::checkpoint;
use crate::data::{ppm_decode, ppm_encode};
use crate::error::Result;
use crate::metrics::{mae, psnr, ssim};
use crate::model::{
    forward, init_weights, pixel_shuffle, space_to_depth, AttentionKind, ModelConfig, ModelWeights,
};
use crate::tensor::Tensor;
use crate::window::{partition_tensor, reverse_tensor, shift_tensor, WindowLayout};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Run every check; `progress` is called as each one finishes.
pub fn run_all(mut progress: impl FnMut(&CheckResult)) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, fn() -> Result<(bool, String)>)> = vec![
        (
            "kernel attention: linear form equals quadratic form",
            kernel_equivalence,
        ),
        ("gradients: attention ops", op_gradients),
        ("gradients: tiny end-to-end model", model_gradients),
        ("MAC counts: window-size trend", mac_trend),
        ("metrics: closed forms", metric_closed_forms),
        ("roundtrips: windows, shuffle, checkpoint, PPM", roundtrips),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let r = check(name, f);
            progress(&r);
            r
        })
        .collect()
}

fn kernel_equivalence() -> Result<(bool, String)> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let t = Tape::no_grad();
    for i in 0..100 {
        let m = [1, 2, 4, 8, 16][i % 5];
        let d = [1, 4, 32][(i / 5) % 3];
        let x: Vec<Var> = (0..3)
            .map(|_| t.constant(Tensor::rand_uniform([m * m, d], -2.0, 2.0, &mut rng)))
            .collect();
        let a = kernel_attention_linear(&t, &x[0], &x[1], &x[2])?;
        let b = kernel_attention_bruteforce(&t, &x[0], &x[1], &x[2])?;
        worst = worst.max(a.value().max_abs_diff(b.value()));
        t.reset();
    }
    Ok((worst < 1e-9, format!("max abs diff {worst:.2e}")))
}

fn op_gradients() -> Result<(bool, String)> {
    use crate::attention::window_softmax;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let qkv = |rng: &mut ChaCha8Rng| Tensor::rand_uniform([2, 2, 4, 3], -1.0, 1.0, rng);
    let xs = vec![
        qkv(&mut rng),
        qkv(&mut rng),
        qkv(&mut rng),
        Tensor::rand_uniform([2, 4, 4], -1.0, 1.0, &mut rng),
        Tensor::rand_uniform([2], -1.0, 1.0, &mut rng),
    ];
    let weights = Tensor::rand_uniform([2, 2, 4, 3], 0.5, 1.5, &mut rng);
    worst = worst.max(grad_check_many(
        |t, v| {
            let y = window_softmax(t, &v[0], &v[1], &v[2], Some(&v[3]), &v[4], None)?;
            Ok(t.sum(&t.mul(&y, &t.constant(weights.clone()))?))
        },
        &xs,
        1e-3,
    )?);
    let ks: Vec<Tensor> = (0..3)
        .map(|_| Tensor::rand_uniform([9, 4], -1.0, 1.0, &mut rng))
        .collect();
    let w2 = Tensor::rand_uniform([9, 4], 0.5, 1.5, &mut rng);
    worst = worst.max(grad_check_many(
        |t, v| {
            let y = kernel_attention_linear(t, &v[0], &v[1], &v[2])?;
            Ok(t.sum(&t.mul(&y, &t.constant(w2.clone()))?))
        },
        &ks,
        1e-3,
    )?);
    Ok((worst < 1e-6, format!("max rel err {worst:.2e}")))
}

/// Config used for the end-to-end gradient check.
pub fn tiny_config(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        embed_dim: 8,
        num_blocks: 1,
        layers_per_block: 2,
        window_side: 4,
        num_heads: 2,
        attention_kind: kind,
        ..ModelConfig::default()
    }
}

/// Largest relative gradient error over every parameter of the model on an
/// 8x8 input, with a weighted-sum loss.
///
/// Weights are the seeded init plus U(-0.3, 0.3) noise. At the plain init the
/// attention maps are close to uniform and the query/key gradients sit near
/// 1e-8, where finite differences only measure rounding.
pub fn model_gradient_error(cfg: &ModelConfig, seed: u64) -> Result<f64> {
    let w = init_weights(cfg, seed)?;
    let layout = ModelWeights::layout(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<Tensor> = w
        .named()
        .into_iter()
        .map(|(_, t)| {
            let noise: Tensor = Tensor::rand_uniform(t.shape().to_vec(), -0.3, 0.3, &mut rng);
            t.zip_map(&noise, |a, b| a + b)
        })
        .collect::<Result<_>>()?;
    let x = Tensor::rand_uniform([3, 8, 8], 0.0, 1.0, &mut rng);
    let s = cfg.upscale;
    let r = Tensor::rand_uniform([3, 8 * s, 8 * s], 0.5, 1.5, &mut rng);
    grad_check_many(
        |t, vars| {
            let mut it = vars.iter().cloned();
            let wv = layout.map(&mut |_, _| it.next().expect("one var per parameter"));
            let y = forward(t, &t.constant(x.clone()), &wv, cfg)?;
            Ok(t.sum(&t.mul(&y, &t.constant(r.clone()))?))
        },
        &params,
        1e-3,
    )
}

fn model_gradients() -> Result<(bool, String)> {
    let k = model_gradient_error(&tiny_config(AttentionKind::Kernel), 1)?;
    let s = model_gradient_error(&tiny_config(AttentionKind::Softmax), 1)?;
    Ok((
        k < 1e-4 && s < 1e-4,
        format!("max rel err kernel {k:.2e}, softmax {s:.2e}"),
    ))
}

fn mac_trend() -> Result<(bool, String)> {
    let base = ModelConfig::default();
    let r = |kind, m| count_macs(&base.with_kind(kind).with_window(m), 128, 128);
    let (s8, s32) = (
        r(AttentionKind::Softmax, 8)?,
        r(AttentionKind::Softmax, 32)?,
    );
    let (k8, k32) = (r(AttentionKind::Kernel, 8)?, r(AttentionKind::Kernel, 32)?);
    let soft_growth = s32.total() as f64 / s8.total() as f64;
    let kern_growth = k32.total() as f64 / k8.total() as f64;
    let ok = s32.attention_core() == 16 * s8.attention_core()
        && k32.attention_core() == k8.attention_core()
        && soft_growth >= 1.5 * kern_growth;
    Ok((
        ok,
        format!("total growth softmax x{soft_growth:.2}, kernel x{kern_growth:.2}"),
    ))
}

fn metric_closed_forms() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a: Tensor = Tensor::rand_uniform([3, 16, 16], 0.0, 0.9, &mut rng);
    let b = a.map(|v| v + 0.1);
    let p = psnr(&a, &b)?;
    let m = mae(&a, &b)?;
    let s = ssim(&a, &a)?;
    let ok = (p - 20.0).abs() < 1e-6 && (m - 10.0).abs() < 1e-9 && s == 100.0;
    Ok((ok, format!("psnr {p:.9}, mae {m:.12}, ssim(a,a) {s}")))
}

fn roundtrips() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x: Tensor = Tensor::rand_uniform([5, 12, 8], -1.0, 1.0, &mut rng);
    let lay = WindowLayout::new(12, 8, 4)?;
    let windows = reverse_tensor(&partition_tensor(&x, 4)?, lay)? == x;
    let shift = shift_tensor(&shift_tensor(&x, 3, -5)?, -3, 5)? == x;
    let t = Tape::<f64>::no_grad();
    let v = t.constant(Tensor::rand_uniform([12, 4, 6], -1.0, 1.0, &mut rng));
    let shuffle = space_to_depth(&t, &pixel_shuffle(&t, &v, 2)?, 2)?.value() == v.value();
    let cfg = tiny_config(AttentionKind::Softmax);
    let w = init_weights(&cfg, 9)?;
    let bytes = checkpoint::encode(&w, &cfg)?;
    let (w2, cfg2) = checkpoint::decode(&bytes)?;
    let ckpt = cfg2 == cfg && checkpoint::encode(&w2, &cfg2)? == bytes;
    let img = Tensor::from_fn([3, 7, 5], |i| {
        ((i[0] * 97 + i[1] * 13 + i[2] * 5) % 256) as f64 / 255.0
    });
    let ppm = ppm_decode(&ppm_encode(&img)?)? == img;
    Ok((
        windows && shift && shuffle && ckpt && ppm,
        format!(
            "windows {windows}, shift {shift}, shuffle {shuffle}, checkpoint {ckpt}, ppm {ppm}"
        ),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for r in run_all(|_| {}) {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
    }
}
