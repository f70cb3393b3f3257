//! L1 training with Adam on LR/HR patch pairs.

use std::io::Write;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::data::{bicubic_resize, crop, ImagePair, BICUBIC_A};
use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{forward, infer, init_weights, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 disables it.
    pub weight_decay: f64,
    pub seed: u64,
    /// Side of the LR training patches.
    pub patch: usize,
    /// Validate every this many steps; 0 disables periodic validation.
    pub val_interval: usize,
    /// Cosine decay of the learning rate from `lr` to 0 over the run.
    pub cosine_decay: bool,
    /// Random flips and 90-degree rotations of each training patch.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            patch: 32,
            val_interval: 100,
            cosine_decay: false,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.patch == 0 {
            return Err(Error::invalid("batch size and patch side must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return Err(Error::invalid(
                "Adam needs betas in [0, 1) and a positive eps",
            ));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate for update `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if !self.cosine_decay || self.steps == 0 {
            return self.lr;
        }
        let progress = (step - 1) as f64 / self.steps as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Mean absolute difference; the gradient of `|0|` is taken as 0.
pub fn l1_loss(tape: &Tape, pred: &Var, target: &Var) -> Result<Var> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("l1_loss", pred.shape(), target.shape()));
    }
    Ok(tape.mean(&tape.abs(&tape.sub(pred, target)?)))
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(weights: &ModelWeights) -> Self {
        let zeros: Vec<Tensor> = weights
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update. `grads` follows the parameter order of
/// [`ModelWeights::params_mut`].
pub fn adam_step(
    weights: &mut ModelWeights,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    let params = weights.params_mut();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, g), m), v) in params
        .into_iter()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        if w.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::shape("adam_step", w.shape(), g.shape()));
        }
        let (wd, gd, md, vd) = (w.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..wd.len() {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            let mhat = md[i] / c1;
            let vhat = vd[i] / c2;
            if cfg.weight_decay > 0.0 {
                wd[i] -= cfg.lr * cfg.weight_decay * wd[i];
            }
            wd[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Aligned random LR/HR crops for one step.
fn sample_batch(
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    scale: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Tensor, Tensor)>> {
    (0..cfg.batch_size)
        .map(|_| {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let (h, w) = (p.lr.dim(1), p.lr.dim(2));
            let (ph, pw) = (cfg.patch.min(h), cfg.patch.min(w));
            let y = rng.random_range(0..=h - ph);
            let x = rng.random_range(0..=w - pw);
            let lr = crop(&p.lr, y, x, ph, pw)?;
            let hr = crop(&p.hr, y * scale, x * scale, ph * scale, pw * scale)?;
            Ok(if cfg.augment {
                let k = rng.random_range(0..8u8);
                (dihedral(&lr, k), dihedral(&hr, k))
            } else {
                (lr, hr)
            })
        })
        .collect()
}

/// One of the 8 symmetries of the square applied to a `[C, h, w]` image:
/// bit 0 flips x, bit 1 flips y, bit 2 swaps the axes afterwards.
fn dihedral(x: &Tensor, k: u8) -> Tensor {
    let (c, h, w) = (x.dim(0), x.dim(1), x.dim(2));
    let swap = k & 4 != 0;
    let shape = if swap { [c, w, h] } else { [c, h, w] };
    Tensor::from_fn(shape, |i| {
        let (a, b) = if swap { (i[2], i[1]) } else { (i[1], i[2]) };
        let y = if k & 2 != 0 { h - 1 - a } else { a };
        let xx = if k & 1 != 0 { w - 1 - b } else { b };
        x.data()[(i[0] * h + y) * w + xx]
    })
}

/// Mean PSNR of the model over full validation images.
pub fn evaluate_psnr(
    weights: &ModelWeights,
    model: &ModelConfig,
    pairs: &[ImagePair],
) -> Result<f64> {
    let w = weights.constants();
    let mut total = 0.0;
    for p in pairs {
        total += psnr(&infer(&w, model, &p.lr)?, &p.hr)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean PSNR of bicubic upsampling over the same images.
pub fn bicubic_psnr(pairs: &[ImagePair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        let up =
            bicubic_resize(&p.lr, p.hr.dim(1), p.hr.dim(2), BICUBIC_A)?.map(|v| v.clamp(0.0, 1.0));
        total += psnr(&up, &p.hr)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Batch loss before each update; length equals the step count.
    pub losses: Vec<f64>,
    /// `(steps completed, mean PSNR)` on the validation set.
    pub validation: Vec<(usize, f64)>,
}

/// Train from freshly initialized weights (seeded by `cfg.seed`).
pub fn train(
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[ImagePair],
    val_set: &[ImagePair],
) -> Result<TrainOutcome> {
    train_from(
        init_weights(model, cfg.seed)?,
        model,
        cfg,
        train_set,
        val_set,
        |_, _| {},
    )
}

/// Train starting from `weights`. `progress` sees `(step, loss)` after
/// every update.
pub fn train_from(
    mut weights: ModelWeights,
    model: &ModelConfig,
    cfg: &TrainConfig,
    train_set: &[ImagePair],
    val_set: &[ImagePair],
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for p in train_set.iter().chain(val_set) {
        if p.hr.dim(1) != p.lr.dim(1) * model.upscale || p.hr.dim(2) != p.lr.dim(2) * model.upscale
        {
            return Err(Error::invalid(format!(
                "pair {} does not match upscale {}: LR {:?}, HR {:?}",
                p.id,
                model.upscale,
                p.lr.shape(),
                p.hr.shape()
            )));
        }
    }
    // Weight init uses stream 0 of the seed; batches use stream 1.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut state = AdamState::new(&weights);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut validation = Vec::new();
    let tape = Tape::new();
    for step in 1..=cfg.steps {
        let batch = sample_batch(train_set, cfg, model.upscale, &mut rng)?;
        tape.reset();
        let w = weights.vars(&tape);
        let mut total: Option<Var> = None;
        for (lr, hr) in batch {
            let pred = forward(&tape, &tape.constant(lr), &w, model)?;
            let l = l1_loss(&tape, &pred, &tape.constant(hr))?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(&t, &l)?,
            });
        }
        let loss = tape.scale(
            &total.expect("batch is non-empty"),
            1.0 / cfg.batch_size as f64,
        );
        let value = loss.value().item()?;
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {value} at step {step}"
            )));
        }
        let grads = tape.backward(&loss)?;
        let g: Vec<Tensor> = w
            .named()
            .iter()
            .map(|(_, v)| grads.get_or_zeros(v))
            .collect();
        drop(grads);
        let step_cfg = TrainConfig {
            lr: cfg.lr_at(step),
            ..cfg.clone()
        };
        adam_step(&mut weights, &g, &mut state, &step_cfg)?;
        losses.push(value);
        progress(step, value);
        if !val_set.is_empty()
            && cfg.val_interval > 0
            && (step % cfg.val_interval == 0 || step == cfg.steps)
        {
            validation.push((step, evaluate_psnr(&weights, model, val_set)?));
        }
    }
    if !weights.is_finite() {
        return Err(Error::Numeric("weights contain non-finite values".into()));
    }
    Ok(TrainOutcome {
        weights,
        losses,
        validation,
    })
}

/// `step,loss` rows, one per step, with the loss printed round-trip exact.
pub fn write_loss_csv(out: impl Write, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(i + 1).to_string(), format!("{l:?}")])?;
    }
    w.flush()?;
    Ok(())
}

/// `step,val_psnr` rows.
pub fn write_validation_csv(out: impl Write, rows: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "val_psnr"])?;
    for (s, p) in rows {
        w.write_record([s.to_string(), format!("{p:?}")])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    write_loss_csv(std::fs::File::create(path)?, losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{degrade, gen_synthetic_dataset, DatasetSpec, DegradationSpec};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            num_blocks: 1,
            layers_per_block: 2,
            window_side: 4,
            num_heads: 2,
            ..ModelConfig::default()
        }
    }

    fn pairs(seed: u64, n: usize, side: usize) -> Vec<ImagePair> {
        gen_synthetic_dataset(&DatasetSpec::new(seed, n, side))
            .unwrap()
            .into_iter()
            .enumerate()
            .map(|(i, hr)| ImagePair {
                id: i.to_string(),
                lr: degrade(&hr, &DegradationSpec::bicubic(2)).unwrap(),
                hr,
            })
            .collect()
    }

    #[test]
    fn l1_closed_forms() {
        let t = Tape::new();
        let a = t.constant(Tensor::full([3, 2, 2], 0.25));
        let b = t.constant(Tensor::full([3, 2, 2], 0.75));
        assert_eq!(l1_loss(&t, &a, &a).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(l1_loss(&t, &a, &b).unwrap().value().item().unwrap(), 0.5);
        let c = t.constant(Tensor::zeros([3, 2, 1]));
        assert!(l1_loss(&t, &a, &c).is_err());
    }

    #[test]
    fn adam_one_step_oracle() {
        let cfg = TrainConfig {
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut w = init_weights(&tiny_model(), 0).unwrap();
        let before: Vec<Tensor> = w.named().iter().map(|(_, t)| (*t).clone()).collect();
        let grads: Vec<Tensor> = before.iter().map(|t| Tensor::ones(t.shape())).collect();
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &grads, &mut st, &cfg).unwrap();
        // m = 0.1, v = 0.001, mhat = vhat = 1, update = -lr / (1 + eps).
        let du = -1e-3 / (1.0 + 1e-8);
        for ((_, after), b) in w.named().iter().zip(&before) {
            for (x, y) in after.data().iter().zip(b.data()) {
                assert!((x - y - du).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let cfg = TrainConfig::default();
        let mut w = init_weights(&tiny_model(), 1).unwrap();
        let before = w.clone();
        let grads: Vec<Tensor> = w
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut st = AdamState::new(&w);
        for _ in 0..3 {
            adam_step(&mut w, &grads, &mut st, &cfg).unwrap();
        }
        for ((_, a), (_, b)) in w.named().iter().zip(before.named()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn decoupled_weight_decay_shrinks_weights() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut w = init_weights(&tiny_model(), 1).unwrap();
        let before = w.clone();
        let grads: Vec<Tensor> = w
            .named()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        let mut st = AdamState::new(&w);
        adam_step(&mut w, &grads, &mut st, &cfg).unwrap();
        let (a, b) = (&w.shallow_weight, &before.shallow_weight);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - 0.95 * y).abs() < 1e-15);
        }
    }

    #[test]
    fn dihedral_group() {
        let x = Tensor::from_fn([2, 3, 5], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let seen: Vec<Tensor> = (0..8).map(|k| dihedral(&x, k)).collect();
        assert_eq!(seen[0], x);
        assert_eq!(seen[4].shape(), &[2, 5, 3]);
        // Flip x: last column first.
        assert_eq!(seen[1].data()[0], 4.0);
        // Swap axes: out[c, a, b] = x[c, b, a].
        assert_eq!(seen[4].data()[1 * 3 + 2], 21.0);
        for k in 0..8 {
            for j in 0..k {
                assert_ne!(seen[k], seen[j], "{k} vs {j}");
            }
            let mut s = seen[k].data().to_vec();
            s.sort_by(f64::total_cmp);
            assert_eq!(s, x.data());
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig {
            steps: 100,
            lr: 1e-3,
            cosine_decay: true,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert!((cfg.lr_at(51) - 5e-4).abs() < 1e-15);
        assert!(cfg.lr_at(100) > 0.0 && cfg.lr_at(100) < 1e-6);
        let flat = TrainConfig {
            cosine_decay: false,
            ..cfg
        };
        assert_eq!(flat.lr_at(77), 1e-3);
    }

    #[test]
    fn zero_steps_returns_initial_weights() {
        let cfg = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        let out = train(&tiny_model(), &cfg, &pairs(0, 2, 16), &[]).unwrap();
        assert!(out.losses.is_empty());
        let init = init_weights(&tiny_model(), cfg.seed).unwrap();
        for ((_, a), (_, b)) in out.weights.named().iter().zip(init.named()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn short_run_is_deterministic_and_touches_every_block() {
        let cfg = TrainConfig {
            steps: 3,
            batch_size: 2,
            patch: 8,
            lr: 1e-3,
            val_interval: 2,
            ..TrainConfig::default()
        };
        let data = pairs(1, 3, 16);
        let val = pairs(2, 1, 16);
        let a = train(&tiny_model(), &cfg, &data, &val).unwrap();
        let b = train(&tiny_model(), &cfg, &data, &val).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.validation.iter().map(|v| v.0).collect::<Vec<_>>(), [2, 3]);
        let init = init_weights(&tiny_model(), cfg.seed).unwrap();
        // Every named tensor received a gradient and moved.
        for ((name, x), (_, y)) in a.weights.named().iter().zip(init.named()) {
            assert!(*x != y, "{name} did not change");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cfg = TrainConfig::default();
        assert!(train(&tiny_model(), &cfg, &[], &[]).is_err());
        cfg.lr = 0.0;
        assert!(train(&tiny_model(), &cfg, &pairs(0, 1, 16), &[]).is_err());
        let mut m = tiny_model();
        m.upscale = 4;
        assert!(train(&m, &TrainConfig::default(), &pairs(0, 1, 16), &[]).is_err());
    }

    #[test]
    fn nan_loss_aborts() {
        let mut data = pairs(0, 1, 16);
        data[0].lr.data_mut()[0] = f64::NAN;
        // A patch larger than the image covers it whole, NaN included.
        let cfg = TrainConfig {
            steps: 2,
            batch_size: 1,
            patch: 100,
            ..TrainConfig::default()
        };
        let r = train(&tiny_model(), &cfg, &data, &[]);
        assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
    }

    #[test]
    fn loss_csv_format() {
        let mut buf = Vec::new();
        write_loss_csv(&mut buf, &[0.5, 0.25]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step,loss\n1,0.5\n2,0.25\n"
        );
    }
}
