//! `lswinsr`: data generation, training, inference, evaluation and
//! benchmarking for the LSwinSR super-resolution network.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lswinsr::bench::{compare_report, count_macs, summarize, write_compare_csv, BenchOptions};
use lswinsr::checkpoint::{load_checkpoint, save_checkpoint};
use lswinsr::data::{
    gen_synthetic_dataset, load_dataset, ppm_read, ppm_write, write_dataset, DatasetSpec,
    DegradationSpec,
};
use lswinsr::metrics::{ImageMetrics, MetricsReport};
use lswinsr::model::{infer, AttentionKind, ModelConfig};
use lswinsr::train::{save_loss_csv, write_validation_csv, TrainConfig};
use lswinsr::Error;

use manifest::{manifest_path, RunManifest};

const EXIT_ARGS: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser, Debug)]
#[command(
    name = "lswinsr",
    version,
    about = "Super-resolution with linear kernel window attention"
)]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic HR images, degrade them and write PPM pairs plus a manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Super-resolve a PPM image or a directory of them.
    Infer(InferArgs),
    /// Compare predictions with references (PSNR, SSIM, MAE).
    Eval(EvalArgs),
    /// MACs and FPS of both attention variants across window sizes.
    Bench(BenchArgs),
    /// Print the per-layer MAC report of one configuration.
    CountMacs(CountMacsArgs),
    /// Run the built-in numerical checks.
    Selftest,
}

#[derive(Args, Debug, Serialize)]
struct ModelArgs {
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    /// Transformer layers per block (even).
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 2.0)]
    mlp_ratio: f64,
    /// kernel or softmax.
    #[arg(long, default_value = "kernel")]
    #[serde(serialize_with = "kind_name")]
    attention: AttentionKind,
}

impl ModelArgs {
    fn config(&self, upscale: usize) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            embed_dim: self.embed_dim,
            num_blocks: self.blocks,
            layers_per_block: self.layers,
            window_side: self.window,
            num_heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            upscale,
            attention_kind: self.attention,
        }
    }
}

/// Model flags defaulting to the lightweight benchmark configuration.
#[derive(Args, Debug, Serialize)]
struct BenchModelArgs {
    #[arg(long, default_value_t = 60)]
    embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    blocks: usize,
    #[arg(long, default_value_t = 6)]
    layers: usize,
    #[arg(long, default_value_t = 6)]
    heads: usize,
    #[arg(long, default_value_t = 2.0)]
    mlp_ratio: f64,
    #[arg(long, default_value_t = 2)]
    scale: usize,
}

impl BenchModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            in_channels: 3,
            embed_dim: self.embed_dim,
            num_blocks: self.blocks,
            layers_per_block: self.layers,
            window_side: 8,
            num_heads: self.heads,
            mlp_ratio: self.mlp_ratio,
            upscale: self.scale,
            attention_kind: AttentionKind::Kernel,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of images.
    #[arg(long, default_value_t = 64)]
    n: usize,
    /// HR image side.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    /// Gaussian blur before downsampling.
    #[arg(long)]
    blur: bool,
    #[arg(long, default_value_t = 1.0)]
    blur_sigma: f64,
    #[arg(long, default_value_t = 5)]
    blur_kernel: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Held-out dataset for validation; without it a tail split of --data is used.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Fraction of --data held out when --val-data is absent.
    #[arg(long, default_value_t = 0.125)]
    val_fraction: f64,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// LR patch side.
    #[arg(long, default_value_t = 32)]
    patch: usize,
    #[arg(long, default_value_t = 250)]
    val_interval: usize,
    /// Keep the learning rate constant instead of cosine decay.
    #[arg(long)]
    no_cosine: bool,
    /// Disable random flips and rotations of training patches.
    #[arg(long)]
    no_augment: bool,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for the checkpoint, loss and validation CSVs.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A PPM file or a directory of them.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output file, or directory when --in is a directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    pred_dir: PathBuf,
    #[arg(long)]
    ref_dir: PathBuf,
    /// Metrics CSV; defaults to metrics.csv inside --pred-dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "8,16,32")]
    windows: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// LR input side.
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Count MACs only, skipping the timing runs.
    #[arg(long)]
    macs_only: bool,
    #[command(flatten)]
    model: BenchModelArgs,
    #[arg(long, default_value = "bench.csv")]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CountMacsArgs {
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    window: usize,
    #[arg(long, default_value = "kernel")]
    #[serde(serialize_with = "kind_name")]
    attention: AttentionKind,
    #[command(flatten)]
    model: BenchModelArgs,
}

fn kind_name<S: serde::Serializer>(k: &AttentionKind, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(k.name())
}

#[derive(Debug)]
enum Failure {
    Args(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => Failure::Args(msg),
            Error::Numeric(_) | Error::Backward(_) => Failure::Numeric(msg),
            Error::ShapeMismatch { .. } | Error::Format(_) | Error::Io(_) | Error::Csv(_) => {
                Failure::Data(msg)
            }
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let args = match config::expand(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_ARGS);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ARGS } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Infer(a) => run_infer(a),
        Command::Eval(a) => run_eval(a),
        Command::Bench(a) => run_bench(a),
        Command::CountMacs(a) => run_count_macs(a),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Args(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_ARGS)
        }
        Err(Failure::Data(m)) => {
            eprintln!("data error: {m}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("numeric failure: {m}");
            ExitCode::from(EXIT_NUMERIC)
        }
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let spec = DegradationSpec {
        blur: a.blur,
        blur_sigma: a.blur_sigma,
        blur_kernel_side: a.blur_kernel,
        ..DegradationSpec::bicubic(a.scale)
    };
    spec.validate()?;
    if a.size == 0 || a.size % a.scale != 0 {
        return Err(Failure::Args(format!(
            "--size {} must be a positive multiple of --scale {}",
            a.size, a.scale
        )));
    }
    let images = gen_synthetic_dataset(&DatasetSpec::new(a.seed, a.n, a.size))?;
    let rows = write_dataset(&a.out, &images, &spec)?;
    let mut m = RunManifest::new("gen-data", &a, Some(a.seed));
    m.add_output(&a.out.join(lswinsr::data::MANIFEST_FILE))?;
    for r in &rows {
        m.add_output(&a.out.join(&r.path_hr))?;
        m.add_output(&a.out.join(&r.path_lr))?;
    }
    m.write(&manifest_path(&a.out))?;
    println!("wrote {} image pairs to {}", rows.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> CmdResult {
    let model = a.model.config(a.scale);
    model.validate()?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        weight_decay: a.weight_decay,
        seed: a.seed,
        patch: a.patch,
        val_interval: a.val_interval,
        cosine_decay: !a.no_cosine,
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mut data = load_dataset(&a.data)?;
    let val = match &a.val_data {
        Some(dir) => load_dataset(dir)?,
        None => {
            if !(0.0..1.0).contains(&a.val_fraction) {
                return Err(Failure::Args("--val-fraction must be in [0, 1)".into()));
            }
            let n_val = ((data.len() as f64 * a.val_fraction).floor() as usize).min(data.len() - 1);
            data.split_off(data.len() - n_val)
        }
    };
    for p in data.iter().chain(&val) {
        if p.hr.dim(1) != p.lr.dim(1) * a.scale {
            return Err(Failure::Data(format!(
                "pair {} is not a x{} pair",
                p.id, a.scale
            )));
        }
    }
    eprintln!(
        "training on {} pairs ({} held out), {} steps, {} parameters",
        data.len(),
        val.len(),
        cfg.steps,
        lswinsr::model::param_count(&lswinsr::model::init_weights(&model, cfg.seed)?)
    );
    let report_every = (cfg.steps / 20).max(1);
    let out = lswinsr::train::train_from(
        lswinsr::model::init_weights(&model, cfg.seed)?,
        &model,
        &cfg,
        &data,
        &val,
        |step, loss| {
            if step % report_every == 0 {
                eprintln!("step {step:>6}  loss {loss:.5}");
            }
        },
    )?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("model.ckpt");
    let loss = a.out.join("loss.csv");
    let valid = a.out.join("validation.csv");
    save_checkpoint(&ckpt, &out.weights, &model)?;
    save_loss_csv(&loss, &out.losses)?;
    write_validation_csv(std::fs::File::create(&valid)?, &out.validation)?;
    if let Some(&(step, p)) = out.validation.last() {
        let base = lswinsr::train::bicubic_psnr(&val)?;
        println!("validation PSNR after {step} steps: {p:.3} dB (bicubic {base:.3} dB)");
    }
    let mut m = RunManifest::new("train", &a, Some(a.seed));
    for p in [&ckpt, &loss, &valid] {
        m.add_output(p)?;
    }
    m.write(&manifest_path(&a.out))?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn ppm_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    v.sort();
    Ok(v)
}

fn run_infer(a: InferArgs) -> CmdResult {
    let (weights, cfg) = load_checkpoint(&a.ckpt)?;
    let consts = weights.constants();
    let jobs: Vec<(PathBuf, PathBuf)> = if a.input.is_dir() {
        std::fs::create_dir_all(&a.out)?;
        ppm_files(&a.input)?
            .into_iter()
            .map(|p| {
                let o = a.out.join(p.file_name().expect("listed files have names"));
                (p, o)
            })
            .collect()
    } else {
        vec![(a.input.clone(), a.out.clone())]
    };
    if jobs.is_empty() {
        return Err(Failure::Data(format!(
            "no .ppm files in {}",
            a.input.display()
        )));
    }
    let mut m = RunManifest::new("infer", &a, None);
    for (src, dst) in &jobs {
        let lr = ppm_read(src)?;
        let sr = infer(&consts, &cfg, &lr)?;
        if !sr.is_finite() {
            return Err(Failure::Numeric(format!(
                "non-finite output for {}",
                src.display()
            )));
        }
        ppm_write(dst, &sr)?;
        m.add_output(dst)?;
    }
    m.write(&manifest_path(&a.out))?;
    println!("wrote {} image(s)", jobs.len());
    Ok(())
}

fn run_eval(a: EvalArgs) -> CmdResult {
    let refs = ppm_files(&a.ref_dir)?;
    if refs.is_empty() {
        return Err(Failure::Data(format!(
            "no .ppm files in {}",
            a.ref_dir.display()
        )));
    }
    let mut report = MetricsReport::default();
    for r in &refs {
        let name = r.file_name().expect("listed files have names");
        let p = a.pred_dir.join(name);
        if !p.exists() {
            return Err(Failure::Data(format!("missing prediction {}", p.display())));
        }
        let id = r
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        report.push(ImageMetrics::compute(id, &ppm_read(&p)?, &ppm_read(r)?)?);
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| a.pred_dir.join("metrics.csv"));
    report.save_csv(&out)?;
    let mut m = RunManifest::new("eval", &a, None);
    m.add_output(&out)?;
    m.write(&manifest_path(&out))?;
    println!(
        "{} images: PSNR {:.3} dB, SSIM {:.2} %, MAE {:.3} %",
        report.images.len(),
        report.mean_psnr(),
        report.mean_ssim(),
        report.mean_mae()
    );
    Ok(())
}

fn run_bench(a: BenchArgs) -> CmdResult {
    let base = a.model.config();
    let opts = BenchOptions {
        windows: a.windows.clone(),
        input_shape: [a.batch, 3, a.size, a.size],
        warmup: a.warmup,
        reps: a.reps,
        threads: a.threads,
        macs_only: a.macs_only,
        seed: 0,
    };
    let rows = compare_report(&base, &opts)?;
    write_compare_csv(std::fs::File::create(&a.out)?, &rows)?;
    print!("{}", summarize(&rows));
    println!("threads: {}", a.threads);
    let mut m = RunManifest::new("bench", &a, Some(opts.seed));
    m.add_output(&a.out)?;
    m.write(&manifest_path(&a.out))?;
    Ok(())
}

fn run_count_macs(a: CountMacsArgs) -> CmdResult {
    let cfg = a
        .model
        .config()
        .with_kind(a.attention)
        .with_window(a.window);
    print!("{}", count_macs(&cfg, a.size, a.size)?.render());
    Ok(())
}

fn run_selftest() -> CmdResult {
    let results = lswinsr::selftest::run_all(|r| {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    });
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(Failure::Numeric(format!(
            "{failed} self-test check(s) failed"
        )));
    }
    println!("all {} checks passed", results.len());
    Ok(())
}
