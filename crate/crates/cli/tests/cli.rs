use std::path::Path;
use std::process::{Command, Output};

fn lswinsr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lswinsr"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, seed: &str, n: &str, size: &str) {
    let out = lswinsr(&[
        "gen-data",
        "--seed",
        seed,
        "--n",
        n,
        "--size",
        size,
        "--out",
        s(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--embed-dim",
    "8",
    "--blocks",
    "1",
    "--window",
    "4",
    "--steps",
    "3",
    "--batch",
    "2",
    "--patch",
    "8",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", s(data), "--out", s(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    lswinsr(&args)
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    assert_eq!(lswinsr(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(lswinsr(&["train", "--steps", "x"]).status.code(), Some(2));
}

#[test]
fn missing_data_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&dir.path().join("nope"), &dir.path().join("run"), &[]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gen_data_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "5", "3", "16");
    let csv = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("id,path_hr,path_lr,scale,blur"));
    assert_eq!(csv.lines().count(), 4);
    let run: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(run["subcommand"], "gen-data");
    assert_eq!(run["seed"], 5);
    assert_eq!(run["sha256"].as_object().unwrap().len(), 7);
}

#[test]
fn training_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "1", "4", "16");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = train(&data, out, &[]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    for f in ["loss.csv", "model.ckpt", "validation.csv"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 4);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "1", "4", "16");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# tiny run\nsteps = 5\nbatch = 1\n").unwrap();
    let out = dir.path().join("run");
    let r = train(&data, &out, &["--config", s(&cfg), "--steps", "2"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);

    std::fs::write(&cfg, "no equals sign\n").unwrap();
    assert_eq!(
        train(&data, &out, &["--config", s(&cfg)]).status.code(),
        Some(2)
    );
}

#[test]
fn infer_upscales_and_eval_of_identical_sets_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "2", "2", "16");
    let run = dir.path().join("run");
    let r = train(&data, &run, &["--steps", "1", "--val-fraction", "0"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));

    let big = dir.path().join("big");
    std::fs::create_dir(&big).unwrap();
    let lr = lswinsr::Tensor::from_fn([3, 64, 64], |i| ((i[1] + 2 * i[2] + i[0]) % 9) as f64 / 8.0);
    lswinsr::data::ppm_write(big.join("x.ppm"), &lr).unwrap();
    let sr = dir.path().join("sr.ppm");
    let r = lswinsr(&[
        "infer",
        "--ckpt",
        s(&run.join("model.ckpt")),
        "--in",
        s(&big.join("x.ppm")),
        "--out",
        s(&sr),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        lswinsr::data::ppm_read(&sr).unwrap().shape(),
        &[3, 128, 128]
    );

    let sr_dir = dir.path().join("sr");
    let r = lswinsr(&[
        "infer",
        "--ckpt",
        s(&run.join("model.ckpt")),
        "--in",
        s(&data.join("lr")),
        "--out",
        s(&sr_dir),
    ]);
    assert!(r.status.success());
    assert_eq!(
        std::fs::read_dir(&sr_dir)
            .unwrap()
            .filter(|e| e
                .as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "ppm"))
            .count(),
        2
    );

    let csv = dir.path().join("m.csv");
    let hr = data.join("hr");
    let r = lswinsr(&[
        "eval",
        "--pred-dir",
        s(&hr),
        "--ref-dir",
        s(&hr),
        "--out",
        s(&csv),
    ]);
    assert!(r.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("image_id,psnr,ssim,mae"));
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(&f[1..], ["100.0", "100.0", "0.0"]);
    }
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"LSWR\x01junk").unwrap();
    let img = dir.path().join("x.ppm");
    lswinsr::data::ppm_write(&img, &lswinsr::Tensor::zeros([3, 4, 4])).unwrap();
    let r = lswinsr(&[
        "infer",
        "--ckpt",
        s(&ckpt),
        "--in",
        s(&img),
        "--out",
        s(&dir.path().join("y.ppm")),
    ]);
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn count_macs_and_macs_only_bench() {
    let r = lswinsr(&["count-macs", "--size", "64", "--window", "16"]);
    assert!(r.status.success());
    assert!(String::from_utf8_lossy(&r.stdout).contains("total"));

    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let r = lswinsr(&[
        "bench",
        "--macs-only",
        "--windows",
        "8,16",
        "--out",
        s(&csv),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = lswinsr::bench::read_compare_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 4);
}
