//! End-to-end runs of the `consingan` binary on tiny images.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use consingan::io::{load_image, save_image};
use consingan::tensor::Tensor;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_consingan"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn consingan")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn gradient_image(h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (x as f32 / w as f32) * 1.4 - 0.7 + (y as f32 / h as f32 - 0.5) * 0.3 * (c as f32 - 1.0);
                data.push(v);
            }
        }
    }
    Tensor::new(vec![3, h, w], data)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Trains a two-stage model with a tiny width into `out`.
fn train_tiny(dir: &Path, out: &Path, extra: &[&str]) -> PathBuf {
    let input = dir.join("train.png");
    if !input.exists() {
        save_image(&gradient_image(32, 40), &input).unwrap();
    }
    let mut args = vec![
        "train",
        "--input",
        p(&input),
        "--out",
        p(out),
        "--stages",
        "2",
        "--stages-window",
        "2",
        "--iters",
        "3",
        "--channels",
        "4",
        "--seed",
        "7",
    ];
    args.extend_from_slice(extra);
    PathBuf::from(ok(&args).trim())
}

#[test]
fn train_writes_the_run_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let last = train_tiny(dir.path(), &out, &[]);
    assert_eq!(last, out.join("checkpoints").join("stage_01"));
    for f in [
        "manifest.json",
        "config.toml",
        "losses/stage_00.csv",
        "losses/stage_01.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(last.join("meta.json").is_file());
    let csv = fs::read_to_string(out.join("losses/stage_01.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,critic_loss,adv,rec,total"));
    assert_eq!(csv.lines().count(), 4);
    let manifest = fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("wall_clock"));
}

#[test]
fn deterministic_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train_tiny(dir.path(), &a, &["--deterministic"]);
    train_tiny(dir.path(), &b, &["--deterministic"]);
    for f in [
        "manifest.json",
        "config.toml",
        "checkpoints/stage_01/meta.json",
        "checkpoints/stage_01/stage_001.bin",
        "checkpoints/stage_01/critic.bin",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn resume_of_a_finished_run_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    train_tiny(dir.path(), &out, &["--deterministic"]);
    let before = fs::read(out.join("checkpoints/stage_01/stage_001.bin")).unwrap();
    let last = ok(&["train", "--resume", p(&out)]);
    assert_eq!(PathBuf::from(last.trim()), out.join("checkpoints").join("stage_01"));
    assert_eq!(
        fs::read(out.join("checkpoints/stage_01/stage_001.bin")).unwrap(),
        before
    );
}

#[test]
fn generate_harmonize_fine_tune_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    train_tiny(dir.path(), &run_dir, &[]);

    let samples = dir.path().join("samples");
    ok(&[
        "generate",
        "--ckpt",
        p(&run_dir),
        "--n",
        "2",
        "--scale-w",
        "2",
        "--out",
        p(&samples),
    ]);
    for name in ["sample_000.png", "sample_001.png"] {
        let (_, h, w) = load_image(&samples.join(name)).unwrap().chw();
        assert_eq!((h, w), (32, 80));
    }

    // A composite with a slightly different aspect ratio is resized.
    let naive = dir.path().join("naive.png");
    let mut composite = gradient_image(33, 41).to_vec();
    composite[..100].iter_mut().for_each(|v| *v = 0.9);
    save_image(&Tensor::new(vec![3, 33, 41], composite), &naive).unwrap();
    let harmonized = dir.path().join("h.png");
    ok(&[
        "harmonize",
        "--ckpt",
        p(&run_dir),
        "--naive",
        p(&naive),
        "--out",
        p(&harmonized),
    ]);
    assert_eq!(load_image(&harmonized).unwrap().chw(), (3, 32, 40));

    let tuned = dir.path().join("ft.png");
    let tuned_ckpt = dir.path().join("ft_ckpt");
    ok(&[
        "fine-tune",
        "--ckpt",
        p(&run_dir),
        "--naive",
        p(&naive),
        "--iters",
        "2",
        "--out",
        p(&tuned),
        "--save-ckpt",
        p(&tuned_ckpt),
    ]);
    assert_eq!(load_image(&tuned).unwrap().chw(), (3, 32, 40));
    assert!(tuned_ckpt.join("meta.json").is_file());

    let report = dir.path().join("eval.json");
    let line = ok(&[
        "evaluate",
        "--ckpt",
        p(&run_dir),
        "--n",
        "2",
        "--extractor",
        "random-conv-v1",
        "--out",
        p(&report),
    ]);
    assert!(line.contains("diversity"), "{line}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["diversity"].as_f64().unwrap() >= 0.0);
    assert!(json["sifid"].as_f64().unwrap() >= 0.0);
}

#[test]
fn inspect_prints_both_schedules() {
    let text = ok(&["inspect", "--size", "188x250"]);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("# image 188x250"));
    assert!(lines[1].contains("new_skewed") && lines[1].contains("old_geometric"));
    assert_eq!(lines.len(), 2 + 6);
    assert!(lines.last().unwrap().contains("188x250"));
}

#[test]
fn failures_map_to_categories_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    let out = run(&["inspect", "--size", "188x250", "--r", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[usage]:"));

    let missing = dir.path().join("nope.png");
    let out = run(&["train", "--input", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[io]:"));

    let empty = dir.path().join("empty_ckpt");
    fs::create_dir_all(&empty).unwrap();
    fs::write(empty.join("meta.json"), "{\"format\": \"something-else\"}").unwrap();
    let out = run(&["generate", "--ckpt", p(&empty), "--out", p(&dir.path().join("g"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error[checkpoint]:"));

    let out = run(&["evaluate", "--ckpt", p(&empty), "--extractor", "no-such-net"]);
    assert_ne!(out.status.code(), Some(0));

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}
