use std::path::{Path, PathBuf};
use std::process::Command;

use coda::pipeline::ExperimentLedger;

fn smoke() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn coda(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_coda")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn in_dir(cmd: &str, dir: &Path, extra: &[&str]) -> (i32, String, String) {
    let cfg = smoke();
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];
    args.extend_from_slice(extra);
    coda(&args)
}

fn ok(r: (i32, String, String)) -> String {
    assert_eq!(r.0, 0, "stderr: {}", r.2);
    r.1
}

#[test]
fn full_chain_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for cmd in ["pretrain", "adapt", "eval", "train-gen", "decode", "heatmap"] {
        ok(in_dir(cmd, d, &[]));
    }
    ok(in_dir("ablate", d, &["--ladder", "components"]));
    ok(in_dir("levels", d, &["--levels", "1..3"]));
    for file in [
        "pretrained.ckpt",
        "tokenizer.ckpt",
        "metrics.jsonl",
        "eval.jsonl",
        "generator.ckpt",
        "generator_loss.csv",
        "samples.grids",
        "samples.csv",
        "heatmap.csv",
        "ablation_components.csv",
        "levels.csv",
    ] {
        assert!(d.join(file).is_file(), "{file} missing");
    }
    let ablation = std::fs::read_to_string(d.join("ablation_components.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 5);
    let levels = std::fs::read_to_string(d.join("levels.csv")).unwrap();
    assert_eq!(levels.lines().count(), 4);

    let ledger = ExperimentLedger::read(&d.join("ledger-adapt.json")).unwrap();
    assert_eq!(ledger.command, "adapt");
    assert!(ledger.run_id.starts_with("adapt-s7-"));
}

#[test]
fn identical_runs_produce_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(in_dir("pretrain", d, &[]));
        ok(in_dir("adapt", d, &[]));
    }
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "metrics.jsonl"), read(b.path(), "metrics.jsonl"));
    assert_eq!(read(a.path(), "tokenizer.ckpt"), read(b.path(), "tokenizer.ckpt"));

    let first = ok(in_dir("eval", a.path(), &[]));
    let first_file = read(a.path(), "eval.jsonl");
    let second = ok(in_dir("eval", a.path(), &[]));
    assert_eq!(first, second);
    assert_eq!(first_file, read(a.path(), "eval.jsonl"));
}

#[test]
fn seed_override_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    ok(in_dir("pretrain", a.path(), &[]));
    ok(in_dir("pretrain", b.path(), &["--seed", "8"]));
    let read = |d: &Path| std::fs::read(d.join("pretrained.ckpt")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(coda(&["--help"]).0, 0);
    assert_eq!(coda(&["frobnicate"]).0, 2);
    assert_eq!(coda(&["eval", "--config", "/nonexistent/run.toml", "--out", d]).0, 2);
    assert_eq!(coda(&["levels", "--levels", "3..1", "--out", d]).0, 2);

    let (code, _, err) = in_dir("adapt", dir.path(), &[]);
    assert_eq!(code, 1);
    assert!(!err.is_empty());
    assert_eq!(in_dir("dynamics", dir.path(), &[]).0, 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[quantizer]\nlevels = 0\n").unwrap();
    assert_eq!(coda(&["eval", "--config", bad.to_str().unwrap(), "--out", d]).0, 2);
}

#[test]
fn dynamics_on_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("points.toml");
    std::fs::write(
        &cfg,
        "[data]\nkind = \"mixture2d\"\ncount = 128\neval_count = 64\n\n\
         [quantizer]\nlevels = 1\ncodebook_size = 8\natt_dim = 2\n\n\
         [train]\nsteps = 20\n\n[adapt]\nwhere = \"none\"\neval_every = 10\n",
    )
    .unwrap();
    let args = [
        "dynamics",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--every",
        "5",
    ];
    ok(coda(&args));
    let csv = std::fs::read_to_string(dir.path().join("dynamics.csv")).unwrap();
    // header plus 8 codes at steps 0, 5, 10, 15, 20
    assert_eq!(csv.lines().count(), 1 + 8 * 5);
}
