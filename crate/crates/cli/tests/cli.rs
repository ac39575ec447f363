//! Runs the `bidiff` binary end to end on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.train_count = 2
data.test_count = 2
data.frames = 3
data.size = 8
model.channels = 4,8
model.head_dim = 4
model.groups = 2
model.time_dim = 8
schedule.steps = 4
sampler.steps = 4
sampler.recurrence = 2
pretrain.iterations = 2
pretrain.batch_size = 1
finetune.iterations = 2
finetune.batch_size = 1
";

fn bidiff(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bidiff"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = bidiff(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_data_writes_dataset_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["gen-data", "--generator", "accel_ball", "--count", "4", "--frames", "16", "--size", "32", "--seed", "1", "--out", p(&d)]);
    assert!(d.join("dataset.bin").is_file());
    assert!(d.join("config.snapshot").is_file());
    let snapshot = fs::read_to_string(d.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("data.train_count = 4"));
}

#[test]
fn usage_and_config_errors_have_distinct_exit_codes() {
    assert_eq!(bidiff(&["frobnicate"]).status.code(), Some(2));
    let out = bidiff(&["gen-data", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    assert_eq!(
        bidiff(&["gen-data", "--generator", "spiral", "--count", "1", "--out", p(&d)]).status.code(),
        Some(3)
    );
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no.such.key = 1\n").unwrap();
    let code = bidiff(&["run-experiment", "--config", p(&cfg), "--out", p(&d)]).status.code();
    assert_eq!(code, Some(3));
    let missing = dir.path().join("missing.bin");
    assert_eq!(
        bidiff(&["pretrain", "--data", p(&missing), "--out-checkpoint", p(&d)]).status.code(),
        Some(1)
    );
}

/// Every command, twice, with byte-identical artifacts.
#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let root = dir.path().join("run");
    let run = || {
        let data = root.join("data");
        ok(&["gen-data", "--generator", "accel_ball", "--count", "2", "--frames", "3", "--size", "8", "--seed", "5", "--out", p(&data)]);
        let ds = data.join("dataset.bin");
        let fwd = root.join("fwd");
        ok(&["pretrain", "--data", p(&ds), "--config", p(&cfg), "--out-checkpoint", p(&fwd)]);
        let fck = fwd.join("checkpoint.bin");
        let bwd = root.join("bwd");
        ok(&["finetune-backward", "--forward-checkpoint", p(&fck), "--data", p(&ds), "--config", p(&cfg), "--mode", "full", "--out-checkpoint", p(&bwd)]);
        let bwd_ra = root.join("bwd_wo_ra");
        ok(&["finetune-backward", "--forward-checkpoint", p(&fck), "--data", p(&ds), "--config", p(&cfg), "--mode", "wo_ra", "--out-checkpoint", p(&bwd_ra)]);
        let bck = bwd.join("checkpoint.bin");
        let samples = root.join("samples");
        ok(&["sample", "--mode", "dual", "--fwd-checkpoint", p(&fck), "--bwd-checkpoint", p(&bck), "--pairs", p(&data.join("pairs.bin")), "--steps", "4", "--recurrence", "2", "--seed", "3", "--dump-frames", "--out", p(&samples)]);
        let first = samples.join("frames").join("clip000_000.ppm");
        let last = samples.join("frames").join("clip000_002.ppm");
        let single = root.join("single");
        ok(&["sample", "--mode", "trf", "--fwd-checkpoint", p(&fck), "--first-frame", p(&first), "--last-frame", p(&last), "--steps", "4", "--recurrence", "1", "--out", p(&single)]);
        let report = root.join("report");
        ok(&["evaluate", "--generated", p(&samples.join("samples.bin")), "--pairs", p(&data.join("pairs.bin")), "--gt", p(&ds), "--out", p(&report)]);
        let exp = root.join("exp");
        ok(&["run-experiment", "--config", p(&cfg), "--out", p(&exp)]);
        vec![
            read(&ds),
            read(&data.join("pairs.bin")),
            read(&data.join("config.snapshot")),
            read(&fck),
            read(&fwd.join("loss.tsv")),
            read(&bck),
            read(&bwd_ra.join("checkpoint.bin")),
            read(&samples.join("samples.bin")),
            read(&first),
            read(&single.join("samples.bin")),
            read(&report.join("report.txt")),
            read(&exp.join("comparison.tsv")),
            read(&exp.join("report.txt")),
            read(&exp.join("config.snapshot")),
            read(&fwd.join("config.snapshot")),
            read(&bwd.join("config.snapshot")),
            read(&samples.join("config.snapshot")),
            read(&single.join("config.snapshot")),
            read(&report.join("config.snapshot")),
        ]
    };
    let a = run();
    fs::remove_dir_all(&root).unwrap();
    let b = run();
    for (i, (x, y)) in a.iter().zip(&b).enumerate() {
        assert!(x == y, "artifact {i} differs between runs");
    }

    let table = String::from_utf8(a[11].clone()).unwrap();
    for method in ["dual", "trf", "wo_ra", "wo_ft"] {
        assert!(table.lines().any(|l| l.starts_with(&format!("{method}\t"))), "{method} missing");
    }
}

#[test]
fn sample_requires_backward_checkpoint_for_dual() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--generator", "shrink_slide", "--count", "1", "--frames", "3", "--size", "8", "--out", p(&data)]);
    let fwd = dir.path().join("fwd");
    ok(&["pretrain", "--data", p(&data.join("dataset.bin")), "--config", p(&cfg), "--out-checkpoint", p(&fwd)]);
    let out = bidiff(&["sample", "--mode", "dual", "--fwd-checkpoint", p(&fwd.join("checkpoint.bin")), "--pairs", p(&data.join("pairs.bin")), "--out", p(&dir.path().join("s"))]);
    assert_eq!(out.status.code(), Some(3));
}
