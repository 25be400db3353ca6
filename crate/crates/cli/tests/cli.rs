//! Subcommands driven through the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[arch]
image_size = 32
base_channels = 2
n_residual_blocks = 1
n_discriminator_layers = 2
segmentor_depth = 2

[train]
epochs = 2
batch_size = 4
lr_seg = 1e-3
pretrain_epochs = 1
post_seg_epochs = 1
checkpoint_every = 1

[phantom]
image_size = 32

[data]
source = "src"
target = "tgt"
eval = "eval"

[ablation]
seeds = [0]
source_patients = 2
source_slices = 2
target_patients = 2
target_slices = 2
eval_patients = 2
eval_slices = 2
"#;

fn stx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stx"))
        .current_dir(dir)
        .args(args)
        .env_remove("STX_TRAIN__EPOCHS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = stx(dir, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn fail(dir: &Path, args: &[&str]) -> String {
    let o = stx(dir, args);
    assert!(!o.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(o.stderr).unwrap()
}

/// Tiny config plus source (2x3), target (2x3) and eval (2x5) datasets.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), TINY).unwrap();
    ok(d, &["--config", "c.toml", "--seed", "1", "--out", "src", "phantom", "generate", "--domain", "source", "--patients", "2", "--slices", "3"]);
    ok(d, &["--config", "c.toml", "--seed", "2", "--out", "tgt", "phantom", "generate", "--domain", "target", "--patients", "2", "--slices", "3"]);
    ok(d, &["--config", "c.toml", "--seed", "3", "--out", "eval", "phantom", "generate", "--domain", "target", "--patients", "2", "--slices", "5"]);
    dir
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else if e.file_name().unwrap() != "resolved_config.toml" {
                out.push((e.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&e).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn phantom_generation_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = |out| ["--seed", "7", "--out", out, "phantom", "generate", "--domain", "target", "--patients", "2", "--slices", "2"];
    let msg = ok(d, &args("a"));
    assert!(msg.contains("4 target slices"), "{msg}");
    ok(d, &args("b"));
    let (a, b) = (files(&d.join("a")), files(&d.join("b")));
    assert_eq!(a.len(), 9);
    assert_eq!(a, b);
    assert!(d.join("a/resolved_config.toml").exists());
    let err = fail(d, &args("a"));
    assert!(err.contains("manifest.json"), "{err}");
}

#[test]
fn phantom_generation_reports_unwritable_paths() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let err = fail(dir.path(), &["--out", "blocker/sub", "phantom", "generate", "--domain", "source", "--patients", "1", "--slices", "1"]);
    assert!(err.contains("blocker"), "{err}");
}

#[test]
fn configuration_errors_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.toml"), "[train]\nlamda_shape = 2.0\n").unwrap();
    let err = fail(d, &["--config", "typo.toml", "train", "--mode", "unet"]);
    assert!(err.contains("lamda_shape"), "{err}");

    std::fs::write(d.join("bad.toml"), "[train]\nbatch_size = 0\nadam_beta1 = 1.5\n").unwrap();
    let err = fail(d, &["--config", "bad.toml", "train", "--mode", "unet"]);
    for needle in ["train.batch_size", "train.adam_beta1", "data.source", "data.target"] {
        assert!(err.contains(needle), "missing {needle} in: {err}");
    }
}

#[test]
fn environment_overrides_reach_the_resolved_config() {
    let dir = workspace();
    let d = dir.path();
    let o = Command::new(env!("CARGO_BIN_EXE_stx"))
        .current_dir(d)
        .args(["--config", "c.toml", "--out", "run", "train", "--mode", "unet"])
        .env("STX_TRAIN__PRETRAIN_EPOCHS", "2")
        .env("STX_TRAIN__WEIGHTS__LAMBDA_SHAPE", "0.5")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = std::fs::read_to_string(d.join("run/resolved_config.toml")).unwrap();
    assert!(resolved.contains("pretrain_epochs = 2"), "{resolved}");
    assert!(resolved.contains("lambda_shape = 0.5"), "{resolved}");
    let log = std::fs::read_to_string(d.join("run/pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn unet_training_writes_checkpoint_and_source_dice_log() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "c.toml", "--out", "unet", "train", "--mode", "unet"]);
    assert!(d.join("unet/final.ckpt").exists());
    let log = std::fs::read_to_string(d.join("unet/pretrain_log.csv")).unwrap();
    assert!(log.starts_with("epoch,mean_ce,train_myo_dice"));
    assert!(!d.join("unet/loss.csv").exists());
}

#[test]
fn deterministic_training_reproduces_loss_logs() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "c.toml", "--deterministic", "--out", "a", "train", "--mode", "shapetransfer"]);
    ok(d, &["--config", "c.toml", "--deterministic", "--out", "b", "train", "--mode", "shapetransfer"]);
    let a = std::fs::read(d.join("a/loss.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/loss.csv")).unwrap());
    assert!(d.join("a/loss_curve.svg").exists());
    assert!(d.join("a/checkpoints/epoch_0002.ckpt").exists());

    // rerunning from the persisted config reproduces the run
    ok(d, &["--config", "a/resolved_config.toml", "--out", "c", "train", "--mode", "shapetransfer"]);
    assert_eq!(a, std::fs::read(d.join("c/loss.csv")).unwrap());

    ok(d, &["--config", "c.toml", "--out", "ns", "train", "--mode", "noshape"]);
    let ns = std::fs::read_to_string(d.join("ns/loss.csv")).unwrap();
    let header: Vec<&str> = ns.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "l_shape").unwrap();
    for line in ns.lines().skip(1) {
        assert_eq!(line.split(',').nth(col).unwrap().parse::<f64>().unwrap(), 0.0);
    }
    assert!(d.join("ns/post_seg_log.csv").exists());
}

#[test]
fn resume_continues_the_loss_log_exactly() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "c.toml", "--out", "full", "train", "--mode", "shapetransfer"]);
    std::fs::create_dir_all(d.join("part")).unwrap();
    let full = std::fs::read_to_string(d.join("full/loss.csv")).unwrap();
    let first: String = full.lines().filter(|l| !l.starts_with("1,")).map(|l| format!("{l}\n")).collect();
    std::fs::write(d.join("part/loss.csv"), first).unwrap();
    ok(d, &["--config", "c.toml", "--out", "part", "train", "--mode", "shapetransfer", "--resume", "full/checkpoints/epoch_0001.ckpt"]);
    assert_eq!(std::fs::read_to_string(d.join("part/loss.csv")).unwrap(), full);
    assert_eq!(std::fs::read(d.join("part/final.ckpt")).unwrap(), std::fs::read(d.join("full/final.ckpt")).unwrap());
}

#[test]
fn segment_and_evaluate_round_trip() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "c.toml", "--out", "unet", "train", "--mode", "unet"]);
    ok(d, &["--config", "c.toml", "--out", "seg", "segment", "--checkpoint", "unet/final.ckpt", "--input", "eval"]);
    let masks: Vec<_> = std::fs::read_dir(d.join("seg/masks")).unwrap().collect();
    assert_eq!(masks.len(), 10);
    ok(d, &["--config", "c.toml", "--out", "seg2", "segment", "--checkpoint", "unet/final.ckpt", "--input", "eval"]);
    assert_eq!(files(&d.join("seg/masks")), files(&d.join("seg2/masks")));

    let table = ok(d, &["--config", "c.toml", "--out", "ev", "evaluate", "--pred", "seg", "--gt", "eval"]);
    let rows = table.lines().filter(|l| !l.starts_with('#') && !l.starts_with("metric")).count();
    assert_eq!(rows, 3 * 2 + 3 * 2);
    assert!(d.join("ev/metrics.csv").exists());

    let perfect = ok(d, &["--config", "c.toml", "--out", "ev2", "evaluate", "--pred", "eval", "--gt", "eval", "--spacing", "2,1,1"]);
    for line in perfect.lines().filter(|l| l.starts_with("Dice") || l.starts_with("Jaccard")) {
        assert!(line.contains("1.0000 ± 0.0000"), "{line}");
    }
}

#[test]
fn segment_rejects_inputs_of_another_size() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "c.toml", "--out", "unet", "train", "--mode", "unet"]);
    std::fs::write(d.join("big.toml"), "[phantom]\nimage_size = 48\n").unwrap();
    ok(d, &["--config", "big.toml", "--out", "big", "phantom", "generate", "--domain", "target", "--patients", "1", "--slices", "1"]);
    let err = fail(d, &["--config", "c.toml", "--out", "seg", "segment", "--checkpoint", "unet/final.ckpt", "--input", "big"]);
    assert!(err.contains("48"), "{err}");
}

#[test]
fn evaluate_names_missing_reference_files() {
    let dir = workspace();
    let d = dir.path();
    std::fs::remove_file(d.join("eval/masks/p001_s02.png")).unwrap();
    let err = fail(d, &["--config", "c.toml", "--out", "ev", "evaluate", "--pred", "eval", "--gt", "eval"]);
    assert!(err.contains("p001_s02.png"), "{err}");
}

#[test]
fn ablation_table_has_three_methods_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.toml"), TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    ok(d, &["--config", "c.toml", "--out", "a", "ablate"]);
    ok(d, &["--config", "c.toml", "--out", "b", "ablate"]);
    let a = std::fs::read_to_string(d.join("a/ablation.csv")).unwrap();
    assert_eq!(a, std::fs::read_to_string(d.join("b/ablation.csv")).unwrap());
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "method,LV_mean,LV_std,RV_mean,RV_std,Myo_mean,Myo_std");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("U-Net,") && lines[2].starts_with("No-Shape GAN,") && lines[3].starts_with("Shape-Transfer GAN,"));
    assert!(d.join("a/ablation.svg").exists());
    let runs = std::fs::read_to_string(d.join("a/ablation_runs.csv")).unwrap();
    assert!(runs.lines().skip(1).all(|l| l.ends_with(",0")), "{runs}");
}
