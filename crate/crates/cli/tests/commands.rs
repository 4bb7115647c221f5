use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kmod(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kmod"))
        .current_dir(dir)
        .env("KM_DETERMINISTIC", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

const TINY: &[&str] = &["--classes", "3", "--n-per-class", "6", "--image-size", "8", "--epochs", "2", "--base-width", "4"];

fn train_into(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    kmod(dir, &args)
}

#[test]
fn empty_mask_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kmod(dir.path(), &["train", "--mask", "none", "--out", "o"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("mask"));
}

#[test]
fn unknown_flags_and_ablation_values_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&kmod(dir.path(), &["train", "--bogus", "1"])), 2);
    let out = kmod(dir.path(), &["ablate", "--axis", "activation", "--values", "gelu", "--out", "a"]);
    assert_eq!(code(&out), 2);
    let out = kmod(dir.path(), &["ablate", "--axis", "width", "--values", "1", "--out", "a"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "epochs=1\nseed=4\n").unwrap();
    let out = train_into(dir.path(), "r", &["--config", "run.cfg", "--seed", "5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = fs::read_to_string(dir.path().join("r/manifest.txt")).unwrap();
    assert!(manifest.contains("\nseed=5\n"));
    assert!(manifest.contains("\nseeds=5\n"));
    // epochs=2 from TINY wins over the file as well.
    assert!(manifest.contains("\nepochs=2\n"));
    assert!(manifest.contains("config_digest="));
}

#[test]
fn training_writes_metrics_and_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_into(dir.path(), "a", &[]);
    let b = train_into(dir.path(), "b", &[]);
    assert_eq!(code(&a), 0, "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(code(&b), 0);
    let stdout = String::from_utf8_lossy(&a.stdout);
    let first = stdout.lines().next().unwrap();
    assert!(first.starts_with("epoch=0 split=train loss="), "{first}");
    for f in ["report.txt", "metrics.txt", "model.kmc", "task.kmd"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
    let manifests = fs::read_dir(dir.path().join("a"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("manifest"))
        .count();
    assert_eq!(manifests, 1);
}

#[test]
fn delta_round_trip_and_foreign_base() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_into(dir.path(), "a", &["--seed", "1"])), 0);
    assert_eq!(code(&train_into(dir.path(), "b", &["--seed", "2"])), 0);

    let export = kmod(dir.path(), &["delta", "export", "--checkpoint", "a/model.kmc", "--task", "t", "--out", "t.kmd"]);
    assert_eq!(code(&export), 0, "{}", String::from_utf8_lossy(&export.stderr));
    assert_eq!(code(&kmod(dir.path(), &["delta", "verify", "--base", "a/base.kmc", "--delta", "t.kmd"])), 0);
    assert_eq!(code(&kmod(dir.path(), &["delta", "verify", "--base", "b/base.kmc", "--delta", "t.kmd"])), 3);
    assert_eq!(
        code(&kmod(dir.path(), &["delta", "apply", "--base", "a/base.kmc", "--delta", "t.kmd", "--out", "m.kmc"])),
        0
    );

    let eval = |checkpoint: &str| {
        let mut args = vec!["eval", "--checkpoint", checkpoint];
        args.extend_from_slice(TINY);
        kmod(dir.path(), &args)
    };
    let (a, m) = (eval("a/model.kmc"), eval("m.kmc"));
    assert_eq!(code(&m), 0, "{}", String::from_utf8_lossy(&m.stderr));
    assert_eq!(a.stdout, m.stdout);

    assert_eq!(code(&kmod(dir.path(), &["delta", "verify", "--base", "missing.kmc", "--delta", "t.kmd"])), 1);
}

#[test]
fn delta_of_a_conv_trained_model_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_into(dir.path(), "f", &["--mask", "convolution,implicit,classifier"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("f/task.kmd").exists());
    let export = kmod(dir.path(), &["delta", "export", "--checkpoint", "f/model.kmc", "--task", "t", "--out", "t.kmd"]);
    assert_eq!(code(&export), 2);
}

#[test]
fn memory_report_prints_totals() {
    let dir = tempfile::tempdir().unwrap();
    let out = kmod(dir.path(), &["delta", "report", "--base-mb", "94", "--fraction", "0.014", "--tasks", "100"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("km_total_mb=225.6"), "{text}");
    assert!(text.contains("per_task_factor=71.4"), "{text}");
    assert!(text.contains("reduction_factor=41.7"), "{text}");
}

#[test]
fn ablation_table_has_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["ablate", "--axis", "depth", "--values", "1,2,8", "--seeds", "2", "--out", "abl"];
    args.extend_from_slice(TINY);
    let out = kmod(dir.path(), &args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(dir.path().join("abl/ablation.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("depth\tmean\tstd"));
    assert!(lines[3].starts_with("8\t"));
    assert!(dir.path().join("abl/manifest.txt").exists());
}
