use std::path::Path;
use std::process::{Command, Output};

use mgan_core::detector::{write_detections, Detection};
use mgan_core::eval::{EvalReport, MISS_RATE_FLOOR};
use mgan_core::synth::io::{read_split_annotations, ParseMode};

fn mgan(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mgan"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MGAN_SEED")
        .env_remove("MGAN_RUN_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate(cwd: &Path, dir: &str, count: &str) {
    ok(&mgan(&["generate", "--out", dir, "--count", count, "--seed", "3", "--prefix", dir], cwd));
}

#[test]
fn eval_of_ground_truth_sits_on_the_floor() {
    let tmp = tempfile::tempdir().unwrap();
    generate(tmp.path(), "val", "12");
    let (_, gt, _) = read_split_annotations(&tmp.path().join("val"), ParseMode::Strict).unwrap();
    let dets: Vec<Detection> = gt
        .values()
        .flatten()
        .map(|a| Detection {
            bbox: a.full_box,
            score: 1.0,
            image_id: a.image_id.clone(),
        })
        .collect();
    write_detections(&tmp.path().join("gt.jsonl"), &dets).unwrap();
    ok(&mgan(
        &["eval", "--detections", "gt.jsonl", "--data", "val", "--out", "report.json"],
        tmp.path(),
    ));
    let report = EvalReport::load(&tmp.path().join("report.json")).unwrap();
    assert_eq!(report.subsets.len(), 3);
    for s in &report.subsets {
        assert_eq!(s.lamr, MISS_RATE_FLOOR, "{}", s.subset.name);
    }
}

#[test]
fn grad_check_exits_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mgan(&["grad-check", "--trials", "3", "--out", "grads.json"], tmp.path());
    ok(&out);
    let text = std::fs::read_to_string(tmp.path().join("grads.json")).unwrap();
    let entries: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert!(entries.iter().all(|e| e["passed"] == true && e["max_rel_error"].as_f64().unwrap() < 1e-4));
}

const TINY: &str = r#"
seed = 5
[data]
train_dir = "train"
[model]
channels = 2
fc_width = 8
[optim]
schedule = [{ epochs = 1, lr = 1e-3 }, { epochs = 1, lr = 1e-4 }]
"#;

#[test]
fn train_twice_gives_identical_logs_and_the_pipeline_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();
    generate(cwd, "train", "4");
    generate(cwd, "val", "3");
    std::fs::write(cwd.join("tiny.toml"), TINY).unwrap();
    for run in ["a", "b"] {
        ok(&mgan(&["train", "--config", "tiny.toml", "--set", &format!("run_dir=\"{run}\"")], cwd));
    }
    let a = std::fs::read(cwd.join("a/loss_log.jsonl")).unwrap();
    let b = std::fs::read(cwd.join("b/loss_log.jsonl")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(cwd.join("a/config.toml").exists());
    assert!(cwd.join("a/checkpoints/epoch_002.ckpt").exists());

    ok(&mgan(
        &["detect", "--checkpoint", "a/model.ckpt", "--data", "val", "--out", "dets.jsonl"],
        cwd,
    ));
    ok(&mgan(
        &["eval", "--detections", "dets.jsonl", "--data", "val", "--subsets", "R,HO", "--out", "a/report.json"],
        cwd,
    ));
    ok(&mgan(&["plot", "--run", "tiny=a/report.json", "--out", "curves.svg"], cwd));
    ok(&mgan(&["plot", "--run", "tiny=a/report.json", "--out", "curves.csv"], cwd));
    let csv = std::fs::read_to_string(cwd.join("curves.csv")).unwrap();
    assert!(csv.starts_with("label,subset,threshold,fppi,miss_rate"));
    assert!(std::fs::read_to_string(cwd.join("curves.svg")).unwrap().contains("<svg"));
}

#[test]
fn failures_exit_nonzero_and_name_the_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cwd = tmp.path();

    let out = mgan(&["frobnicate"], cwd);
    assert!(!out.status.success());

    let out = mgan(&["eval", "--detections", "missing.jsonl", "--data", "nowhere"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));

    std::fs::write(cwd.join("bad.toml"), "[model]\nchanels = 4\n").unwrap();
    let out = mgan(&["train", "--config", "bad.toml"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));

    let out = mgan(&["train", "--config", "absent.toml"], cwd);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.toml"));
}
