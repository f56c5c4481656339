//! Drives the installed binary end to end through its public surface.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;
use unest::checkpoint;
use unest::model::{Model, ModelConfig};
use unest::nifti::write_raw;
use unest::train::synthetic_volume;

fn unest(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unest"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn micro_checkpoint(dir: &Path) -> std::path::PathBuf {
    let config = ModelConfig::micro();
    let model = Model::<f32>::build(&config, 5).unwrap();
    let path = dir.join("model.unst");
    checkpoint::save(&model, 0, &path).unwrap();
    path
}

#[test]
fn selftest_passes() {
    let out = unest(&["selftest"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS  blockify_roundtrip"));
    assert!(!text.contains("FAIL"));
    assert!(text.contains("all 11 checks passed"));
}

#[test]
fn gradcheck_primitives_pass() {
    let out = unest(&["gradcheck", "--ops-only"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("PASS  conv3d"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn inspect_reports_scale_hyperparameters() {
    let out = unest(&["inspect", "--scale", "B"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for line in [
        "depths = 2 2 8",
        "heads = 4 8 16",
        "widths = 128 256 512",
        "patch = 4",
        "classes = 133",
        "window = 96 96 96",
        "64 blocks of 216 tokens",
        "published reference for scale B: 87.3M parameters",
        "261.7 GFLOPs",
    ] {
        assert!(text.contains(line), "missing {line:?} in:\n{text}");
    }
}

#[test]
fn inspect_reads_a_checkpoint_header() {
    let dir = TempDir::new().unwrap();
    let path = micro_checkpoint(dir.path());
    let out = unest(&["inspect", "--checkpoint", path.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("at step 0"));
    assert!(text.contains("widths = 8 16 32"));
}

#[test]
fn train_requires_a_model_source() {
    let out = unest(&["train", "--synthetic", "1", "--out-dir", "/tmp/unused"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("pass --scale or --model-config"));
}

#[test]
fn infer_rejects_a_window_mismatch() {
    let dir = TempDir::new().unwrap();
    let path = micro_checkpoint(dir.path());
    let (image, _) = synthetic_volume([16; 3], 2, 1).unwrap();
    let input = dir.path().join("image.raw");
    write_raw(&input, &image).unwrap();
    let out = unest(&[
        "infer",
        "--checkpoint",
        path.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        dir.path().join("labels.raw").to_str().unwrap(),
        "--window",
        "32",
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("was trained for window [16, 16, 16]"));
}

#[test]
fn train_infer_eval_roundtrip() {
    let dir = TempDir::new().unwrap();
    let run = dir.path().join("run");
    let model_cfg = dir.path().join("micro.cfg");
    std::fs::write(&model_cfg, ModelConfig::micro().to_text()).unwrap();

    let out = unest(&[
        "train",
        "--model-config",
        model_cfg.to_str().unwrap(),
        "--synthetic",
        "1",
        "--total-steps",
        "3",
        "--warmup-steps",
        "0",
        "--window",
        "16",
        "--seed",
        "11",
        "--out-dir",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let checkpoint = run.join("final.unst");
    assert!(checkpoint.exists());
    let trace = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(trace.starts_with("step,lr,loss\n"));
    assert_eq!(trace.lines().count(), 4);

    let (image, label) = synthetic_volume([20, 16, 18], 2, 40).unwrap();
    let pred_dir = dir.path().join("pred");
    let true_dir = dir.path().join("true");
    std::fs::create_dir_all(&pred_dir).unwrap();
    std::fs::create_dir_all(&true_dir).unwrap();
    let input = dir.path().join("image.raw");
    write_raw(&input, &image).unwrap();
    write_raw(&true_dir.join("case.raw"), &label).unwrap();

    let probs = dir.path().join("probs");
    let out = unest(&[
        "infer",
        "--checkpoint",
        checkpoint.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--output",
        pred_dir.join("case.raw").to_str().unwrap(),
        "--probs",
        probs.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(probs.join("class-000.nii").exists());
    assert!(probs.join("class-001.nii").exists());

    let report_dir = dir.path().join("report");
    let out = unest(&[
        "eval",
        "--pred-dir",
        pred_dir.to_str().unwrap(),
        "--true-dir",
        true_dir.to_str().unwrap(),
        "--classes",
        "2",
        "--out-dir",
        report_dir.to_str().unwrap(),
        "--plot-data",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let report = std::fs::read_to_string(report_dir.join("report.csv")).unwrap();
    assert!(report.contains("class,dsc,hd_mm"));
    assert!(report.lines().any(|l| l.starts_with("1,")));
    assert!(report.lines().any(|l| l.starts_with("mean,")));
    assert!(report_dir.join("scatter-class1.csv").exists());
    assert!(report_dir.join("bland-altman-class1.csv").exists());
    assert_eq!(stdout(&out).lines().count(), report.lines().count() + 2);
}

#[test]
fn training_is_deterministic_across_runs() {
    let dir = TempDir::new().unwrap();
    let model_cfg = dir.path().join("micro.cfg");
    std::fs::write(&model_cfg, ModelConfig::micro().to_text()).unwrap();
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = unest(&[
            "--seed",
            "21",
            "train",
            "--model-config",
            model_cfg.to_str().unwrap(),
            "--synthetic",
            "1",
            "--total-steps",
            "3",
            "--warmup-steps",
            "0",
            "--window",
            "16",
            "--out-dir",
            run.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        traces.push(std::fs::read(run.join("loss.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);
}
