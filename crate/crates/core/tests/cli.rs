use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use simrec::config::RunConfig;
use simrec::datahub::synthetic::{synthetic_set, SceneConfig};
use simrec::datahub::Split;
use simrec::geometry::{iou, BoundingBox};
use simrec::image_ops::save_rgb;

fn preset(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../presets/{name}.json"))
}

fn simrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_simrec")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn validation_errors_exit_with_one_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = simrec(&["train", "--config", s(&preset("anchor_free")), "--set", "head.anchor_file=a.json", "--run-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    assert!(text(&o).contains("head.anchor_file"), "{}", text(&o));
    assert!(!run.join("checkpoints").exists());

    let o = simrec(&["ablate", "--config", s(&preset("tiny_overfit")), "--axis", "fusion.no_such_field", "--values", "1,2", "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = simrec(&["eval", "--checkpoint", s(&dir.path().join("missing.ckpt"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = simrec(&["convert", "--source", s(dir.path()), "--out", s(&dir.path().join("m"))]);
    assert_ne!(o.status.code(), Some(0));
    assert!(text(&o).contains("supported"), "{}", text(&o));
}

#[test]
fn train_eval_predict_on_the_tiny_task() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = simrec(&["train", "--config", s(&preset("tiny_overfit")), "--run-dir", s(&run)]);
    assert!(o.status.success(), "{}", text(&o));
    for entry in ["config.json", "events.ndjson", "checkpoints/last.ckpt", "checkpoints/best.ckpt", "report"] {
        assert!(run.join(entry).exists(), "{entry}");
    }
    let echoed = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!(echoed, RunConfig::load(&preset("tiny_overfit")).unwrap());
    let ckpt = run.join("checkpoints/last.ckpt");

    let report = dir.path().join("report");
    let o = simrec(&["eval", "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&report)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("accuracy@0.5: 1.0000"), "{}", text(&o));
    let first = std::fs::read(report.join("report.json")).unwrap();
    let o = simrec(&["eval", "--checkpoint", s(&ckpt), "--split", "train", "--out", s(&report)]);
    assert!(o.status.success());
    assert_eq!(first, std::fs::read(report.join("report.json")).unwrap());

    let o = simrec(&["eval", "--checkpoint", s(&ckpt), "--split", "testB", "--out", s(&report)]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));

    let scene = SceneConfig { width: 96, height: 96, min_side: 24, max_side: 48, distractors: 0 };
    let (samples, images) = synthetic_set(16, &scene, 7, Split::Train);
    let img_path = dir.path().join("scene.png");
    save_rgb(&images[0], &img_path).unwrap();
    let drawn = dir.path().join("drawn.png");
    let o = simrec(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img_path), "--expression", &samples[0].expression, "--draw", s(&drawn)]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(drawn.exists());
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    let nums: Vec<f64> = out.trim_start_matches("box:").split_whitespace().take(4).map(|v| v.parse().unwrap()).collect();
    let pred = BoundingBox::from_corners(nums[0], nums[1], nums[2], nums[3]);
    assert!(nums.iter().all(|&v| (0.0..=96.0).contains(&v)), "{out}");
    assert!(iou(&pred, &samples[0].gt_box) >= 0.5, "{out} vs {:?}", samples[0].gt_box);

    let o = simrec(&["predict", "--checkpoint", s(&ckpt), "--image", s(&img_path), "--expression", "  ?! "]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let o = simrec(&["predict", "--checkpoint", s(&ckpt), "--image", s(&dir.path().join("nope.png")), "--expression", "red"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let o = simrec(&["train", "--config", s(&preset("tiny_overfit")), "--set", "schedule.max_steps=4", "--set", "resolution=64", "--run-dir", s(&a)]);
    assert!(o.status.success(), "{}", text(&o));
    let echoed = RunConfig::load(&a.join("config.json")).unwrap();
    assert_eq!(echoed.resolution, 64);
    let o = simrec(&["train", "--config", s(&a.join("config.json")), "--run-dir", s(&b)]);
    assert!(o.status.success(), "{}", text(&o));
    let steps = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("events.ndjson")).unwrap().lines().filter(|l| l.contains("\"event\":\"step\"")).map(str::to_owned).collect()
    };
    assert_eq!(steps(&a).len(), 4);
    assert_eq!(steps(&a), steps(&b));
}
