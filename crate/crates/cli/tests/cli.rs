use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pve_core::tensor::{load_tensor, save_tensor};
use pve_core::VideoTensor;
use serde_json::Value;

/// A model small enough to train in well under a second.
const TINY: &str = r#"{
  "model": {
    "arch": {"max_frames": 2, "height": 8, "width": 8, "patch": 4, "dim": 16, "heads": 2,
             "layers": 1, "mlp_hidden": 32, "time_dim": 8},
    "train": {"steps": 5, "batch": 2, "smooth": 2}
  },
  "data": {"count": 8, "frames": 2, "height": 8, "width": 8,
           "source_prompt": [1, 4, 8, 11, 13], "target_prompt": [2, 5, 8, 11, 13]},
  "edit": {"alpha": 0.3, "beta": 0.1, "guidance_scale": 2.0,
           "sampler": {"kind": "ddim", "stride": 50}}
}"#;

fn pve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pve")).args(args).output().expect("binary runs")
}

fn pve_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pve"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    config: PathBuf,
    checkpoint: PathBuf,
    video: PathBuf,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.json");
    fs::write(&config, TINY).unwrap();
    let run = dir.path().join("train");
    ok(&pve(&["train", "--config", s(&config), "--out", s(&run)]));
    let data = dir.path().join("data");
    ok(&pve(&["gen-data", "--count", "3", "--seed", "5", "--out", s(&data), "--config", s(&config)]));
    Fixture {
        checkpoint: run.join("model.vckp"),
        video: data.join("items/item_00000.vten"),
        config,
        dir,
    }
}

#[test]
fn unknown_command_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = pve(&["frobnicate", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn beta_not_below_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = pve(&[
        "edit",
        "--video",
        "missing.vten",
        "--checkpoint",
        "missing.vckp",
        "--out",
        s(&out),
        "--set",
        "edit.alpha=0.5",
        "--set",
        "edit.beta=0.5",
    ]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("edit.beta") && err.contains("edit.alpha"), "{err}");
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("out")).to_string();
    let cases: [&[&str]; 3] = [
        &["gen-data", "--count", "1", "--seed", "0", "--out", &out, "--set", "data.colour=1"],
        &["attnbench", "--grid", "128,x", "--out", &out],
        &["gen-data", "--count", "0", "--seed", "0", "--out", &out],
    ];
    for args in cases {
        assert_eq!(pve(args).status.code(), Some(3), "{args:?}");
    }
    let o = pve_env(&["gen-data", "--count", "1", "--seed", "0", "--out", &out], "PVE_THREADS", "zero");
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn pipeline_errors_exit_4() {
    let f = fixture();
    let out = f.dir.path().join("bad");
    let o = pve(&["invert", "--video", "nope.vten", "--alpha", "0.5", "--checkpoint", s(&f.checkpoint), "--out", s(&out), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(4));
    // A 16x16 clip does not fit the 8x8 model.
    let big = f.dir.path().join("big.vten");
    save_tensor(&VideoTensor::filled([2, 16, 16, 3], 0.5).unwrap(), &big).unwrap();
    let o = pve(&["invert", "--video", s(&big), "--alpha", "0.5", "--checkpoint", s(&f.checkpoint), "--out", s(&out), "--config", s(&f.config)]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gen_data_layout() {
    let f = fixture();
    let data = f.dir.path().join("data");
    let lines: Vec<Value> = fs::read_to_string(data.join("dataset.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for rec in &lines {
        let v = load_tensor(&data.join(rec["video"].as_str().unwrap())).unwrap();
        assert_eq!(v.dims(), [2, 8, 8, 3]);
        let m = load_tensor(&data.join(rec["masks"].as_str().unwrap())).unwrap();
        assert_eq!(m.dims(), [2, 8, 8, 5]);
        assert_eq!(rec["prompt"].as_array().unwrap().len(), 5);
    }
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["config"]["data"]["count"], 3);
    assert_eq!(manifest["seeds"]["data"], 5);
    assert!(data.join("metrics.json").exists());
    assert!(fs::read_dir(&data).unwrap().all(|e| !e.unwrap().file_name().to_string_lossy().ends_with(".tmp")));
}

#[test]
fn invert_then_replay_reproduces_the_source() {
    let f = fixture();
    let inv = f.dir.path().join("inv");
    ok(&pve(&[
        "invert",
        "--video",
        s(&f.video),
        "--alpha",
        "0.5",
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&inv),
        "--config",
        s(&f.config),
    ]));
    let m = json(&inv.join("metrics.json"));
    assert_eq!(m["alpha_steps"], 500);
    assert!(m["replay_max_abs_err"].as_f64().unwrap() <= 1e-4);
    let rep = f.dir.path().join("rep");
    ok(&pve(&["replay", "--track", s(&inv.join("track.vtrk")), "--checkpoint", s(&f.checkpoint), "--out", s(&rep)]));
    let err = json(&rep.join("metrics.json"))["max_abs_err_vs_source"].as_f64().unwrap();
    assert!(err <= 1e-4, "{err}");
    assert!(rep.join("frames/frame_0000.ppm").exists());
}

#[test]
fn edit_writes_subtasks_and_reproduces_from_its_manifest() {
    let f = fixture();
    let out = f.dir.path().join("edit");
    let args = |out: &Path, cfg: &Path| {
        pve(&["edit", "--video", s(&f.video), "--config", s(cfg), "--checkpoint", s(&f.checkpoint), "--out", s(out)])
    };
    ok(&args(&out, &f.config));
    let manifest = json(&out.join("manifest.json"));
    // Shape and color differ: two subtasks, shape first.
    let subtasks = manifest["metrics"]["subtasks"].as_array().unwrap();
    assert_eq!(subtasks.len(), 2);
    for (t, st) in subtasks.iter().enumerate() {
        assert_eq!(st["subtask"], t + 1);
        assert!(out.join(format!("subtask_{}/frame_0001.ppm", t + 1)).exists());
        assert!(st["background_psnr"].is_number() && st["fulfillment"].is_number());
        // alpha 0.3 to beta 0.1 on a stride-50 grid: steps 300, 250, 200, 150.
        assert_eq!(st["controlled_steps"], 4);
    }
    assert_eq!(manifest["config"]["edit"]["alpha"], 0.3);
    let again = f.dir.path().join("again");
    ok(&args(&again, &out.join("config.json")));
    let (a, b) = (load_tensor(&out.join("final.vten")).unwrap(), load_tensor(&again.join("final.vten")).unwrap());
    assert_eq!(a, b);
    assert_eq!(json(&again.join("metrics.json")), json(&out.join("metrics.json")));
}

#[test]
fn overrides_reach_the_pipeline() {
    let f = fixture();
    let out = f.dir.path().join("edit");
    ok(&pve(&[
        "edit",
        "--video",
        s(&f.video),
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
        "--set",
        "edit.max_subtasks=1",
        "--set",
        "seeds.edit=9",
    ]));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["metrics"]["subtasks"].as_array().unwrap().len(), 1);
    assert_eq!(m["seeds"]["edit"], 9);
}

#[test]
fn rer_final_video_is_consistent() {
    let f = fixture();
    let scene = f.dir.path().join("scene.vten");
    let texture = VideoTensor::from_fn([1, 8, 12, 3], |_, y, x, c| ((y * 12 + x + c) % 7) as f32 / 7.0).unwrap();
    save_tensor(&texture, &scene).unwrap();
    let path = f.dir.path().join("path.json");
    fs::write(&path, r#"{"frame_height": 8, "frame_width": 8, "windows": [[0, 0], [0, 4]]}"#).unwrap();
    let out = f.dir.path().join("rer");
    ok(&pve(&[
        "rer",
        "--scene",
        s(&scene),
        "--path",
        s(&path),
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.checkpoint),
        "--out",
        s(&out),
    ]));
    let m = json(&out.join("metrics.json"));
    assert_eq!(m["final_consistency"], 0.0);
    assert_eq!(m["covered_texels"], 96);
    assert_eq!(load_tensor(&out.join("scene.vten")).unwrap().dims(), [1, 8, 12, 3]);
    assert!(out.join("subtask_1/scene.vten").exists());
}

#[test]
fn attnbench_reports_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&pve_env(
        &["attnbench", "--grid", "16,32", "--out", s(&out), "--set", "bench.reps=1", "--set", "bench.aux_n=8"],
        "PVE_THREADS",
        "1",
    ));
    let report = json(&out.join("report.json"));
    assert_eq!(report["rows"].as_array().unwrap().len(), 2);
    let m = json(&out.join("metrics.json"));
    assert!(m["max_rel_dev"].as_f64().unwrap() <= 1e-5);
    assert_eq!(m["streaming_aux_slope"].as_f64().unwrap(), 0.0);
    assert!(m["naive_aux_slope"].as_f64().unwrap() > 0.0);
}
