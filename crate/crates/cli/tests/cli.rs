use std::path::Path;
use std::process::Command;

use splatlift::camera::{orbit_camera, CameraIntrinsics};
use splatlift::imageio::load_png;
use splatlift::splat::{ply_write, SplatScene};

fn splatlift(args: &[&str], dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splatlift"))
        .args(args)
        .current_dir(dir)
        .env_remove("SPLATLIFT_THREADS")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
[data]
subjects = 4
image_size = 32

[fit]
steps = 30
gaussian_budget = 300

[lrm]
image_size = 32
dim = 16
layers = 1
heads = 2

[train]
steps = 5

[eval]
test_subjects = 2
"#;

#[test]
fn render_empty_scene_is_background() {
    let dir = tempfile::tempdir().unwrap();
    let bg = nalgebra::Vector3::new(0.25f32, 0.5, 1.0);
    ply_write(&SplatScene::empty(bg), dir.path().join("x.ply")).unwrap();
    let k = CameraIntrinsics::from_fov(40, 30, 45.0).unwrap();
    let cam = orbit_camera(k, 2.0, 30.0, 10.0);
    std::fs::write(
        dir.path().join("cam.json"),
        serde_json::to_vec(&cam.to_json()).unwrap(),
    )
    .unwrap();
    let out = splatlift(
        &[
            "render", "--ply", "x.ply", "--camera", "cam.json", "--out", "bg.png",
        ],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let img = load_png(dir.path().join("bg.png"), 3).unwrap();
    assert_eq!((img.width, img.height), (40, 30));
    for px in img.data.chunks(3) {
        assert_eq!(px, &[64.0 / 255.0, 128.0 / 255.0, 1.0]);
    }
    assert!(dir.path().join("bg.png.config.json").exists());
}

#[test]
fn eval_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let ok = |args: &[&str]| {
        let out = splatlift(args, d);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    };
    ok(&["gen-data", "--config", "small.toml", "--out", "data"]);
    let train = ok(&[
        "train",
        "--config",
        "small.toml",
        "--data",
        "data",
        "--out",
        "tr",
    ]);
    for line in String::from_utf8(train.stderr).unwrap().lines() {
        serde_json::from_str::<serde_json::Value>(line).expect("log lines are JSON");
    }
    for out in ["e1", "e2"] {
        ok(&[
            "eval",
            "--config",
            "small.toml",
            "--data",
            "data",
            "--checkpoint",
            "tr/model.ckpt",
            "--out",
            out,
        ]);
    }
    let a = std::fs::read(d.join("e1/eval_report.json")).unwrap();
    let b = std::fs::read(d.join("e2/eval_report.json")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resolved_config_replays_to_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let ok = |args: &[&str]| {
        let out = splatlift(args, d);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    ok(&[
        "gen-data",
        "--config",
        "small.toml",
        "--seed",
        "7",
        "--out",
        "a",
    ]);
    ok(&[
        "fit",
        "--config",
        "small.toml",
        "--data",
        "a",
        "--subject",
        "s0001",
        "--out",
        "f1",
    ]);
    ok(&["fit", "--config", "f1/config.resolved.json", "--out", "f2"]);
    for f in ["fitted.ply", "report.json", "config.resolved.json"] {
        assert_eq!(
            std::fs::read(d.join("f1").join(f)).unwrap(),
            std::fs::read(d.join("f2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn unknown_keys_are_rejected_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[fit]\nstepz = 3\n").unwrap();
    let out = splatlift(
        &["gen-data", "--config", "bad.toml", "--out", "x"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["level"], "error");
    assert!(line["error"].as_str().unwrap().contains("stepz"));
}

#[test]
fn errors_name_stage_and_subject() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    assert!(
        splatlift(&["gen-data", "--config", "small.toml", "--out", "data"], d)
            .status
            .success()
    );
    std::fs::remove_file(d.join("data/subjects/s0002/capture/capture_01.png")).unwrap();
    let out = splatlift(
        &[
            "canonicalize",
            "--config",
            "small.toml",
            "--data",
            "data",
            "--out",
            "c",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["stage"], "canonicalize");
    assert_eq!(line["subject"], "s0002");
    assert!(line["error"].as_str().unwrap().contains("capture_01.png"));

    assert!(
        splatlift(&["gen-data", "--config", "small.toml", "--out", "data"], d)
            .status
            .success()
    );

    let out = splatlift(
        &[
            "fit",
            "--config",
            "small.toml",
            "--data",
            "data",
            "--subject",
            "s0404",
            "--out",
            "f",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["subject"], "s0404");
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    assert!(
        splatlift(&["gen-data", "--config", "small.toml", "--out", "data"], d)
            .status
            .success()
    );
    let cfg = SMALL.replace("steps = 5", "steps = 5\nlr = 1e38");
    std::fs::write(d.join("boom.toml"), cfg).unwrap();
    let out = splatlift(
        &[
            "train",
            "--config",
            "boom.toml",
            "--data",
            "data",
            "--out",
            "t",
        ],
        d,
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8(out.stderr).unwrap();
    let line: serde_json::Value = serde_json::from_str(err.lines().last().unwrap()).unwrap();
    assert_eq!(line["stage"], "train");
}
