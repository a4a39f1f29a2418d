//! Black-box tests for the `showflow` binary: the full artifact pipeline
//! plus exit-code conventions (2 config, 3 data/io).

use std::path::Path;
use std::process::{Command, Output};

fn showflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_showflow"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed ({}):\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_round_trip_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config_path = root.join("config.json");
    std::fs::write(
        &config_path,
        format!(
            r#"{{
  "train": {{ "steps": 4 }},
  "sampler": {{ "steps": 6 }},
  "paths": {{ "out_dir": {:?}, "dataset_dir": {:?} }}
}}"#,
            root.join("out"),
            root.join("dataset")
        ),
    )
    .unwrap();
    let cfg = config_path.to_str().unwrap();
    let p = |rel: &str| root.join(rel);
    let s = |path: &Path| path.to_str().unwrap().to_string();

    let out = showflow(&["--config", cfg, "make-dataset", "--images-per-concept", "2"]);
    assert_ok(&out, "make-dataset");
    assert!(p("dataset/index.txt").exists(), "dataset index missing");
    assert!(p("dataset/manifest.json").exists(), "dataset manifest missing");

    for (concept, class_word) in [("ciroA", "circle"), ("quadB", "square")] {
        let out = showflow(&[
            "--config",
            cfg,
            "train-single",
            "--concept",
            concept,
            "--class-word",
            class_word,
        ]);
        assert_ok(&out, "train-single");
        assert!(p(&format!("out/train-{concept}/adapter.ckpt")).exists());
        let log = std::fs::read_to_string(p(&format!("out/train-{concept}/train_log.txt")))
            .unwrap();
        assert_eq!(log.lines().count(), 5, "header plus one line per step");
        assert!(p(&format!("out/train-{concept}/manifest.json")).exists());
    }

    let out = showflow(&[
        "--config",
        cfg,
        "generate",
        "--checkpoint",
        &s(&p("out/train-ciroA/adapter.ckpt")),
        "--prompt",
        "a photo of <ciroA>",
    ]);
    assert_ok(&out, "generate");
    assert!(p("out/generate/image.png").exists());
    assert!(p("out/generate/manifest.json").exists());

    let out = showflow(&[
        "--config",
        cfg,
        "fuse",
        "--inputs",
        &s(&p("out/train-ciroA/adapter.ckpt")),
        &s(&p("out/train-quadB/adapter.ckpt")),
    ]);
    assert_ok(&out, "fuse");
    assert!(p("out/fused/fused.ckpt").exists());
    assert!(p("out/fused/fusion_residuals.txt").exists());

    let out = showflow(&[
        "--config",
        cfg,
        "generate-multi",
        "--checkpoint",
        &s(&p("out/fused/fused.ckpt")),
        "--prompt",
        "a photo of <ciroA> beside <quadB>",
        "--dump-masks",
    ]);
    assert_ok(&out, "generate-multi");
    assert!(p("out/generate-multi/image.png").exists());
    assert!(p("out/generate-multi/layout_log.txt").exists());
    assert!(p("out/generate-multi/anchor_0.png").exists());
    assert!(p("out/generate-multi/anchor_1.png").exists());
    assert!(p("out/generate-multi/masks/value_norms.txt").exists());

    let out = showflow(&[
        "--config",
        cfg,
        "eval",
        "--image",
        &s(&p("out/generate-multi/image.png")),
        "--prompt",
        "a photo of <ciroA> beside <quadB>",
    ]);
    assert_ok(&out, "eval");
    assert!(p("out/eval/report.json").exists());
    let report = std::fs::read_to_string(p("out/eval/report.json")).unwrap();
    assert!(report.contains("f1"), "report should carry the combined score");

    // unregistered concept in the prompt is a configuration error
    let out = showflow(&[
        "--config",
        cfg,
        "generate",
        "--checkpoint",
        &s(&p("out/train-ciroA/adapter.ckpt")),
        "--prompt",
        "a photo of <ghost>",
    ]);
    assert_eq!(out.status.code(), Some(2), "unknown concept should exit 2");
    assert!(String::from_utf8_lossy(&out.stderr).contains("ghost"));
}

#[test]
fn unknown_config_key_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("config.json");
    std::fs::write(&config_path, r#"{ "trian": { "steps": 4 } }"#).unwrap();
    let out = showflow(&[
        "--config",
        config_path.to_str().unwrap(),
        "make-dataset",
        "--out",
        dir.path().join("ds").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "bad config should exit 2");
}

#[test]
fn missing_checkpoint_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = showflow(&[
        "generate",
        "--checkpoint",
        dir.path().join("nope.ckpt").to_str().unwrap(),
        "--prompt",
        "a photo of a dog",
        "--out",
        dir.path().join("g").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "missing checkpoint should exit 3");
}
