//! End-to-end checks of the command-line surface: subcommands, exit codes,
//! artifact determinism and sidecar provenance.

use std::path::Path;
use std::process::Command;

fn mcvd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mcvd"))
}

fn tiny_model_args(cmd: &mut Command) {
    for kv in [
        "data.height=8",
        "data.width=8",
        "data.video_len=8",
        "data.shape_size=3",
        "layout.past=1",
        "layout.current=2",
        "layout.future=0",
        "layout.height=8",
        "layout.width=8",
        "model.base_width=2",
        "model.channel_multipliers=1,2",
        "model.attention_resolutions=4",
        "model.embedding_dim=4",
        "model.groups=2",
        "model.heads=2",
        "model.cond_width=2",
        "train.regime=past",
        "train.steps=4",
        "train.batch_size=2",
        "train.checkpoint_interval=2",
        "schedule.steps=20",
        "sample.steps=10",
    ] {
        cmd.arg("--set").arg(kv);
    }
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let out = mcvd().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_is_config_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let out = mcvd()
        .args(["train", "--config", "/definitely/missing.cfg", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(!out_dir.exists(), "no checkpoint directory on config error");
}

#[test]
fn bad_container_is_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vid");
    std::fs::write(&bad, b"NOTAVIDE0").unwrap();
    let out = mcvd()
        .args(["export", "--input"])
        .arg(&bad)
        .args(["--out"])
        .arg(dir.path().join("x.png"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn identical_commands_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let gen = |out: &Path| {
        let st = mcvd()
            .args(["gen-data", "--count", "2", "--out"])
            .arg(out)
            .args(["--set", "data.height=8", "--set", "data.width=8"])
            .args(["--set", "data.video_len=6", "--set", "data.shape_size=3"])
            .status()
            .unwrap();
        assert!(st.success());
    };
    let d1 = dir.path().join("a");
    let d2 = dir.path().join("b");
    gen(&d1);
    gen(&d2);
    for name in ["video_000.vid", "video_001.vid"] {
        assert_eq!(
            std::fs::read(d1.join(name)).unwrap(),
            std::fs::read(d2.join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    assert!(d1.join("videos.cfg").exists(), "config sidecar present");
}

#[test]
fn train_sample_pipeline_is_deterministic_and_capability_checked() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let mut cmd = mcvd();
    cmd.args(["train", "--videos", "2", "--log-every", "0", "--out"])
        .arg(&run_dir);
    tiny_model_args(&mut cmd);
    let st = cmd.status().unwrap();
    assert!(st.success());
    let ckpt = run_dir.join("ckpt-final.ckpt");
    assert!(ckpt.exists());

    // Context video matching the layout geometry.
    let data_dir = dir.path().join("data");
    let st = mcvd()
        .args(["gen-data", "--count", "1", "--out"])
        .arg(&data_dir)
        .args(["--set", "data.height=8", "--set", "data.width=8"])
        .args(["--set", "data.video_len=6", "--set", "data.shape_size=3"])
        .status()
        .unwrap();
    assert!(st.success());
    let context = data_dir.join("video_000.vid");

    let sample = |out: &Path| {
        let st = mcvd()
            .args(["sample", "--checkpoint"])
            .arg(&ckpt)
            .args(["--task", "predict", "--steps", "10", "--sampler", "ddim"])
            .args(["--blocks", "1", "--seed", "11", "--context"])
            .arg(&context)
            .args(["--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    };
    let s1 = dir.path().join("s1.vid");
    let s2 = dir.path().join("s2.vid");
    sample(&s1);
    sample(&s2);
    assert_eq!(
        std::fs::read(&s1).unwrap(),
        std::fs::read(&s2).unwrap(),
        "same command + seed must produce identical bytes"
    );
    assert!(s1.with_extension("vid.cfg").exists(), "sample sidecar");

    // This checkpoint's regime (past-only) cannot express interpolation.
    let out = mcvd()
        .args(["sample", "--checkpoint"])
        .arg(&ckpt)
        .args(["--task", "interpolate", "--steps", "10", "--sampler", "ddim"])
        .args(["--blocks", "1", "--seed", "11", "--context"])
        .arg(&context)
        .args(["--out"])
        .arg(dir.path().join("nope.vid"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("supported tasks"), "explanatory refusal: {msg}");
}

#[test]
fn selftest_exits_zero_with_one_line_per_suite() {
    let out = mcvd().arg("selftest").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    let ok_lines = stdout.lines().filter(|l| l.starts_with("ok   ")).count();
    assert!(ok_lines >= 5, "expected suite lines, got:\n{stdout}");
}
