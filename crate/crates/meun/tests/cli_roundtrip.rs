//! End-to-end runs of the compiled binary: synth -> train -> infer -> eval
//! compose through the filesystem alone, and gradcheck gates on failure.

use std::process::Command;

use tempfile::TempDir;

fn meun() -> Command {
    Command::new(env!("CARGO_BIN_EXE_meun"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn meun");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_train_infer_eval_pipeline() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("ds");
    let ckpt = dir.path().join("model.ckpt");
    let preds = dir.path().join("preds");
    let report = dir.path().join("report.csv");

    run_ok(meun().args([
        "synth",
        "--out",
        ds.to_str().unwrap(),
        "--n",
        "3",
        "--size",
        "32",
        "--seed",
        "11",
    ]));

    // config file provides the tiny architecture; flags add the run knobs
    let cfg = dir.path().join("desk.conf");
    std::fs::write(
        &cfg,
        "input_size = 32\nbase_channels = 8\nmini_stage_channels = 4,8,8,8,8\nuse_adm = false\n",
    )
    .unwrap();

    let train_out = run_ok(meun().args([
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--out",
        ckpt.to_str().unwrap(),
        "--steps",
        "4",
        "--batch-size",
        "2",
        "--seed",
        "5",
    ]));
    assert!(train_out.contains("step=0 total="), "per-step log line");
    assert!(train_out.contains("step=3 total="));
    assert!(ckpt.is_file());

    run_ok(meun().args([
        "infer",
        "--config",
        cfg.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        ds.join("images").to_str().unwrap(),
        "--output",
        preds.to_str().unwrap(),
        "--emit-edge",
    ]));
    assert!(preds.join("synth_0000.pgm").is_file());
    assert!(preds.join("synth_0000_edge.pgm").is_file());

    let eval_out = run_ok(meun().args([
        "eval",
        "--pred",
        preds.to_str().unwrap(),
        "--gt",
        ds.join("masks").to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]));
    assert!(eval_out.contains("mean"), "aggregate row printed");

    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.starts_with("image,mF,MAE,Sm,Em"));
    // edge maps have no matching mask stem and are skipped, not scored
    assert_eq!(csv.lines().count(), 1 + 3 + 1, "header, three rows, mean");
}

#[test]
fn gradcheck_exit_codes() {
    let out = meun()
        .args(["gradcheck", "--scope", "primitives", "--seed", "20260811"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("pass")).count() >= 20);
    assert!(!text.contains("FAIL"));
}

#[test]
fn eval_honors_thread_cap() {
    let dir = TempDir::new().unwrap();
    let ds = dir.path().join("ds");
    run_ok(meun().args([
        "synth", "--out", ds.to_str().unwrap(), "--n", "4", "--size", "32", "--seed", "2",
    ]));
    // score masks against themselves under a forced single-thread pool
    let out = meun()
        .env("MEUN_THREADS", "1")
        .args([
            "eval",
            "--pred",
            ds.join("masks").to_str().unwrap(),
            "--gt",
            ds.join("masks").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let mean_line = text.lines().find(|l| l.starts_with("mean")).unwrap();
    assert!(mean_line.contains("1.0000"), "self-evaluation is perfect: {mean_line}");
}

#[test]
fn infer_requires_existing_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = meun()
        .args([
            "infer",
            "--checkpoint",
            dir.path().join("missing.ckpt").to_str().unwrap(),
            "--input",
            dir.path().to_str().unwrap(),
            "--output",
            dir.path().join("o").to_str().unwrap(),
            "--input-size",
            "32",
            "--base-channels",
            "8",
            "--mini-stage-channels",
            "4,8,8,8,8",
            "--no-adm",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
