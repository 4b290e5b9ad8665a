//! End-to-end CLI tests against the real binary: every subcommand, the
//! documented exit codes, and the artifacts each command writes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_nlos")
}

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("nlos_cli_{}_{}", tag, std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const TINY_CFG: &str = "\
n_x = 16\nn_y = 16\nn_t = 64\nn_z = 16\n\
base_width = 4\npatch_size = 2\nk = 3\nk_s = 2\n\
stage1_epochs = 2\nstage2_epochs = 1\nbatch_size = 2\nseed = 3\n\
data_dir = data\ncheckpoint = model.nlt\nhistory = history.csv\nout_dir = out\n";

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tmp_dir("usage");
    let out = run(&["frobnicate"], &dir);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train"], &dir); // missing --config
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn adjointcheck_passes_on_default_geometry() {
    let dir = tmp_dir("adjoint");
    let out = run(&["adjointcheck"], &dir);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("max relative discrepancy"));
}

#[test]
fn gradcheck_passes_and_prints_per_check_lines() {
    let dir = tmp_dir("gradcheck");
    let out = run(&["gradcheck"], &dir);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.contains("PASS")).count() >= 19);
    assert!(!text.contains("FAIL"));
}

#[test]
fn bad_config_is_a_validation_failure() {
    let dir = tmp_dir("badcfg");
    std::fs::write(dir.join("bad.cfg"), "no_such_key = 1\n").unwrap();
    let out = run(&["dataset", "--config", "bad.cfg", "--samples", "1"], &dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tmp_dir("pipeline");
    std::fs::write(dir.join("run.cfg"), TINY_CFG).unwrap();

    // render a hand-written scene to a measurement container
    std::fs::write(
        dir.join("scene.cfg"),
        "prim1 = rect 0.0 0.05 0.30 0.18 0.2 0.05 0.8\nprim2 = blob -0.1 -0.1 0.42 0.1 0.1 0.05 0.5\n",
    )
    .unwrap();
    let out = run(
        &["render", "--config", "run.cfg", "--scene", "scene.cfg", "--out", "meas.nlt"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    assert!(dir.join("meas.nlt").is_file());

    // dataset
    let out = run(&["dataset", "--config", "run.cfg", "--samples", "2"], &dir);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    assert!(dir.join("data/sample_0000.nlt").is_file());
    assert!(dir.join("data/sample_0001.nlt").is_file());

    // train
    let out = run(&["train", "--config", "run.cfg"], &dir);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    assert!(dir.join("model.nlt").is_file());
    let hist = std::fs::read_to_string(dir.join("history.csv")).unwrap();
    assert!(hist.starts_with("stage,epoch,loss\n"));
    assert_eq!(hist.lines().count(), 1 + 3); // header + 2 stage-1 + 1 stage-2 epochs

    // eval prints the four metric columns
    let out = run(&["eval", "--config", "run.cfg"], &dir);
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    let text = String::from_utf8_lossy(&out.stdout);
    let header = text.lines().next().unwrap();
    for col in ["PSNR", "SSIM", "RMSE", "MAD"] {
        assert!(header.contains(col), "missing column {} in '{}'", col, header);
    }
    assert!(text.lines().any(|l| l.starts_with("mean")));

    // reconstruct the rendered measurement
    let out = run(
        &["reconstruct", "--config", "run.cfg", "--measurement", "meas.nlt"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(0), "{:?}", out);
    for f in ["reconstruction.nlt", "albedo.pgm", "depth.pgm"] {
        assert!(dir.join("out").join(f).is_file(), "missing {}", f);
    }
    let pgm = std::fs::read(dir.join("out/albedo.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n16 16\n255\n"));

    // reconstruction container holds the combined voxel in volume order
    let recon = nlos::dataio::read_container(&dir.join("out/reconstruction.nlt")).unwrap();
    let combined = recon.iter().find(|(n, _)| n == "combined").unwrap();
    assert_eq!(combined.1.shape(), &[16, 16, 16]);

    // determinism: retraining writes the identical checkpoint
    let before = std::fs::read(dir.join("model.nlt")).unwrap();
    let out = run(&["train", "--config", "run.cfg"], &dir);
    assert_eq!(out.status.code(), Some(0));
    let after = std::fs::read(dir.join("model.nlt")).unwrap();
    assert_eq!(before, after);
}

#[test]
fn reconstruct_rejects_wrong_checkpoint() {
    let dir = tmp_dir("wrongckpt");
    std::fs::write(dir.join("run.cfg"), TINY_CFG).unwrap();
    std::fs::write(dir.join("junk.nlt"), b"NLT1junk").unwrap();
    std::fs::write(dir.join("scene.cfg"), "prim1 = rect 0.0 0.0 0.3 0.1 0.1 0.05 0.9\n").unwrap();
    let out = run(
        &["render", "--config", "run.cfg", "--scene", "scene.cfg", "--out", "m.nlt"],
        &dir,
    );
    assert_eq!(out.status.code(), Some(0));
    let out = run(
        &[
            "reconstruct",
            "--config",
            "run.cfg",
            "--measurement",
            "m.nlt",
            "--checkpoint",
            "junk.nlt",
        ],
        &dir,
    );
    assert_eq!(out.status.code(), Some(2));
}
