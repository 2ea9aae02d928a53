//! End-to-end command-line tests: a small MNIST-layout dataset is written
//! to disk, a short training run produces real artifacts, and every
//! subcommand is driven against them. Error paths map to their distinct
//! exit codes.

mod common;

use std::path::Path;
use std::process::Command;

fn exon_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_exon"))
}

fn write_run_config(path: &Path, out_dir: &Path, data_root: &Path) {
    // mnist architecture at toy scale: 1 epoch, tiny batches, capped eval
    let text = format!(
        r#"
data_root = "{data}"
out_dir = "{out}"

[training]
dataset = "mnist"
epochs = 1
batch_unlabeled = 32
batch_labeled = 8
beta = 0.25
lambda1 = 50.0
ramp_horizon = 2
base_lr = 0.003
lr_milestones = []
lr_exp_start = 10
weight_decay = 0.0005
drop_rate = 0.5
n_labeled = 20
seed = 5
split_seed = 6
temperature = 0.67
rho_sampler = "uniform"
checkpoint_every = 1
eval_every = 1
eval_test_cap = 20
grid_points = 5

[training.augment]
max_rotate_deg = 15.0
crop_pad = 2
hflip = false
"#,
        data = data_root.display(),
        out = out_dir.display(),
    );
    std::fs::write(path, text).unwrap();
}

struct Artifacts {
    _dir: tempfile::TempDir,
    out_dir: std::path::PathBuf,
    config_path: std::path::PathBuf,
    checkpoint: std::path::PathBuf,
}

/// One shared short training run for the whole suite.
fn trained_artifacts() -> Artifacts {
    let dir = tempfile::tempdir().unwrap();
    let data_root = dir.path().join("data");
    std::fs::create_dir(&data_root).unwrap();
    common::write_mnist_layout(&data_root, 200, 40, 11);
    let out_dir = dir.path().join("run");
    let config_path = dir.path().join("run.toml");
    write_run_config(&config_path, &out_dir, &data_root);

    let output = exon_bin()
        .args(["train", "--config"])
        .arg(&config_path)
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "train failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    let checkpoint = out_dir.join("ckpt-epoch-0001");
    assert!(checkpoint.join("manifest.json").exists());
    Artifacts {
        _dir: dir,
        out_dir,
        config_path,
        checkpoint,
    }
}

#[test]
fn cli_full_workflow() {
    let art = trained_artifacts();

    // train artifacts: resolved config written before compute, metrics log,
    // checkpoints, machine-readable summary
    assert!(art.out_dir.join("run-config.toml").exists());
    assert!(art.out_dir.join("config.toml").exists());
    assert!(art.out_dir.join("artifacts.json").exists());
    let metrics = std::fs::read_to_string(art.out_dir.join("metrics.jsonl")).unwrap();
    assert!(metrics.lines().count() >= 2);
    for line in metrics.lines() {
        let v: serde_json::Value = serde_json::from_str(line).expect("parseable metrics line");
        assert!(v.get("epoch").is_some() && v.get("total").is_some());
    }

    // evaluate: classification error / KL metric / grid diversity
    let out = exon_bin()
        .args(["evaluate", "--checkpoint"])
        .arg(&art.checkpoint)
        .args(["--config"])
        .arg(&art.config_path)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "evaluate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let eval: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("evaluate prints JSON");
    let err = eval["error"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&err));
    assert!(eval["kl_metric"].as_f64().unwrap() >= 0.0);
    assert!(eval["negative_ssim"].as_f64().is_some());
    assert!(art.checkpoint.join("evaluation.json").exists());

    // analyze: V-nat report with K index sets, certificate, MI, correlation
    let out = exon_bin()
        .args(["analyze", "--checkpoint"])
        .arg(&art.checkpoint)
        .args(["--config"])
        .arg(&art.config_path)
        .args(["--delta", "1", "--mc-samples", "400", "--mi-subset", "32"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "analyze failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let analysis: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(art.checkpoint.join("analysis.json")).unwrap())
            .unwrap();
    let report = &analysis["report"];
    assert_eq!(report["per_class_vnat"].as_array().unwrap().len(), 10);
    assert_eq!(report["activated"].as_array().unwrap().len(), 10);
    assert!(report["bound"]["upper"].as_f64().is_some());
    assert_eq!(
        analysis["vnat_correlation"].as_array().unwrap().len(),
        10
    );

    // interpolate between prior components: frames plus an index manifest
    let interp_out = art.out_dir.join("interp");
    let out = exon_bin()
        .args(["interpolate", "--checkpoint"])
        .arg(&art.checkpoint)
        .args(["--config"])
        .arg(&art.config_path)
        .args(["--class-a", "0", "--class-b", "1", "--steps", "3", "--out"])
        .arg(&interp_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "interpolate failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for i in 0..3 {
        assert!(interp_out.join(format!("interpolate_{i:03}.png")).exists());
    }
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(interp_out.join("interpolate_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["images"].as_array().unwrap().len(), 3);
    assert!(manifest["images"][0]["latent"].as_array().unwrap().len() == 2);

    // grid over the 2-D latent space
    let grid_out = art.out_dir.join("gridimgs");
    let out = exon_bin()
        .args(["grid", "--checkpoint"])
        .arg(&art.checkpoint)
        .args(["--config"])
        .arg(&art.config_path)
        .args(["--points", "3", "--out"])
        .arg(&grid_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "grid failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(grid_out.join("grid_0008.png").exists()); // 3x3 grid, last image
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["negative_ssim"].as_f64().unwrap() >= 0.0);

    // perturb the activated subspace of a class
    let pert_out = art.out_dir.join("pert");
    let out = exon_bin()
        .args(["perturb", "--checkpoint"])
        .arg(&art.checkpoint)
        .args(["--config"])
        .arg(&art.config_path)
        .args(["--class", "1", "--noise-range", "1.5", "--out"])
        .arg(&pert_out)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "perturb failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(pert_out.join("perturb_original.png").exists());
    assert!(pert_out.join("perturb_perturbed.png").exists());
    assert!(pert_out.join("perturb_manifest.json").exists());

    // resume: a second train with more epochs continues from the checkpoint
    let cfg_text = std::fs::read_to_string(&art.config_path)
        .unwrap()
        .replace("epochs = 1", "epochs = 2");
    std::fs::write(&art.config_path, cfg_text).unwrap();
    let out = exon_bin()
        .args(["train", "--config"])
        .arg(&art.config_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(art.out_dir.join("ckpt-epoch-0002").exists());
}

#[test]
fn cli_error_paths_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();

    // unknown flag: clap's own exit code
    let out = exon_bin().args(["train", "--warp-speed"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // invalid config schema
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "definitely = \"not a run config\"\n").unwrap();
    let out = exon_bin()
        .args(["train", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    // the error is a single machine-parseable line
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.trim().lines().collect();
    assert_eq!(lines.len(), 1);
    let parsed: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
    assert_eq!(parsed["kind"], "config");

    // missing checkpoint
    let out = exon_bin()
        .args(["evaluate", "--checkpoint"])
        .arg(dir.path().join("nope"))
        .args(["--dataset", "mnist", "--data-root"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // missing dataset: descriptive dataset error
    let empty = dir.path().join("emptydata");
    std::fs::create_dir(&empty).unwrap();
    let out = exon_bin()
        .args(["train", "--dataset", "mnist", "--data-root"])
        .arg(&empty)
        .args(["--out"])
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("train-images-idx3-ubyte"));

    // no configuration at all
    let out = exon_bin().arg("train").env_remove("EXON_DATA_ROOT").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
}
