//! End-to-end tests against the compiled binary: every documented command,
//! exit code, and the byte-level determinism guarantee.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cclk"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn cclk")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}

/// Small colorblobs dataset most tests share: 4 classes x 30, d=2, 2 nuisance dims.
fn gen_small(dir: &Path) -> PathBuf {
    let cfg = dir.join("gen.cfg");
    write(
        &cfg,
        "data.generator = colorblobs\n\
         data.num_classes = 4\n\
         data.per_class = 30\n\
         data.dim = 2\n\
         data.nuisance_dim = 2\n\
         data.corr = 0.9\n\
         data.seed = 7\n",
    );
    let csv = dir.join("ds.csv");
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    csv
}

fn parse_metric(text: &str, key: &str) -> f64 {
    for line in text.lines() {
        if let Some(v) = line.strip_prefix(&format!("{key}=")) {
            return v.parse().unwrap();
        }
    }
    panic!("no {key}= line in:\n{text}");
}

fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gen_data_layout_and_determinism() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gen.cfg");
    write(
        &cfg,
        "data.generator = colorblobs\ndata.num_classes = 4\ndata.per_class = 200\n\
         data.dim = 2\ndata.nuisance_dim = 3\ndata.corr = 0.9\ndata.seed = 7\n",
    );
    let a = dir.path().join("a.csv");
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("rows=800"));
    assert!(stdout(&out).contains("seed=7"));

    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 801);
    assert_eq!(
        text.lines().next().unwrap(),
        "x_0,x_1,x_2,x_3,x_4,z_0,z_1,z_2,label"
    );

    let b = dir.path().join("b.csv");
    let out = run(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "reruns must be byte-identical");
}

#[test]
fn gen_data_without_generator_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gen.cfg");
    write(&cfg, "data.num_classes = 4\n");
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data.generator"), "{}", stderr(&out));
}

#[test]
fn gen_data_unknown_key_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("gen.cfg");
    write(&cfg, "data.generator = colorblobs\ndata.bogus = 1\n");
    let out = run(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("data.bogus"), "{}", stderr(&out));
}

#[test]
fn train_writes_artifacts_deterministically_and_eval_matches() {
    let dir = TempDir::new().unwrap();
    let csv = gen_small(dir.path());
    let cfg = dir.path().join("train.cfg");
    write(&cfg, "loss.kind = infonce\ntrain.steps = 50\ntrain.batch_size = 16\ntrain.eval_every = 25\n");

    let run1 = dir.path().join("run1");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        run1.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["checkpoint.json", "report.json", "loss_curve.csv"] {
        assert!(run1.join(f).exists(), "missing {f}");
    }
    let train_acc = parse_metric(&stdout(&out), "probe_accuracy");
    let train_mse = parse_metric(&stdout(&out), "nuisance_mse");

    // identical rerun -> identical artifact bytes (wall time is stdout-only)
    let run2 = dir.path().join("run2");
    let out2 = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        run2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out2), 0);
    for f in ["checkpoint.json", "report.json", "loss_curve.csv"] {
        assert_eq!(
            fs::read(run1.join(f)).unwrap(),
            fs::read(run2.join(f)).unwrap(),
            "{f} differs between identical runs"
        );
    }

    // eval on the checkpoint reproduces the report metrics
    let ev = run(&[
        "eval",
        "--checkpoint",
        run1.join("checkpoint.json").to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&ev), 0, "{}", stderr(&ev));
    assert!((parse_metric(&stdout(&ev), "probe_accuracy") - train_acc).abs() <= 1e-12);
    assert!((parse_metric(&stdout(&ev), "nuisance_mse") - train_mse).abs() <= 1e-12);
}

#[test]
fn discrete_baseline_on_continuous_z_fails_where_cclk_runs() {
    let dir = TempDir::new().unwrap();
    let csv = gen_small(dir.path());

    let baseline = dir.path().join("fi.cfg");
    write(&baseline, "loss.kind = fair_infonce\ntrain.steps = 10\ntrain.batch_size = 16\n");
    let out = run(&[
        "train",
        "--config",
        baseline.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        dir.path().join("fi").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("insufficient samples"), "{}", stderr(&out));

    let cclk = dir.path().join("fc.cfg");
    write(&cclk, "loss.kind = fair_cclk\ntrain.steps = 10\ntrain.batch_size = 16\ntrain.eval_every = 5\n");
    let out = run(&[
        "train",
        "--config",
        cclk.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        dir.path().join("fc").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn non_finite_loss_aborts_with_exit_3() {
    let dir = TempDir::new().unwrap();
    let csv = gen_small(dir.path());
    let cfg = dir.path().join("nan.cfg");
    // tau this small overflows exp() on the first batch
    write(&cfg, "loss.kind = infonce\nloss.tau = 1e-4\ntrain.steps = 5\ntrain.batch_size = 16\n");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        dir.path().join("nan").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("non-finite"), "{}", stderr(&out));
}

#[test]
fn eval_rejects_corrupt_checkpoint_and_wrong_dims() {
    let dir = TempDir::new().unwrap();
    let csv = gen_small(dir.path());

    let bad = dir.path().join("bad.json");
    write(&bad, "{ not json");
    let out = run(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 2);

    // train on this data, then evaluate against a dataset with other widths
    let cfg = dir.path().join("t.cfg");
    write(&cfg, "loss.kind = infonce\ntrain.steps = 5\ntrain.batch_size = 16\n");
    let rundir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--out-dir",
        rundir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let gen2 = dir.path().join("gen2.cfg");
    write(
        &gen2,
        "data.generator = colorblobs\ndata.num_classes = 3\ndata.per_class = 10\n\
         data.dim = 5\ndata.nuisance_dim = 1\ndata.corr = 0.5\ndata.seed = 1\n",
    );
    let csv2 = dir.path().join("ds2.csv");
    let out = run(&["gen-data", "--config", gen2.to_str().unwrap(), "--out", csv2.to_str().unwrap()]);
    assert_eq!(code(&out), 0);

    let ev = run(&[
        "eval",
        "--checkpoint",
        rundir.join("checkpoint.json").to_str().unwrap(),
        "--data",
        csv2.to_str().unwrap(),
    ]);
    assert_eq!(code(&ev), 2);
    assert!(stderr(&ev).contains("input columns"), "{}", stderr(&ev));
}

#[test]
fn inspect_identity_blocks_and_large_lambda() {
    let dir = TempDir::new().unwrap();
    let csv = gen_small(dir.path());

    // continuous z is all-distinct, so the delta kernel at lambda=0 gives W = I
    let id_cfg = dir.path().join("id.cfg");
    write(&id_cfg, "kernel.kind = delta\noperator.lambda = 0\ntrain.batch_size = 8\n");
    let id_out = dir.path().join("id");
    let out = run(&[
        "inspect",
        "--data",
        csv.to_str().unwrap(),
        "--config",
        id_cfg.to_str().unwrap(),
        "--out",
        id_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let w = read_matrix(&id_out.join("w_normalized.csv"));
    assert_eq!(w.len(), 8);
    for (i, row) in w.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            let expect = if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() <= 1e-12, "w[{i}][{j}] = {v}");
        }
    }

    // large lambda: the normalized weights converge on the normalized kernel
    let big_cfg = dir.path().join("big.cfg");
    write(&big_cfg, "kernel.kind = rbf\nkernel.sigma2 = median\noperator.lambda = 1e6\ntrain.batch_size = 16\n");
    let big_out = dir.path().join("big");
    let out = run(&[
        "inspect",
        "--data",
        csv.to_str().unwrap(),
        "--config",
        big_cfg.to_str().unwrap(),
        "--out",
        big_out.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let w = read_matrix(&big_out.join("w_normalized.csv"));
    let k = read_matrix(&big_out.join("kz_normalized.csv"));
    let mut gap = 0.0f64;
    for i in 0..16 {
        for j in 0..16 {
            gap = gap.max((w[i][j] - k[i][j]).abs());
        }
    }
    assert!(gap <= 1e-3, "normalized gap {gap}");

    // rerunning inspect is byte-identical
    let big2 = dir.path().join("big2");
    let out = run(&[
        "inspect",
        "--data",
        csv.to_str().unwrap(),
        "--config",
        big_cfg.to_str().unwrap(),
        "--out",
        big2.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(
        fs::read(big_out.join("w_normalized.csv")).unwrap(),
        fs::read(big2.join("w_normalized.csv")).unwrap()
    );
}

#[test]
fn inspect_delta_kernel_shows_group_blocks() {
    let dir = TempDir::new().unwrap();
    // hand-built dataset: two z groups of two rows each
    let csv = dir.path().join("tiny.csv");
    write(
        &csv,
        "x_0,x_1,z_0,label\n\
         0.1,0.2,0,0\n\
         0.3,0.1,0,0\n\
         0.9,0.8,1,1\n\
         0.7,0.6,1,1\n",
    );
    let cfg = dir.path().join("insp.cfg");
    write(&cfg, "kernel.kind = delta\noperator.lambda = 0.5\ntrain.batch_size = 4\n");
    let out_dir = dir.path().join("blocks");
    let out = run(&[
        "inspect",
        "--data",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["w_normalized.csv", "kz_normalized.csv"] {
        let m = read_matrix(&out_dir.join(file));
        for i in 0..4 {
            for j in 0..4 {
                let same_group = (i < 2) == (j < 2);
                if same_group {
                    assert!(m[i][j] > 0.0, "{file}[{i}][{j}] should be positive");
                } else {
                    assert_eq!(m[i][j], 0.0, "{file}[{i}][{j}] should be exactly zero");
                }
            }
        }
    }
}

#[test]
fn inspect_needs_batch_size_rows() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("tiny.csv");
    write(&csv, "x_0,z_0,label\n0.1,0,0\n0.2,1,1\n");
    let cfg = dir.path().join("insp.cfg");
    write(&cfg, "train.batch_size = 16\n");
    let out = run(&[
        "inspect",
        "--data",
        csv.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("x").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));
}

#[test]
fn verify_prints_every_property_and_passes() {
    let out = run(&["verify"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.contains("[PASS] prop1_weighted_sum_identity"));
    assert!(text.contains("[PASS] delta_kernel_group_mean_oracle"));
    assert!(text.contains("[PASS] lambda_zero_weaksup_reduces_to_infonce"));
    assert!(text.contains("0 failed"));
    assert!(!text.contains("[FAIL]"));
}

#[test]
fn missing_files_exit_nonzero_with_message() {
    let out = run(&["train", "--config", "/nonexistent.cfg", "--data", "/nope.csv", "--out-dir", "/tmp/x"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(!stderr(&out).is_empty());
}
