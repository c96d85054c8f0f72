use std::path::Path;
use std::process::{Command, Output};

use geoadam::network::ModelParams;
use geoadam::train::Seeds;
use geoadam::{container, Matrix, TransformerConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const HEADER: &str = "epoch,mean_train_loss,max_orth_drift,wall_seconds";

fn geoadam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geoadam"))
        .args(args)
        .env_remove("GEOADAM_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = geoadam(args);
    assert!(
        out.status.success(),
        "geoadam {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

fn small<'a>(dir: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--output-dir", dir, "--synthetic-size", "64", "--batch-size", "32"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn train_writes_bounded_drift_curve() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["train", "--epochs", "5", "--seed", "1", "--output-dir", out]);

    let table = rows(&dir.path().join("loss.csv"));
    assert_eq!(table[0].join(","), HEADER);
    assert_eq!(table.len(), 6);
    for (i, row) in table[1..].iter().enumerate() {
        assert_eq!(row[0], (i + 1).to_string());
        let loss: f64 = row[1].parse().unwrap();
        let drift: f64 = row[2].parse().unwrap();
        let wall: f64 = row[3].parse().unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert!(drift <= 1e-5, "epoch {} drift {drift}", i + 1);
        assert!(wall >= 0.0);
    }
    let echo = std::fs::read_to_string(dir.path().join("config.echo")).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 1"));
    assert!(echo.lines().any(|l| l == "epochs = 5"));

    let weights = container::decode::<f32>(&std::fs::read(dir.path().join("weights.bin")).unwrap()).unwrap();
    let fresh = ModelParams::<f32>::init(&TransformerConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let dims = |ms: &[&Matrix<f32>]| ms.iter().map(|m| (m.rows(), m.cols())).collect::<Vec<_>>();
    assert_eq!(dims(&weights.iter().collect::<Vec<_>>()), dims(&fresh.tensors()));
}

#[test]
fn zero_epochs_writes_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["train", "--epochs", "0", "--seed", "9", "--precision", "double", "--output-dir", out]);

    let loss = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert_eq!(loss, format!("{HEADER}\n"));
    let weights = container::decode::<f64>(&std::fs::read(dir.path().join("weights.bin")).unwrap()).unwrap();
    let init = ModelParams::<f64>::init(
        &TransformerConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(Seeds::from_run_seed(9).init),
    )
    .unwrap();
    let expected: Vec<Matrix<f64>> = init.tensors().into_iter().cloned().collect();
    assert_eq!(weights, expected);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = dir.path().to_str().unwrap();
        ok(&["train"]
            .into_iter()
            .chain(small(out, &["--epochs", "3", "--seed", "4", "--record-time", "false"]))
            .collect::<Vec<_>>());
    }
    for file in ["loss.csv", "weights.bin"] {
        assert_eq!(
            std::fs::read(a.path().join(file)).unwrap(),
            std::fs::read(b.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn compare_merges_four_scenarios() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["compare"].into_iter().chain(small(out, &["--epochs", "2"])).collect::<Vec<_>>());

    let table = rows(&dir.path().join("compare.csv"));
    assert_eq!(table[0].join(","), "epoch,adam,adam_stiefel,gradient_stiefel,momentum_stiefel");
    assert_eq!(table.len(), 4);
    assert_eq!(table[1][0], "1");
    assert_eq!(table[2][0], "2");
    assert_eq!(table[3][0], "total_update_seconds");
    for (col, label) in table[0].iter().enumerate().skip(1) {
        let curve = rows(&dir.path().join(label).join("loss.csv"));
        assert_eq!(curve.len(), 3, "{label}");
        for epoch in 1..=2 {
            assert_eq!(curve[epoch][1], table[epoch][col], "{label} epoch {epoch}");
        }
        assert!(table[3][col].parse::<f64>().unwrap() >= 0.0);
    }
}

#[test]
fn unconstrained_projections_leave_the_manifold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&["train"]
        .into_iter()
        .chain(small(out, &["--epochs", "1", "--constrain", "false", "--optimizer", "gradient"]))
        .collect::<Vec<_>>());
    let table = rows(&dir.path().join("loss.csv"));
    assert_eq!(table.len(), 2);
    assert!(table[1][1].parse::<f64>().unwrap().is_finite());
    assert!(table[1][2].parse::<f64>().unwrap() > 1e-3);
}

#[test]
fn verify_passes_in_both_precisions() {
    for precision in ["double", "single"] {
        let out = ok(&["verify", "--precision", precision]);
        let stdout = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = stdout.lines().filter(|l| l.starts_with("PASS") || l.starts_with("FAIL")).collect();
        assert!(!lines.is_empty());
        assert!(lines.iter().all(|l| l.starts_with("PASS")), "{precision}:\n{stdout}");
    }
}

#[test]
fn verify_fails_without_reskew() {
    let out = geoadam(&["verify", "--disable-reskew"]);
    assert!(!out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.lines().any(|l| l.starts_with("FAIL")), "{stdout}");
}

#[test]
fn missing_mnist_files_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = geoadam(&[
        "train",
        "--dataset",
        "mnist",
        "--mnist-images",
        "/nonexistent/train-images-idx3-ubyte",
        "--mnist-labels",
        "/nonexistent/train-labels-idx1-ubyte",
        "--output-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("validating configuration"), "{stderr}");
    assert!(stderr.contains("/nonexistent/train-images-idx3-ubyte"), "{stderr}");
}

#[test]
fn corrupt_idx_file_fails_while_loading() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    let labels = dir.path().join("labels");
    std::fs::write(&images, [0u8, 0, 8, 3, 0, 0, 0, 1]).unwrap();
    std::fs::write(&labels, [0u8, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
    let out = geoadam(&[
        "train",
        "--dataset",
        "mnist",
        "--mnist-images",
        images.to_str().unwrap(),
        "--mnist-labels",
        labels.to_str().unwrap(),
        "--output-dir",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("loading dataset"), "{stderr}");
}

#[test]
fn output_dir_defaults_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from_env");
    let out = Command::new(env!("CARGO_BIN_EXE_geoadam"))
        .args(["train", "--epochs", "0"])
        .env("GEOADAM_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(target.join("loss.csv").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &conf,
        format!(
            "# small run\noptimizer = momentum\nepochs = 4\nseed = 11\nsynthetic_size = 32\nbatch_size = 16\noutput_dir = {}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    ok(&["train", "--config", conf.to_str().unwrap(), "--epochs", "1"]);
    let echo = std::fs::read_to_string(out_dir.join("config.echo")).unwrap();
    assert!(echo.lines().any(|l| l == "optimizer = momentum"), "{echo}");
    assert!(echo.lines().any(|l| l == "epochs = 1"), "{echo}");
    assert!(echo.lines().any(|l| l == "seed = 11"), "{echo}");
    assert_eq!(rows(&out_dir.join("loss.csv")).len(), 2);
}

#[test]
fn bad_config_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "epochs = 2\nlearning_rate = 0.1\n").unwrap();
    let out = geoadam(&["train", "--config", conf.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("bad.conf:2"), "{stderr}");
}
