//! The `train`, `compare` and `verify` subcommands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use geoadam::container;
use geoadam::data::{load_idx, patchify, synth_dataset, PatchedSample, SynthConfig};
use geoadam::train::{evaluate, train, EpochRecord, Evaluation, TrainConfig};
use geoadam::verify::{run_all, CheckResult, VerifyOptions};
use geoadam::{Hyperparameters, Method, Real};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DatasetKind, Precision, RunConfig};

pub const LOSS_HEADER: &str = "epoch,mean_train_loss,max_orth_drift,wall_seconds";
pub const LOSS_FILE: &str = "loss.csv";
pub const ECHO_FILE: &str = "config.echo";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const EVAL_FILE: &str = "evaluation.csv";
pub const COMPARE_FILE: &str = "compare.csv";

/// The four comparison runs, in column order.
pub const SCENARIOS: [(&str, Method, bool); 4] = [
    ("adam", Method::Adam, false),
    ("adam_stiefel", Method::Adam, true),
    ("gradient_stiefel", Method::Gradient, true),
    ("momentum_stiefel", Method::Momentum, true),
];

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub total_update_seconds: f64,
    pub evaluation: Option<Evaluation>,
}

struct Datasets<T> {
    train: Vec<PatchedSample<T>>,
    test: Option<Vec<PatchedSample<T>>>,
}

fn load_mnist<T: Real>(images: &Path, labels: &Path, limit: usize) -> anyhow::Result<Vec<PatchedSample<T>>> {
    let mut samples = load_idx(images, labels)?;
    if limit > 0 {
        samples.truncate(limit);
    }
    Ok(samples.iter().map(patchify).collect())
}

fn load_datasets<T: Real>(config: &RunConfig) -> anyhow::Result<Datasets<T>> {
    match config.dataset {
        DatasetKind::Synthetic => {
            let synth = SynthConfig {
                dim: config.dim,
                seq_len: config.seq_len,
                n_classes: config.n_classes,
                noise: config.synthetic_noise,
            };
            let extra = if config.evaluate { config.holdout } else { 0 };
            let mut all = synth_dataset(
                config.synthetic_size + extra,
                &synth,
                &mut ChaCha8Rng::seed_from_u64(config.seed),
            );
            let test = config.evaluate.then(|| all.split_off(config.synthetic_size));
            Ok(Datasets { train: all, test })
        }
        DatasetKind::Mnist => {
            let path = |p: &Option<PathBuf>| p.clone().context("missing MNIST path");
            let train = load_mnist(&path(&config.mnist_images)?, &path(&config.mnist_labels)?, config.mnist_limit)?;
            let test = if config.evaluate {
                Some(load_mnist(&path(&config.test_images)?, &path(&config.test_labels)?, 0)?)
            } else {
                None
            };
            Ok(Datasets { train, test })
        }
    }
}

fn hyper<T: Real>(h: &Hyperparameters<f64>) -> Hyperparameters<T> {
    Hyperparameters {
        eta: T::lit(h.eta),
        beta1: T::lit(h.beta1),
        beta2: T::lit(h.beta2),
        delta: T::lit(h.delta),
        alpha: T::lit(h.alpha),
    }
}

fn loss_row(r: &EpochRecord, record_time: bool) -> String {
    let wall = if record_time { r.wall_seconds } else { 0.0 };
    format!("{},{},{:e},{}", r.epoch, r.mean_train_loss, r.max_orth_drift, wall)
}

fn run_on<T: Real>(config: &RunConfig, data: &Datasets<T>) -> anyhow::Result<RunSummary> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("writing artifacts: creating {}", dir.display()))?;
    fs::write(dir.join(ECHO_FILE), config.echo()).context("writing artifacts: config.echo")?;

    let loss_path = dir.join(LOSS_FILE);
    let mut loss_file = BufWriter::new(File::create(&loss_path).context("writing artifacts: loss.csv")?);
    writeln!(loss_file, "{LOSS_HEADER}").context("writing artifacts: loss.csv")?;
    let mut write_error = None;

    let train_config = TrainConfig {
        method: config.optimizer,
        hyper: hyper::<T>(&config.hyperparameters()),
        model: config.model(),
        epochs: config.epochs,
        batch_size: config.batch_size,
        seed: config.seed,
    };
    let outcome = train(&train_config, &data.train, |r| {
        if write_error.is_none() {
            let res = writeln!(loss_file, "{}", loss_row(r, config.record_time)).and_then(|_| loss_file.flush());
            write_error = res.err();
        }
    })
    .context("training")?;
    if let Some(e) = write_error {
        return Err(e).context("writing artifacts: loss.csv");
    }
    loss_file.flush().context("writing artifacts: loss.csv")?;

    fs::write(dir.join(WEIGHTS_FILE), container::encode(&outcome.params.tensors()))
        .context("writing artifacts: weights.bin")?;

    let evaluation = data.test.as_ref().map(|test| evaluate(&outcome.params, test));
    if let Some(e) = &evaluation {
        fs::write(
            dir.join(EVAL_FILE),
            format!("mean_loss,accuracy\n{},{}\n", e.mean_loss, e.accuracy),
        )
        .context("writing artifacts: evaluation.csv")?;
    }
    Ok(RunSummary {
        output_dir: dir.clone(),
        total_update_seconds: outcome.total_update_seconds(),
        history: outcome.history,
        evaluation,
    })
}

fn train_with<T: Real>(config: &RunConfig) -> anyhow::Result<RunSummary> {
    let data = load_datasets::<T>(config).context("loading dataset")?;
    run_on(config, &data)
}

/// Trains once and writes `loss.csv`, `config.echo` and `weights.bin`
/// (plus `evaluation.csv` when evaluating) into the output directory.
pub fn cmd_train(config: &RunConfig) -> anyhow::Result<RunSummary> {
    config.validate().context("validating configuration")?;
    match config.precision {
        Precision::Single => train_with::<f32>(config),
        Precision::Double => train_with::<f64>(config),
    }
}

#[derive(Clone, Debug)]
pub struct CompareSummary {
    pub runs: Vec<(&'static str, RunSummary)>,
    pub csv_path: PathBuf,
}

fn compare_with<T: Real>(config: &RunConfig) -> anyhow::Result<CompareSummary> {
    let data = load_datasets::<T>(config).context("loading dataset")?;
    let mut runs = Vec::with_capacity(SCENARIOS.len());
    for (label, method, constrain) in SCENARIOS {
        let scenario = RunConfig {
            optimizer: method,
            constrain,
            output_dir: config.output_dir.join(label),
            ..config.clone()
        };
        let summary = run_on(&scenario, &data).with_context(|| format!("scenario {label}"))?;
        runs.push((label, summary));
    }

    let mut csv = String::from("epoch");
    for (label, _) in &runs {
        csv.push(',');
        csv.push_str(label);
    }
    csv.push('\n');
    for e in 0..config.epochs {
        csv.push_str(&(e + 1).to_string());
        for (_, run) in &runs {
            csv.push(',');
            csv.push_str(&run.history[e].mean_train_loss.to_string());
        }
        csv.push('\n');
    }
    csv.push_str("total_update_seconds");
    for (_, run) in &runs {
        let t = if config.record_time { run.total_update_seconds } else { 0.0 };
        csv.push(',');
        csv.push_str(&t.to_string());
    }
    csv.push('\n');
    let csv_path = config.output_dir.join(COMPARE_FILE);
    fs::write(&csv_path, csv).context("writing artifacts: compare.csv")?;
    Ok(CompareSummary { runs, csv_path })
}

/// Runs the four scenarios on shared data and merges their loss curves.
/// Each scenario also gets its own `train` artifacts in a subdirectory
/// named after it.
pub fn cmd_compare(config: &RunConfig) -> anyhow::Result<CompareSummary> {
    config.validate().context("validating configuration")?;
    fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("writing artifacts: creating {}", config.output_dir.display()))?;
    match config.precision {
        Precision::Single => compare_with::<f32>(config),
        Precision::Double => compare_with::<f64>(config),
    }
}

pub fn cmd_verify(precision: Precision, options: &VerifyOptions) -> Vec<CheckResult> {
    match precision {
        Precision::Single => run_all::<f32>(options),
        Precision::Double => run_all::<f64>(options),
    }
}
