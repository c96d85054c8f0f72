//! Command-line surface. Every run flag overrides the matching config key.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use geoadam::Method;

use crate::config::{DatasetKind, Precision, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "geoadam",
    version,
    about = "Train transformers with Stiefel-constrained attention and compare optimizers",
    after_help = "Configuration: built-in defaults, then $GEOADAM_OUTPUT_DIR for the output \
                  directory, then --config, then individual flags."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write loss.csv, config.echo and weights.bin.
    Train(RunArgs),
    /// Train adam, adam_stiefel, gradient_stiefel and momentum_stiefel on
    /// the same data and merge the loss curves into compare.csv.
    Compare(RunArgs),
    /// Run the property suite and print PASS/FAIL per check.
    Verify(VerifyArgs),
}

#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` file; keys are the long flag names with `_`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// gradient, momentum or adam.
    #[arg(long)]
    pub optimizer: Option<Method>,
    /// Keep attention projections on the Stiefel manifold.
    #[arg(long)]
    pub constrain: Option<bool>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// single or double.
    #[arg(long)]
    pub precision: Option<Precision>,
    /// synthetic or mnist.
    #[arg(long)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub synthetic_size: Option<usize>,
    #[arg(long)]
    pub synthetic_noise: Option<f64>,
    #[arg(long)]
    pub mnist_images: Option<PathBuf>,
    #[arg(long)]
    pub mnist_labels: Option<PathBuf>,
    /// Train on the first N MNIST samples (0 = all).
    #[arg(long)]
    pub mnist_limit: Option<usize>,
    /// Report held-out loss and accuracy in evaluation.csv.
    #[arg(long)]
    pub evaluate: Option<bool>,
    #[arg(long)]
    pub test_images: Option<PathBuf>,
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long)]
    pub holdout: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_classes: Option<usize>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Write measured times; false writes zeros for byte-identical reruns.
    #[arg(long)]
    pub record_time: Option<bool>,
}

macro_rules! override_fields {
    ($args:expr, $config:expr; $($field:ident),* ; $($opt:ident),*) => {
        $(if let Some(v) = &$args.$field { $config.$field = v.clone(); })*
        $(if let Some(v) = &$args.$opt { $config.$opt = Some(v.clone()); })*
    };
}

impl RunArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::from_env();
        if let Some(path) = &self.config {
            c.apply_file(path)?;
        }
        override_fields!(self, c;
            optimizer, constrain, eta, beta1, beta2, delta, alpha, epochs, batch_size, seed,
            precision, dataset, synthetic_size, synthetic_noise, mnist_limit, evaluate, holdout,
            dim, seq_len, n_heads, n_layers, n_classes, output_dir, record_time;
            mnist_images, mnist_labels, test_images, test_labels);
        Ok(c)
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value = "double")]
    pub precision: Precision,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: disable re-skewing so the preservation checks must fail.
    #[arg(long, hide = true)]
    pub disable_reskew: bool,
}
