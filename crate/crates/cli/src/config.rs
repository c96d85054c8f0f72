//! Run configuration: defaults, flat `key = value` files, and validation.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context};
use geoadam::{Hyperparameters, Method, TransformerConfig};

pub const OUTPUT_DIR_ENV: &str = "GEOADAM_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl FromStr for Precision {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "single" | "f32" => Ok(Self::Single),
            "double" | "f64" => Ok(Self::Double),
            _ => bail!("precision must be single or double, got {s:?}"),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Single => "single",
            Self::Double => "double",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "mnist" => Ok(Self::Mnist),
            _ => bail!("dataset must be synthetic or mnist, got {s:?}"),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Mnist => "mnist",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub optimizer: Method,
    pub constrain: bool,
    pub eta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub delta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub dataset: DatasetKind,
    pub synthetic_size: usize,
    pub synthetic_noise: f64,
    pub mnist_images: Option<PathBuf>,
    pub mnist_labels: Option<PathBuf>,
    /// Use only the first this many MNIST samples; 0 keeps all.
    pub mnist_limit: usize,
    /// Report held-out loss and accuracy after training.
    pub evaluate: bool,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    /// Held-out synthetic samples generated when `evaluate` is set.
    pub holdout: usize,
    pub dim: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    pub output_dir: PathBuf,
    /// Write measured seconds into `wall_seconds`; when false the column is
    /// zero and reruns produce byte-identical files.
    pub record_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = Hyperparameters::<f64>::default();
        let m = TransformerConfig::default();
        Self {
            optimizer: Method::Adam,
            constrain: true,
            eta: h.eta,
            beta1: h.beta1,
            beta2: h.beta2,
            delta: h.delta,
            alpha: h.alpha,
            epochs: 50,
            batch_size: 256,
            seed: 1,
            precision: Precision::Single,
            dataset: DatasetKind::Synthetic,
            synthetic_size: 2048,
            synthetic_noise: 0.5,
            mnist_images: None,
            mnist_labels: None,
            mnist_limit: 2048,
            evaluate: false,
            test_images: None,
            test_labels: None,
            holdout: 512,
            dim: m.dim,
            seq_len: m.seq_len,
            n_heads: m.n_heads,
            n_layers: m.n_layers,
            n_classes: m.n_classes,
            output_dir: PathBuf::from("runs"),
            record_time: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| anyhow::anyhow!("invalid value {value:?} for {key}: {e}"))
}

fn parse_bool(key: &str, value: &str) -> anyhow::Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => bail!("invalid value {value:?} for {key}: expected true or false"),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Defaults, with the output directory taken from the environment when
    /// set.
    pub fn from_env() -> Self {
        let mut c = Self::default();
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            c.output_dir = PathBuf::from(dir);
        }
        c
    }

    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        match key {
            "optimizer" => self.optimizer = parse(key, value)?,
            "constrain" => self.constrain = parse_bool(key, value)?,
            "eta" => self.eta = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "delta" => self.delta = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            "dataset" => self.dataset = value.parse()?,
            "synthetic_size" => self.synthetic_size = parse(key, value)?,
            "synthetic_noise" => self.synthetic_noise = parse(key, value)?,
            "mnist_images" => self.mnist_images = optional_path(value),
            "mnist_labels" => self.mnist_labels = optional_path(value),
            "mnist_limit" => self.mnist_limit = parse(key, value)?,
            "evaluate" => self.evaluate = parse_bool(key, value)?,
            "test_images" => self.test_images = optional_path(value),
            "test_labels" => self.test_labels = optional_path(value),
            "holdout" => self.holdout = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "seq_len" => self.seq_len = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "n_classes" => self.n_classes = parse(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            "record_time" => self.record_time = parse_bool(key, value)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file. Blank lines and lines starting
    /// with `#` are ignored.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected `key = value`", i + 1))?;
            self.set(key.trim(), value.trim())
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> anyhow::Result<()> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn hyperparameters(&self) -> Hyperparameters<f64> {
        Hyperparameters {
            eta: self.eta,
            beta1: self.beta1,
            beta2: self.beta2,
            delta: self.delta,
            alpha: self.alpha,
        }
    }

    pub fn model(&self) -> TransformerConfig {
        TransformerConfig {
            dim: self.dim,
            seq_len: self.seq_len,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_classes: self.n_classes,
            constrain_projections: self.constrain,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.hyperparameters().validate()?;
        self.model().validate()?;
        if self.batch_size == 0 {
            bail!("batch_size must be at least 1");
        }
        if !(self.synthetic_noise >= 0.0 && self.synthetic_noise.is_finite()) {
            bail!("synthetic_noise must be finite and non-negative");
        }
        if self.dataset == DatasetKind::Mnist {
            if (self.dim, self.seq_len, self.n_classes) != (49, 16, 10) {
                bail!("MNIST tokens are 49x16 with 10 classes; set dim = 49, seq_len = 16, n_classes = 10");
            }
            let mut required = vec![("mnist_images", &self.mnist_images), ("mnist_labels", &self.mnist_labels)];
            if self.evaluate {
                required.push(("test_images", &self.test_images));
                required.push(("test_labels", &self.test_labels));
            }
            for (key, path) in required {
                match path {
                    None => bail!("{key} must be set for the mnist dataset"),
                    Some(p) if !p.is_file() => bail!("{key}: {} does not exist", p.display()),
                    Some(_) => {}
                }
            }
        }
        Ok(())
    }

    /// The fully resolved configuration in the same format [`apply_text`]
    /// reads.
    ///
    /// [`apply_text`]: RunConfig::apply_text
    pub fn echo(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let entries: Vec<(&str, String)> = vec![
            ("optimizer", self.optimizer.to_string()),
            ("constrain", self.constrain.to_string()),
            ("eta", self.eta.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("delta", self.delta.to_string()),
            ("alpha", self.alpha.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("precision", self.precision.to_string()),
            ("dataset", self.dataset.to_string()),
            ("synthetic_size", self.synthetic_size.to_string()),
            ("synthetic_noise", self.synthetic_noise.to_string()),
            ("mnist_images", path(&self.mnist_images)),
            ("mnist_labels", path(&self.mnist_labels)),
            ("mnist_limit", self.mnist_limit.to_string()),
            ("evaluate", self.evaluate.to_string()),
            ("test_images", path(&self.test_images)),
            ("test_labels", path(&self.test_labels)),
            ("holdout", self.holdout.to_string()),
            ("dim", self.dim.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("record_time", self.record_time.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_table() {
        let c = RunConfig::default();
        assert_eq!((c.eta, c.beta1, c.beta2, c.delta, c.alpha), (0.001, 0.9, 0.99, 3e-7, 0.5));
        assert_eq!((c.n_layers, c.epochs, c.batch_size), (2, 50, 256));
        c.validate().unwrap();
    }

    #[test]
    fn parses_flat_files() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\noptimizer = momentum\n constrain=false \neta = 0.01\n", "t").unwrap();
        assert_eq!(c.optimizer, Method::Momentum);
        assert!(!c.constrain);
        assert_eq!(c.eta, 0.01);
        assert!(c.apply_text("nonsense", "t").is_err());
        let err = c.apply_text("epochs = -3", "cfg").unwrap_err();
        assert!(format!("{err:#}").contains("cfg:1"));
        assert!(c.apply_text("bogus = 1", "t").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("precision", "double").unwrap();
        c.set("mnist_images", "/x/y").unwrap();
        c.set("record_time", "false").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.echo(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation_rejects_bad_runs() {
        let mut c = RunConfig::default();
        c.n_heads = 5;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.dataset = DatasetKind::Mnist;
        assert!(c.validate().is_err());
        c.mnist_images = Some("/definitely/missing".into());
        c.mnist_labels = Some("/definitely/missing".into());
        assert!(format!("{:#}", c.validate().unwrap_err()).contains("does not exist"));
        let mut c = RunConfig::default();
        c.beta1 = 1.0;
        assert!(c.validate().is_err());
    }
}
