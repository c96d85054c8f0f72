//! Deterministic minibatch training of the transformer.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{batches, PatchedSample};
use crate::error::{Error, Result};
use crate::network::{loss, loss_and_gradient, sample_forward, ModelParams, TransformerConfig};
use crate::optim::{Hyperparameters, Method, Optimizer};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub method: Method,
    pub hyper: Hyperparameters<T>,
    pub model: TransformerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl<T: Real> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            method: Method::Adam,
            hyper: Hyperparameters::default(),
            model: TransformerConfig::default(),
            epochs: 50,
            batch_size: 256,
            seed: 1,
        }
    }
}

/// Seeds derived from the run seed, one per random consumer.
#[derive(Clone, Copy, Debug)]
pub struct Seeds {
    pub init: u64,
    pub shuffle: u64,
    pub section: u64,
}

impl Seeds {
    pub fn from_run_seed(seed: u64) -> Self {
        Self {
            init: seed,
            shuffle: seed ^ 0x5348_5546_464C_4521,
            section: seed ^ 0x5345_4354_494F_4E53,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// Counted from 1.
    pub epoch: usize,
    /// Mean per-sample loss seen during the epoch, before each update.
    pub mean_train_loss: f64,
    /// Largest Stiefel drift over all projections at the end of the epoch.
    pub max_orth_drift: f64,
    pub wall_seconds: f64,
    /// Time spent inside optimizer steps only.
    pub update_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub initial: ModelParams<T>,
    pub params: ModelParams<T>,
    pub history: Vec<EpochRecord>,
}

impl<T> TrainOutcome<T> {
    pub fn total_update_seconds(&self) -> f64 {
        self.history.iter().map(|r| r.update_seconds).sum()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.mean_train_loss)
    }
}

/// Trains from a fresh initialization. `on_epoch` sees each record as soon
/// as it is complete.
pub fn train<T: Real>(
    config: &TrainConfig<T>,
    data: &[PatchedSample<T>],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    config.model.validate()?;
    if config.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let seeds = Seeds::from_run_seed(config.seed);
    let initial = ModelParams::init(&config.model, &mut ChaCha8Rng::seed_from_u64(seeds.init))?;
    let mut params = initial.clone();
    let optimizer = Optimizer::new(config.method, config.hyper, seeds.section)?;
    let kinds = params.kinds(config.model.constrain_projections);
    let mut caches = optimizer.init_caches(&params.tensors());
    let mut shuffle = ChaCha8Rng::seed_from_u64(seeds.shuffle);
    let mut history = Vec::with_capacity(config.epochs);
    let mut t = 0u64;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut update_seconds = 0.0;
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for batch in batches(data, config.batch_size, &mut shuffle) {
            let (batch_loss, grads) = loss_and_gradient(&params, &config.model, &batch.tokens, &batch.targets)?;
            if !batch_loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFinite("training gradient"));
            }
            loss_sum += batch_loss.as_f64() * batch.len() as f64;
            seen += batch.len();
            t += 1;
            let update = Instant::now();
            let grad_refs = grads.tensors();
            optimizer.step(&mut params.tensors_mut(), &kinds, &grad_refs, &mut caches, t)?;
            update_seconds += update.elapsed().as_secs_f64();
        }
        let record = EpochRecord {
            epoch,
            mean_train_loss: if seen == 0 { 0.0 } else { loss_sum / seen as f64 },
            max_orth_drift: params.max_projection_drift().as_f64(),
            wall_seconds: start.elapsed().as_secs_f64(),
            update_seconds,
        };
        on_epoch(&record);
        history.push(record);
    }
    Ok(TrainOutcome {
        initial,
        params,
        history,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Mean loss and argmax accuracy on held-out data.
pub fn evaluate<T: Real>(params: &ModelParams<T>, data: &[PatchedSample<T>]) -> Evaluation {
    if data.is_empty() {
        return Evaluation {
            mean_loss: 0.0,
            accuracy: 0.0,
        };
    }
    let (mut total, mut correct) = (0.0, 0usize);
    for s in data {
        let pred = sample_forward(&s.tokens, params).prediction;
        total += loss(&pred, &s.target).as_f64();
        let argmax = pred
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0;
        correct += usize::from(argmax == s.label);
    }
    Evaluation {
        mean_loss: total / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    }
}
