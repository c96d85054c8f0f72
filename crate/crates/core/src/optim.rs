//! Optimizer pipeline shared by vector-space and Stiefel weights.
//!
//! Every step runs `rgrad → lift → update cache → velocity → retraction`.
//! For a Euclidean weight the first two are identities and the retraction
//! is addition; for a Stiefel weight they are the maps in
//! [`crate::stiefel`]. Caches always hold flat coordinates: the weight's
//! column-major buffer, or the `(A, B)` layout of
//! [`HorizontalElement::to_flat`]. Both have `N·n` entries.
//!
//! All velocities carry the descent sign, `W = -η · (...)`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Real;
use crate::stiefel::{geodesic_step, lift, rgrad, HorizontalElement, StiefelPoint};

/// `Ξ`: learning rate `eta`, Adam decays `beta1`/`beta2`, the offset
/// `delta` under the square root, and the momentum coefficient `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hyperparameters<T> {
    pub eta: T,
    pub beta1: T,
    pub beta2: T,
    pub delta: T,
    pub alpha: T,
}

impl<T: Real> Default for Hyperparameters<T> {
    fn default() -> Self {
        Self {
            eta: T::lit(0.001),
            beta1: T::lit(0.9),
            beta2: T::lit(0.99),
            delta: T::lit(3e-7),
            alpha: T::lit(0.5),
        }
    }
}

impl<T: Real> Hyperparameters<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x >= T::zero() && x < T::one();
        let fail = |m: &str| Err(Error::InvalidHyperparameter(m.to_string()));
        if !(self.eta > T::zero()) {
            return fail("eta must be > 0");
        }
        if !unit(self.beta1) || !unit(self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.delta > T::zero()) {
            return fail("delta must be > 0");
        }
        if !unit(self.alpha) {
            return fail("alpha must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Gradient,
    Momentum,
    Adam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gradient => "gradient",
            Method::Momentum => "momentum",
            Method::Adam => "adam",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gradient" | "sgd" => Ok(Method::Gradient),
            "momentum" => Ok(Method::Momentum),
            "adam" => Ok(Method::Adam),
            other => Err(Error::InvalidConfig(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Which geometry a weight lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Euclidean,
    /// `St(dim, ambient)`: an `ambient × dim` matrix with orthonormal columns.
    Stiefel { ambient: usize, dim: usize },
}

/// First and second moments in flat coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamCache<T> {
    pub b1: Vec<T>,
    pub b2: Vec<T>,
    pub t: u64,
}

impl<T: Real> AdamCache<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            b1: vec![T::zero(); len],
            b2: vec![T::zero(); len],
            t: 0,
        }
    }
}

/// Adam cache whose second moment is a single scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarAdamCache<T> {
    pub b1: Vec<T>,
    pub b2: T,
    pub t: u64,
}

impl<T: Real> ScalarAdamCache<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            b1: vec![T::zero(); len],
            b2: T::zero(),
            t: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MomentumCache<T> {
    pub bc: Vec<T>,
}

impl<T: Real> MomentumCache<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            bc: vec![T::zero(); len],
        }
    }
}

fn bias_coefficients<T: Real>(beta: T, t: u64) -> (T, T) {
    let bt = beta.powi(t.min(i32::MAX as u64) as i32);
    let denom = T::one() - bt;
    ((beta - bt) / denom, (T::one() - beta) / denom)
}

/// Bias-corrected moment update:
/// `B1 ← (β1-β1ᵗ)/(1-β1ᵗ) B1 + (1-β1)/(1-β1ᵗ) Bt`, and likewise `B2` with
/// `Bt ⊙ Bt`.
pub fn adam_update_cache<T: Real>(
    cache: &mut AdamCache<T>,
    bt: &[T],
    t: u64,
    h: &Hyperparameters<T>,
) {
    assert!(t >= 1, "Adam steps are counted from 1");
    assert_eq!(cache.b1.len(), bt.len(), "cache / gradient length mismatch");
    let (keep1, mix1) = bias_coefficients(h.beta1, t);
    let (keep2, mix2) = bias_coefficients(h.beta2, t);
    for ((m1, m2), &g) in cache.b1.iter_mut().zip(cache.b2.iter_mut()).zip(bt) {
        *m1 = keep1 * *m1 + mix1 * g;
        *m2 = keep2 * *m2 + mix2 * (g * g);
    }
    cache.t = t;
}

/// `W = -η B1 / √(B2 + δ)`, elementwise.
pub fn adam_velocity<T: Real>(cache: &AdamCache<T>, h: &Hyperparameters<T>) -> Vec<T> {
    cache
        .b1
        .iter()
        .zip(&cache.b2)
        .map(|(&m1, &m2)| -h.eta * m1 / (m2 + h.delta).sqrt())
        .collect()
}

/// `B2 ← (β2-β2ᵗ)/(1-β2ᵗ) B2 + (1-β2)/(1-β2ᵗ) ‖Bt‖²`; `B1` as in full Adam.
pub fn scalar_adam_update<T: Real>(
    cache: &mut ScalarAdamCache<T>,
    bt: &[T],
    t: u64,
    h: &Hyperparameters<T>,
) {
    assert!(t >= 1, "Adam steps are counted from 1");
    assert_eq!(cache.b1.len(), bt.len(), "cache / gradient length mismatch");
    let (keep1, mix1) = bias_coefficients(h.beta1, t);
    let (keep2, mix2) = bias_coefficients(h.beta2, t);
    for (m1, &g) in cache.b1.iter_mut().zip(bt) {
        *m1 = keep1 * *m1 + mix1 * g;
    }
    let sq: T = bt.iter().map(|&g| g * g).sum();
    cache.b2 = keep2 * cache.b2 + mix2 * sq;
    cache.t = t;
}

pub fn scalar_adam_velocity<T: Real>(cache: &ScalarAdamCache<T>, h: &Hyperparameters<T>) -> Vec<T> {
    let denom = (cache.b2 + h.delta).sqrt();
    cache.b1.iter().map(|&m1| -h.eta * m1 / denom).collect()
}

/// `cache ← α cache + Bt`, returns `W = -η cache`.
pub fn momentum_step<T: Real>(
    cache: &mut MomentumCache<T>,
    bt: &[T],
    h: &Hyperparameters<T>,
) -> Vec<T> {
    assert_eq!(cache.bc.len(), bt.len(), "cache / gradient length mismatch");
    cache
        .bc
        .iter_mut()
        .zip(bt)
        .map(|(c, &g)| {
            *c = h.alpha * *c + g;
            -h.eta * *c
        })
        .collect()
}

pub fn gradient_velocity<T: Real>(bt: &[T], h: &Hyperparameters<T>) -> Vec<T> {
    bt.iter().map(|&g| -h.eta * g).collect()
}

/// Per-weight optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub enum Cache<T> {
    Gradient,
    Momentum(MomentumCache<T>),
    Adam(AdamCache<T>),
}

impl<T: Real> Cache<T> {
    pub fn new(method: Method, len: usize) -> Self {
        match method {
            Method::Gradient => Cache::Gradient,
            Method::Momentum => Cache::Momentum(MomentumCache::zeros(len)),
            Method::Adam => Cache::Adam(AdamCache::zeros(len)),
        }
    }

    /// `update` followed by `velocity`.
    pub fn advance(&mut self, bt: &[T], t: u64, h: &Hyperparameters<T>) -> Vec<T> {
        match self {
            Cache::Gradient => gradient_velocity(bt, h),
            Cache::Momentum(c) => momentum_step(c, bt, h),
            Cache::Adam(c) => {
                adam_update_cache(c, bt, t, h);
                adam_velocity(c, h)
            }
        }
    }
}

/// Deterministic RNG for the section of weight `index` at step `step`.
pub fn section_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 finalizer over the three inputs
    let mut z = seed
        ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (index as u64).wrapping_add(1).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport<T> {
    /// Largest `max |YᵀY - I|` over the Stiefel weights after the step.
    pub max_drift: T,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    method: Method,
    hyper: Hyperparameters<T>,
    section_seed: u64,
    reskew: bool,
    repair_tol: Option<T>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(method: Method, hyper: Hyperparameters<T>, section_seed: u64) -> Result<Self> {
        hyper.validate()?;
        Ok(Self {
            method,
            hyper,
            section_seed,
            reskew: true,
            repair_tol: None,
        })
    }

    /// Test hook: read the velocity's `A` block verbatim instead of
    /// projecting it onto skew matrices.
    pub fn without_reskew(mut self) -> Self {
        self.reskew = false;
        self
    }

    /// Re-orthonormalize a Stiefel weight by QR whenever its drift exceeds
    /// `tol`. Off unless requested.
    pub fn with_repair(mut self, tol: T) -> Self {
        self.repair_tol = Some(tol);
        self
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn hyperparameters(&self) -> &Hyperparameters<T> {
        &self.hyper
    }

    pub fn init_caches(&self, weights: &[&Matrix<T>]) -> Vec<Cache<T>> {
        weights
            .iter()
            .map(|w| Cache::new(self.method, w.as_slice().len()))
            .collect()
    }

    /// One optimizer step at time `t` (counted from 1 and incremented by
    /// the caller).
    ///
    /// Weights are updated independently and in parallel; each Stiefel
    /// weight draws its section from [`section_rng`]`(seed, t, index)`.
    pub fn step(
        &self,
        weights: &mut [&mut Matrix<T>],
        kinds: &[WeightKind],
        grads: &[&Matrix<T>],
        caches: &mut [Cache<T>],
        t: u64,
    ) -> Result<StepReport<T>> {
        let count = weights.len();
        if kinds.len() != count || grads.len() != count || caches.len() != count {
            return Err(shape_err(
                "optimizer step",
                format!("{count} kinds/grads/caches"),
                format!("{}/{}/{}", kinds.len(), grads.len(), caches.len()),
            ));
        }
        let drifts = weights
            .par_iter_mut()
            .zip(caches.par_iter_mut())
            .enumerate()
            .map(|(i, (w, cache))| self.step_weight(w, kinds[i], grads[i], cache, t, i))
            .collect::<Result<Vec<T>>>()?;
        let max_drift = drifts.into_iter().fold(T::zero(), T::max);
        Ok(StepReport { max_drift })
    }

    fn step_weight(
        &self,
        w: &mut Matrix<T>,
        kind: WeightKind,
        grad: &Matrix<T>,
        cache: &mut Cache<T>,
        t: u64,
        index: usize,
    ) -> Result<T> {
        if grad.shape() != w.shape() {
            return Err(shape_err(
                "optimizer step",
                format!("gradient {:?}", w.shape()),
                format!("{:?}", grad.shape()),
            ));
        }
        match kind {
            WeightKind::Euclidean => {
                let velocity = cache.advance(grad.as_slice(), t, &self.hyper);
                for (x, v) in w.as_mut_slice().iter_mut().zip(velocity) {
                    *x += v;
                }
                Ok(T::zero())
            }
            WeightKind::Stiefel { ambient, dim } => {
                if w.shape() != (ambient, dim) {
                    return Err(shape_err(
                        "optimizer step",
                        format!("Stiefel weight {ambient}x{dim}"),
                        format!("{:?}", w.shape()),
                    ));
                }
                let y = StiefelPoint::new_unchecked(std::mem::replace(w, Matrix::zeros(0, 0)));
                let result = self.stiefel_update(&y, grad, cache, t, index);
                match result {
                    Ok(next) => {
                        let drift = next.drift();
                        *w = next.into_matrix();
                        Ok(drift)
                    }
                    Err(e) => {
                        *w = y.into_matrix();
                        Err(e)
                    }
                }
            }
        }
    }

    fn stiefel_update(
        &self,
        y: &StiefelPoint<T>,
        grad: &Matrix<T>,
        cache: &mut Cache<T>,
        t: u64,
        index: usize,
    ) -> Result<StiefelPoint<T>> {
        let (ambient, dim) = y.matrix().shape();
        let delta = rgrad(y, grad)?;
        let mut rng = section_rng(self.section_seed, t, index);
        let (lambda, lifted) = lift(y, &delta, &mut rng)?;
        let velocity = cache.advance(&lifted.to_flat(), t, &self.hyper);
        let w = HorizontalElement::from_flat(&velocity, ambient, dim, self.reskew)?;
        let next = geodesic_step(y, &lambda, &w)?;
        match self.repair_tol {
            Some(tol) if next.drift() > tol => next.repair(),
            _ => Ok(next),
        }
    }
}
