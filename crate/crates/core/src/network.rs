//! A small vision transformer with hand-written backpropagation.
//!
//! Each layer is multihead attention followed by a residual feedforward
//! block `x ↦ x + tanh(Ax + b)`; the classifier reads the last token only.
//! There is no positional encoding, normalization or dropout, and attention
//! scores are not scaled by `1/√d`.
//!
//! Per-head projections are stored as `N × n` matrices `Y` and applied as
//! `Yᵀ x`, so a constrained projection is literally a point on `St(n, N)`.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::optim::WeightKind;
use crate::scalar::Real;
use crate::stiefel::rand_stiefel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerConfig {
    /// Token dimension `N`.
    pub dim: usize,
    pub seq_len: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_classes: usize,
    /// Keep the attention projections on the Stiefel manifold.
    pub constrain_projections: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            dim: 49,
            seq_len: 16,
            n_heads: 7,
            n_layers: 2,
            n_classes: 10,
            constrain_projections: true,
        }
    }
}

impl TransformerConfig {
    /// `n = N / n_heads`.
    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.seq_len == 0 || self.n_heads == 0 || self.n_classes == 0 {
            return Err(Error::InvalidConfig(
                "dim, seq_len, n_heads and n_classes must be at least 1".into(),
            ));
        }
        if self.dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "token dimension {} is not divisible by the head count {}",
                self.dim, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Query, key and value projections of one head, each `N × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadWeights<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
}

pub type AttentionWeights<T> = Vec<HeadWeights<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardWeights<T> {
    /// `N × N`.
    pub a: Matrix<T>,
    /// `N × 1`, broadcast over tokens.
    pub b: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierWeights<T> {
    /// `n_classes × N`.
    pub w: Matrix<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub heads: AttentionWeights<T>,
    pub feedforward: FeedForwardWeights<T>,
}

/// All trainable weights. Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<LayerParams<T>>,
    pub classifier: ClassifierWeights<T>,
}

/// Glorot uniform: `U(-√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out)))` with
/// `fan_in = cols`, `fan_out = rows`.
pub fn glorot_init<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-bound..=bound)))
}

impl<T: Real> ModelParams<T> {
    /// Stiefel projections come from [`rand_stiefel`] when the config
    /// constrains them, Glorot otherwise. Feedforward matrices and the
    /// classifier are Glorot; biases start at zero.
    pub fn init<R: Rng + ?Sized>(config: &TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (big_n, n) = (config.dim, config.head_dim());
        let projection = |rng: &mut R| -> Result<Matrix<T>> {
            if config.constrain_projections {
                Ok(rand_stiefel::<T, R>(big_n, n, rng)?.into_matrix())
            } else {
                Ok(glorot_init(big_n, n, rng))
            }
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let mut heads = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                heads.push(HeadWeights {
                    query: projection(rng)?,
                    key: projection(rng)?,
                    value: projection(rng)?,
                });
            }
            layers.push(LayerParams {
                heads,
                feedforward: FeedForwardWeights {
                    a: glorot_init(big_n, big_n, rng),
                    b: Matrix::zeros(big_n, 1),
                },
            });
        }
        Ok(Self {
            layers,
            classifier: ClassifierWeights {
                w: glorot_init(config.n_classes, big_n, rng),
            },
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix<T>| Matrix::zeros(m.rows(), m.cols());
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    heads: l
                        .heads
                        .iter()
                        .map(|h| HeadWeights {
                            query: z(&h.query),
                            key: z(&h.key),
                            value: z(&h.value),
                        })
                        .collect(),
                    feedforward: FeedForwardWeights {
                        a: z(&l.feedforward.a),
                        b: z(&l.feedforward.b),
                    },
                })
                .collect(),
            classifier: ClassifierWeights {
                w: z(&self.classifier.w),
            },
        }
    }

    /// Every tensor in a fixed order: per layer the heads' query, key and
    /// value, then the feedforward `A` and `b`; the classifier last.
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        let mut out = Vec::new();
        for l in &self.layers {
            for h in &l.heads {
                out.extend([&h.query, &h.key, &h.value]);
            }
            out.extend([&l.feedforward.a, &l.feedforward.b]);
        }
        out.push(&self.classifier.w);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for h in &mut l.heads {
                out.extend([&mut h.query, &mut h.key, &mut h.value]);
            }
            out.extend([&mut l.feedforward.a, &mut l.feedforward.b]);
        }
        out.push(&mut self.classifier.w);
        out
    }

    /// Geometry of each tensor, aligned with [`ModelParams::tensors`].
    pub fn kinds(&self, constrain_projections: bool) -> Vec<WeightKind> {
        let mut out = Vec::new();
        for l in &self.layers {
            for h in &l.heads {
                let kind = if constrain_projections {
                    let (ambient, dim) = h.query.shape();
                    WeightKind::Stiefel { ambient, dim }
                } else {
                    WeightKind::Euclidean
                };
                out.extend([kind; 3]);
            }
            out.extend([WeightKind::Euclidean; 2]);
        }
        out.push(WeightKind::Euclidean);
        out
    }

    /// Largest `max |YᵀY - I|` over all attention projections.
    pub fn max_projection_drift(&self) -> T {
        self.layers
            .iter()
            .flat_map(|l| l.heads.iter())
            .flat_map(|h| [&h.query, &h.key, &h.value])
            .map(|m| m.orthonormality_defect())
            .fold(T::zero(), T::max)
    }

    /// `self += s * other`, tensor by tensor.
    pub fn axpy(&mut self, s: T, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.axpy(s, b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn check_shapes(&self, config: &TransformerConfig) -> Result<()> {
        config.validate()?;
        let (big_n, n) = (config.dim, config.head_dim());
        let bad = |what: &str| Err(shape_err("ModelParams", format!("{config:?}"), what.to_string()));
        if self.layers.len() != config.n_layers {
            return bad("layer count");
        }
        for l in &self.layers {
            if l.heads.len() != config.n_heads {
                return bad("head count");
            }
            for h in &l.heads {
                for m in [&h.query, &h.key, &h.value] {
                    if m.shape() != (big_n, n) {
                        return bad("projection shape");
                    }
                }
            }
            if l.feedforward.a.shape() != (big_n, big_n) || l.feedforward.b.shape() != (big_n, 1) {
                return bad("feedforward shape");
            }
        }
        if self.classifier.w.shape() != (config.n_classes, big_n) {
            return bad("classifier shape");
        }
        Ok(())
    }
}

/// Numerically stable softmax of one vector.
pub fn softmax<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Softmax applied to every column independently.
pub fn softmax_columns<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for c in 0..m.cols() {
        let s = softmax(m.col(c));
        out.col_mut(c).copy_from_slice(&s);
    }
    out
}

/// Activations of one head kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadTape<T> {
    pub query: Matrix<T>,
    pub key: Matrix<T>,
    pub value: Matrix<T>,
    /// `C = QᵀK`, `seq × seq`.
    pub correlation: Matrix<T>,
    /// Column-wise softmax of `C`.
    pub probs: Matrix<T>,
}

/// `V softmax(QᵀK)` for `head_dim × seq` inputs.
pub fn attention_head<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Matrix<T> {
    assert_eq!(q.shape(), k.shape(), "query/key shape mismatch");
    assert_eq!(q.cols(), v.cols(), "value sequence length mismatch");
    v.matmul(&softmax_columns(&q.matmul_tn(k)))
}

fn head_forward<T: Real>(x: &Matrix<T>, w: &HeadWeights<T>) -> (Matrix<T>, HeadTape<T>) {
    let query = w.query.matmul_tn(x);
    let key = w.key.matmul_tn(x);
    let value = w.value.matmul_tn(x);
    let correlation = query.matmul_tn(&key);
    let probs = softmax_columns(&correlation);
    let out = value.matmul(&probs);
    (
        out,
        HeadTape {
            query,
            key,
            value,
            correlation,
            probs,
        },
    )
}

/// Runs every head on `x` (`N × seq`) and stacks the outputs row-wise in
/// head order; the result is again `N × seq`.
pub fn multihead_forward<T: Real>(
    x: &Matrix<T>,
    heads: &[HeadWeights<T>],
) -> (Matrix<T>, Vec<HeadTape<T>>) {
    let n = heads.first().map_or(0, |h| h.query.cols());
    let mut out = Matrix::zeros(n * heads.len(), x.cols());
    let mut tapes = Vec::with_capacity(heads.len());
    for (i, h) in heads.iter().enumerate() {
        let (o, tape) = head_forward(x, h);
        out.set_block(i * n, 0, &o);
        tapes.push(tape);
    }
    (out, tapes)
}

/// `x + tanh(Ax + b)`; also returns the `tanh` activations.
pub fn feedforward<T: Real>(x: &Matrix<T>, w: &FeedForwardWeights<T>) -> (Matrix<T>, Matrix<T>) {
    let mut act = w.a.matmul(x);
    let bias = w.b.col(0);
    for c in 0..act.cols() {
        for (u, &b) in act.col_mut(c).iter_mut().zip(bias) {
            *u = (*u + b).tanh();
        }
    }
    (x + &act, act)
}

/// `softmax(W x_last)` where `x_last` is the final column of `x`.
pub fn classify<T: Real>(x: &Matrix<T>, w: &ClassifierWeights<T>) -> Vec<T> {
    let last = Matrix::column_vector(x.col(x.cols() - 1));
    softmax(w.w.matmul(&last).as_slice())
}

/// Euclidean distance `‖pred - target‖₂`.
pub fn loss<T: Real>(pred: &[T], target: &[T]) -> T {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum::<T>()
        .sqrt()
}

/// Loss of the uniform prediction against any one-hot target:
/// `√((1 - 1/k)² + (k - 1)/k²)`.
pub fn uniform_plateau(n_classes: usize) -> f64 {
    let k = n_classes as f64;
    ((1.0 - 1.0 / k).powi(2) + (k - 1.0) / (k * k)).sqrt()
}

#[derive(Clone, Debug)]
pub struct LayerTape<T> {
    pub input: Matrix<T>,
    pub heads: Vec<HeadTape<T>>,
    /// Multihead output, the feedforward input.
    pub attention: Matrix<T>,
    /// `tanh(A·attention + b)`.
    pub activation: Matrix<T>,
}

#[derive(Clone, Debug)]
pub struct SampleTape<T> {
    pub layers: Vec<LayerTape<T>>,
    /// Output of the last layer.
    pub output: Matrix<T>,
    pub prediction: Vec<T>,
}

/// Everything [`model_backward`] needs, one entry per sample.
#[derive(Clone, Debug)]
pub struct ForwardTape<T> {
    pub samples: Vec<SampleTape<T>>,
}

fn check_input<T: Real>(x: &Matrix<T>, config: &TransformerConfig) -> Result<()> {
    if x.shape() != (config.dim, config.seq_len) {
        return Err(shape_err(
            "model input",
            format!("{}x{}", config.dim, config.seq_len),
            format!("{}x{}", x.rows(), x.cols()),
        ));
    }
    Ok(())
}

pub fn sample_forward<T: Real>(x: &Matrix<T>, params: &ModelParams<T>) -> SampleTape<T> {
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut current = x.clone();
    for l in &params.layers {
        let (attention, heads) = multihead_forward(&current, &l.heads);
        let (next, activation) = feedforward(&attention, &l.feedforward);
        layers.push(LayerTape {
            input: current,
            heads,
            attention,
            activation,
        });
        current = next;
    }
    let prediction = classify(&current, &params.classifier);
    SampleTape {
        layers,
        output: current,
        prediction,
    }
}

/// Forward pass over a batch of `N × seq` token matrices.
pub fn model_forward<T: Real>(
    batch: &[&Matrix<T>],
    params: &ModelParams<T>,
    config: &TransformerConfig,
) -> Result<(Vec<Vec<T>>, ForwardTape<T>)> {
    params.check_shapes(config)?;
    for x in batch {
        check_input(x, config)?;
    }
    let samples: Vec<SampleTape<T>> = batch.par_iter().map(|x| sample_forward(x, params)).collect();
    let preds = samples.iter().map(|s| s.prediction.clone()).collect();
    Ok((preds, ForwardTape { samples }))
}

/// Accumulates `scale · ∂‖p - t‖/∂θ` for one sample into `grads`.
pub fn sample_backward<T: Real>(
    tape: &SampleTape<T>,
    params: &ModelParams<T>,
    target: &[T],
    scale: T,
    grads: &mut ModelParams<T>,
) -> Result<T> {
    if tape.layers.len() != params.layers.len()
        || tape
            .layers
            .iter()
            .zip(&params.layers)
            .any(|(t, p)| t.heads.len() != p.heads.len())
    {
        return Err(shape_err(
            "model_backward",
            format!("{} layers", params.layers.len()),
            format!("tape with {} layers", tape.layers.len()),
        ));
    }
    let pred = &tape.prediction;
    if pred.len() != target.len() {
        return Err(shape_err("model_backward", pred.len(), target.len()));
    }

    let residual: Vec<T> = pred.iter().zip(target).map(|(&p, &t)| p - t).collect();
    let norm = residual.iter().map(|&r| r * r).sum::<T>().sqrt();
    // d loss / d pred; the norm's kink at zero gets the zero subgradient
    let dpred: Vec<T> = if norm > T::zero() {
        residual.iter().map(|&r| scale * r / norm).collect()
    } else {
        vec![T::zero(); residual.len()]
    };
    let inner: T = pred.iter().zip(&dpred).map(|(&p, &d)| p * d).sum();
    let dlogits: Vec<T> = pred.iter().zip(&dpred).map(|(&p, &d)| p * (d - inner)).collect();

    let out = &tape.output;
    let last = out.cols() - 1;
    let dlogits_m = Matrix::column_vector(&dlogits);
    let x_last = Matrix::column_vector(out.col(last));
    grads.classifier.w.axpy(T::one(), &dlogits_m.matmul_nt(&x_last));
    let mut dx = Matrix::zeros(out.rows(), out.cols());
    dx.col_mut(last)
        .copy_from_slice(params.classifier.w.matmul_tn(&dlogits_m).as_slice());

    for ((lt, lp), lg) in tape
        .layers
        .iter()
        .zip(&params.layers)
        .zip(grads.layers.iter_mut())
        .rev()
    {
        // residual feedforward
        let mut du = dx.clone();
        for (d, &h) in du.as_mut_slice().iter_mut().zip(lt.activation.as_slice()) {
            *d *= T::one() - h * h;
        }
        lg.feedforward.a.axpy(T::one(), &du.matmul_nt(&lt.attention));
        {
            let gb = lg.feedforward.b.col_mut(0);
            for c in 0..du.cols() {
                for (g, &d) in gb.iter_mut().zip(du.col(c)) {
                    *g += d;
                }
            }
        }
        let mut dattn = dx;
        dattn.axpy(T::one(), &lp.feedforward.a.matmul_tn(&du));

        // attention heads
        let x = &lt.input;
        let mut dinput = Matrix::zeros(x.rows(), x.cols());
        for (i, ((ht, hp), hg)) in lt
            .heads
            .iter()
            .zip(&lp.heads)
            .zip(lg.heads.iter_mut())
            .enumerate()
        {
            let n = ht.query.rows();
            let dout = dattn.block(i * n, 0, n, dattn.cols());
            let dvalue = dout.matmul_nt(&ht.probs);
            let dprobs = ht.value.matmul_tn(&dout);
            let mut dcorr = dprobs;
            for c in 0..dcorr.cols() {
                let p = ht.probs.col(c);
                let dot: T = p.iter().zip(dcorr.col(c)).map(|(&a, &b)| a * b).sum();
                for (d, &pi) in dcorr.col_mut(c).iter_mut().zip(p) {
                    *d = pi * (*d - dot);
                }
            }
            let dquery = ht.key.matmul_nt(&dcorr);
            let dkey = ht.query.matmul(&dcorr);

            hg.query.axpy(T::one(), &x.matmul_nt(&dquery));
            hg.key.axpy(T::one(), &x.matmul_nt(&dkey));
            hg.value.axpy(T::one(), &x.matmul_nt(&dvalue));
            dinput.axpy(T::one(), &hp.query.matmul(&dquery));
            dinput.axpy(T::one(), &hp.key.matmul(&dkey));
            dinput.axpy(T::one(), &hp.value.matmul(&dvalue));
        }
        dx = dinput;
    }
    Ok(norm)
}

/// Exact gradient of the mean batch loss with respect to every weight.
///
/// Projections are treated as plain arrays here; manifold structure only
/// enters in the optimizer.
pub fn model_backward<T: Real>(
    tape: &ForwardTape<T>,
    params: &ModelParams<T>,
    targets: &[&[T]],
) -> Result<ModelParams<T>> {
    if tape.samples.len() != targets.len() {
        return Err(shape_err("model_backward", tape.samples.len(), targets.len()));
    }
    let mut grads = params.zeros_like();
    if targets.is_empty() {
        return Ok(grads);
    }
    let scale = T::one() / T::lit(targets.len() as f64);
    for (s, t) in tape.samples.iter().zip(targets) {
        sample_backward(s, params, t, scale, &mut grads)?;
    }
    Ok(grads)
}

/// Samples per work unit in [`loss_and_gradient`]. Fixed so the summation
/// order, and hence the result, does not depend on the thread count.
const CHUNK: usize = 16;

/// Mean loss and its gradient in one fused pass, parallel over samples.
pub fn loss_and_gradient<T: Real>(
    params: &ModelParams<T>,
    config: &TransformerConfig,
    batch: &[&Matrix<T>],
    targets: &[&[T]],
) -> Result<(T, ModelParams<T>)> {
    params.check_shapes(config)?;
    if batch.len() != targets.len() {
        return Err(shape_err("loss_and_gradient", batch.len(), targets.len()));
    }
    for x in batch {
        check_input(x, config)?;
    }
    if batch.is_empty() {
        return Ok((T::zero(), params.zeros_like()));
    }
    let scale = T::one() / T::lit(batch.len() as f64);
    let partials = batch
        .par_chunks(CHUNK)
        .zip(targets.par_chunks(CHUNK))
        .map(|(xs, ts)| -> Result<(T, ModelParams<T>)> {
            let mut grads = params.zeros_like();
            let mut total = T::zero();
            for (x, t) in xs.iter().zip(ts) {
                let tape = sample_forward(x, params);
                total += sample_backward(&tape, params, t, scale, &mut grads)?;
            }
            Ok((total, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut iter = partials.into_iter();
    let (mut total, mut grads) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        total += l;
        grads.axpy(T::one(), &g);
    }
    Ok((total * scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> TransformerConfig {
        TransformerConfig {
            dim: 6,
            seq_len: 3,
            n_heads: 2,
            n_layers: 1,
            n_classes: 4,
            constrain_projections: true,
        }
    }

    fn random_input(config: &TransformerConfig, seed: u64) -> Matrix<f64> {
        let mut r = rng(seed);
        Matrix::from_fn(config.dim, config.seq_len, |_, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        TransformerConfig::default().validate().unwrap();
        assert_eq!(TransformerConfig::default().head_dim(), 7);
        let bad = TransformerConfig {
            n_heads: 5,
            ..TransformerConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn softmax_cases() {
        let z = softmax_columns(&Matrix::<f64>::zeros(4, 2));
        assert!(z.as_slice().iter().all(|&p| (p - 0.25).abs() < 1e-15));
        let sat = softmax(&[1000.0_f64, 0.0]);
        assert_eq!(sat, vec![1.0, 0.0]);
        let s = softmax(&[1.0_f64, 2.0, 3.0]);
        for (a, b) in s.iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn attention_with_zero_queries_averages_values() {
        let v = Matrix::<f64>::from_rows(&[&[1.0, 2.0, 6.0], &[0.0, -3.0, 3.0]]);
        let q = Matrix::zeros(2, 3);
        let k = Matrix::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let out = attention_head(&q, &k, &v);
        for c in 0..3 {
            assert!((out[(0, c)] - 3.0).abs() < 1e-14);
            assert!(out[(1, c)].abs() < 1e-14);
        }
    }

    #[test]
    fn attention_single_token_is_identity() {
        let v = Matrix::<f64>::from_rows(&[&[1.5], &[-2.0]]);
        let q = Matrix::from_rows(&[&[0.3], &[0.1]]);
        assert_eq!(attention_head(&q, &q, &v), v);
    }

    #[test]
    fn single_head_equals_attention_head() {
        let config = TransformerConfig {
            dim: 4,
            seq_len: 3,
            n_heads: 1,
            ..small_config()
        };
        let params = ModelParams::<f64>::init(&TransformerConfig { n_layers: 1, ..config }, &mut rng(1)).unwrap();
        let x = random_input(&config, 2);
        let h = &params.layers[0].heads[0];
        let (out, _) = multihead_forward(&x, &params.layers[0].heads);
        let direct = attention_head(&h.query.matmul_tn(&x), &h.key.matmul_tn(&x), &h.value.matmul_tn(&x));
        assert_eq!(out, direct);
    }

    #[test]
    fn permuting_heads_permutes_row_blocks() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(3)).unwrap();
        let x = random_input(&config, 4);
        let heads = &params.layers[0].heads;
        let swapped = vec![heads[1].clone(), heads[0].clone()];
        let (a, _) = multihead_forward(&x, heads);
        let (b, _) = multihead_forward(&x, &swapped);
        assert_eq!(a.block(0, 0, 3, 3), b.block(3, 0, 3, 3));
        assert_eq!(a.block(3, 0, 3, 3), b.block(0, 0, 3, 3));
        assert_eq!(a.shape(), x.shape());
    }

    #[test]
    fn feedforward_cases() {
        let w = FeedForwardWeights {
            a: Matrix::<f64>::zeros(3, 3),
            b: Matrix::zeros(3, 1),
        };
        let x = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        assert_eq!(feedforward(&x, &w).0, x);

        let w = FeedForwardWeights {
            a: Matrix::<f64>::zeros(3, 3),
            b: Matrix::column_vector(&[0.7; 3]),
        };
        let (y, _) = feedforward(&Matrix::zeros(3, 2), &w);
        assert!(y.as_slice().iter().all(|&v| v == 0.7f64.tanh()));
    }

    #[test]
    fn classify_cases() {
        let x = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let zero = ClassifierWeights { w: Matrix::zeros(10, 2) };
        assert!(classify(&x, &zero).iter().all(|&p| (p - 0.1).abs() < 1e-15));

        let w = ClassifierWeights {
            w: Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]),
        };
        let mut other = x.clone();
        other[(0, 0)] = 99.0;
        other[(1, 0)] = -99.0;
        assert_eq!(classify(&x, &w), classify(&other, &w));
        assert!((classify(&x, &w).iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_cases() {
        let t = [0.0, 1.0, 0.0];
        assert_eq!(loss(&t, &t), 0.0);
        let uniform = [0.1; 10];
        let mut hot = [0.0; 10];
        hot[3] = 1.0;
        assert!((loss(&uniform, &hot) - 0.9f64.sqrt()).abs() < 1e-15);
        assert!((uniform_plateau(10) - 0.9f64.sqrt()).abs() < 1e-15);
        let p = [0.2, 0.5, 0.3];
        assert_eq!(loss(&p, &t), loss(&[0.3, 0.5, 0.2], &t));
    }

    #[test]
    fn empty_stack_classifies_input() {
        let config = TransformerConfig {
            n_layers: 0,
            ..small_config()
        };
        let params = ModelParams::<f64>::init(&config, &mut rng(5)).unwrap();
        let x = random_input(&config, 6);
        let (preds, _) = model_forward(&[&x], &params, &config).unwrap();
        assert_eq!(preds[0], classify(&x, &params.classifier));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(5)).unwrap();
        let x = Matrix::zeros(5, 3);
        assert!(model_forward(&[&x], &params, &config).is_err());
    }

    #[test]
    fn saturated_correct_prediction_has_vanishing_gradient() {
        let config = TransformerConfig {
            n_layers: 1,
            ..small_config()
        };
        let mut params = ModelParams::<f64>::init(&config, &mut rng(7)).unwrap();
        let x = random_input(&config, 8);
        let tape = sample_forward(&x, &params);
        // rig the classifier so class 2 wins by a huge margin
        let last = tape.output.col(config.seq_len - 1).to_vec();
        let norm2: f64 = last.iter().map(|v| v * v).sum();
        params.classifier.w = Matrix::zeros(config.n_classes, config.dim);
        for (j, &v) in last.iter().enumerate() {
            params.classifier.w[(2, j)] = 60.0 * v / norm2;
        }
        let target = [0.0, 0.0, 1.0, 0.0];
        let (l, g) = loss_and_gradient(&params, &config, &[&x], &[&target]).unwrap();
        assert!(l < 1e-20);
        assert!(g.tensors().iter().all(|m| m.max_abs() < 1e-20));
    }

    #[test]
    fn kinds_follow_constraint_flag() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(1)).unwrap();
        let kinds = params.kinds(true);
        assert_eq!(kinds.len(), params.tensors().len());
        assert_eq!(kinds[0], WeightKind::Stiefel { ambient: 6, dim: 3 });
        assert!(params.kinds(false).iter().all(|k| *k == WeightKind::Euclidean));
        assert!(params.max_projection_drift() < 1e-14);
    }

    fn batch_loss(params: &ModelParams<f64>, xs: &[Matrix<f64>], ts: &[Vec<f64>]) -> f64 {
        xs.iter()
            .zip(ts)
            .map(|(x, t)| loss(&sample_forward(x, params).prediction, t))
            .sum::<f64>()
            / xs.len() as f64
    }

    #[test]
    fn gradient_matches_central_differences() {
        let config = small_config();
        let h = 1e-5;
        for draw in 0..12u64 {
            let mut r = rng(100 + draw);
            let mut params = ModelParams::<f64>::init(&config, &mut r).unwrap();
            // non-zero biases so their gradient path is exercised
            for l in &mut params.layers {
                l.feedforward.b = Matrix::from_fn(config.dim, 1, |_, _| r.random_range(-0.5..0.5));
            }
            let xs: Vec<_> = (0..3).map(|i| random_input(&config, 1000 * draw + i)).collect();
            let ts: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    let mut t = vec![0.0; config.n_classes];
                    t[(draw as usize + i) % config.n_classes] = 1.0;
                    t
                })
                .collect();
            let xrefs: Vec<_> = xs.iter().collect();
            let trefs: Vec<&[f64]> = ts.iter().map(|t| t.as_slice()).collect();
            let (l, g) = loss_and_gradient(&params, &config, &xrefs, &trefs).unwrap();
            assert!((l - batch_loss(&params, &xs, &ts)).abs() < 1e-14);

            // tape path agrees with the fused path
            let (_, tape) = model_forward(&xrefs, &params, &config).unwrap();
            let g2 = model_backward(&tape, &params, &trefs).unwrap();
            for (a, b) in g.tensors().iter().zip(g2.tensors()) {
                assert!(a.max_abs_diff(b) < 1e-14);
            }

            let mut dir = params.zeros_like();
            for m in dir.tensors_mut() {
                *m = Matrix::from_fn(m.rows(), m.cols(), |_, _| r.random_range(-1.0..1.0));
            }
            let analytic: f64 = g.tensors().iter().zip(dir.tensors()).map(|(a, d)| a.dot(d)).sum();
            let mut plus = params.clone();
            plus.axpy(h, &dir);
            let mut minus = params.clone();
            minus.axpy(-h, &dir);
            let fd = (batch_loss(&plus, &xs, &ts) - batch_loss(&minus, &xs, &ts)) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs());
            assert!(rel <= 1e-6, "draw {draw}: analytic {analytic} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn gradient_is_weighted_mean_over_batch_parts() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(21)).unwrap();
        let xs: Vec<_> = (0..5).map(|i| random_input(&config, 300 + i)).collect();
        let ts: Vec<Vec<f64>> = (0..5)
            .map(|i| {
                let mut t = vec![0.0; config.n_classes];
                t[i as usize % config.n_classes] = 1.0;
                t
            })
            .collect();
        let xr: Vec<_> = xs.iter().collect();
        let tr: Vec<&[f64]> = ts.iter().map(|t| t.as_slice()).collect();
        let (_, full) = loss_and_gradient(&params, &config, &xr, &tr).unwrap();
        let (_, a) = loss_and_gradient(&params, &config, &xr[..2], &tr[..2]).unwrap();
        let (_, b) = loss_and_gradient(&params, &config, &xr[2..], &tr[2..]).unwrap();
        let mut mix = a.zeros_like();
        mix.axpy(0.4, &a);
        mix.axpy(0.6, &b);
        for (f, m) in full.tensors().iter().zip(mix.tensors()) {
            assert!(f.max_abs_diff(m) < 1e-14);
        }
    }

    #[test]
    fn attention_outputs_are_convex_combinations() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(9)).unwrap();
        let x = random_input(&config, 10);
        let tape = sample_forward(&x, &params);
        for (h, ht) in tape.layers[0].heads.iter().enumerate() {
            let n = ht.value.rows();
            for c in 0..config.seq_len {
                let p = ht.probs.col(c);
                assert!(p.iter().all(|&v| v > 0.0));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                for r in 0..n {
                    let combo: f64 = (0..config.seq_len).map(|m| p[m] * ht.value[(r, m)]).sum();
                    assert!((combo - tape.layers[0].attention[(h * n + r, c)]).abs() < 1e-12);
                }
            }
        }
        assert!((tape.prediction.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constraint_flag_does_not_change_evaluation() {
        let config = small_config();
        let params = ModelParams::<f64>::init(&config, &mut rng(11)).unwrap();
        let free = TransformerConfig {
            constrain_projections: false,
            ..config
        };
        let x = random_input(&config, 12);
        let t = [1.0, 0.0, 0.0, 0.0];
        let a = loss_and_gradient(&params, &config, &[&x], &[&t]).unwrap();
        let b = loss_and_gradient(&params, &free, &[&x], &[&t]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn feedforward_matches_straight_line_evaluation() {
        let mut r = rng(13);
        let w = FeedForwardWeights {
            a: Matrix::<f64>::from_fn(4, 4, |_, _| r.random_range(-1.0..1.0)),
            b: Matrix::from_fn(4, 1, |_, _| r.random_range(-1.0..1.0)),
        };
        let x = Matrix::from_fn(4, 3, |_, _| r.random_range(-1.0..1.0));
        let (y, _) = feedforward(&x, &w);
        for i in 0..4 {
            for c in 0..3 {
                let mut u = w.b[(i, 0)];
                for j in 0..4 {
                    u += w.a[(i, j)] * x[(j, c)];
                }
                assert!((y[(i, c)] - (x[(i, c)] + u.tanh())).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_classifier_sits_on_plateau() {
        let config = small_config();
        let mut params = ModelParams::<f64>::init(&config, &mut rng(15)).unwrap();
        params.classifier.w = Matrix::zeros(config.n_classes, config.dim);
        let xs: Vec<_> = (0..4).map(|i| random_input(&config, 40 + i)).collect();
        let ts: Vec<Vec<f64>> = (0..4)
            .map(|i| {
                let mut t = vec![0.0; config.n_classes];
                t[i] = 1.0;
                t
            })
            .collect();
        let xr: Vec<_> = xs.iter().collect();
        let tr: Vec<&[f64]> = ts.iter().map(|t| t.as_slice()).collect();
        let (l, _) = loss_and_gradient(&params, &config, &xr, &tr).unwrap();
        assert!((l - uniform_plateau(config.n_classes)).abs() < 1e-7);
    }

    #[test]
    fn glorot_mean_is_centred() {
        let m: Matrix<f64> = glorot_init(316, 317, &mut rng(17));
        let bound = (6.0f64 / 633.0).sqrt();
        let sigma = bound / (3.0 * m.as_slice().len() as f64).sqrt();
        let mean = m.as_slice().iter().sum::<f64>() / m.as_slice().len() as f64;
        assert!(mean.abs() < 3.0 * sigma);
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let m: Matrix<f64> = glorot_init(10, 49, &mut rng(1));
        let bound = (6.0f64 / 59.0).sqrt();
        assert!(m.as_slice().iter().all(|v| v.abs() <= bound));
        assert_eq!(m, glorot_init(10, 49, &mut rng(1)));
    }
}
