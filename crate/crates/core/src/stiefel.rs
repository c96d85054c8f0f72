//! The Stiefel manifold `St(n, N) = { Y ∈ ℝ^{N×n} : YᵀY = I_n }` as a
//! homogeneous space of `O(N)`.
//!
//! Tangent vectors at `Y` are mapped to the skew matrix `Ω(Δ)` with
//! `Ω(Δ)Y = Δ`, then conjugated by a section `λ(Y) ∈ O(N)` (an orthogonal
//! completion of `Y`) into the *global* tangent space
//!
//! ```text
//! g_hor = { [[A, -Bᵀ], [B, 0]] : A ∈ ℝ^{n×n} skew, B ∈ ℝ^{(N-n)×n} }
//! ```
//!
//! which is the same vector space for every `Y`. Optimizer state lives
//! there. The way back is the exact geodesic `λ(Y) exp(𝓑) E`, evaluated
//! through a `2n × 2n` series so that no `N × N` exponential is formed.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{householder_qr, skew_defect, skew_part, Matrix};
use crate::scalar::Real;

/// Number of redraws attempted when a Gaussian sample is rank deficient.
pub const MAX_REDRAWS: usize = 8;

/// Term cap for [`exp_series`].
pub const SERIES_TERM_CAP: usize = 100;

/// An `N × n` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint<T> {
    y: Matrix<T>,
}

impl<T: Real> StiefelPoint<T> {
    /// Validates orthonormality against [`Real::orth_tol`].
    pub fn new(y: Matrix<T>) -> Result<Self> {
        Self::with_tolerance(y, T::orth_tol())
    }

    pub fn with_tolerance(y: Matrix<T>, tol: T) -> Result<Self> {
        if y.cols() > y.rows() {
            return Err(shape_err("StiefelPoint", "n <= N", format!("{}x{}", y.rows(), y.cols())));
        }
        y.ensure_finite("StiefelPoint")?;
        let drift = y.orthonormality_defect();
        if drift > tol {
            return Err(Error::NotOrthonormal {
                drift: drift.as_f64(),
                tol: tol.as_f64(),
            });
        }
        Ok(Self { y })
    }

    /// Wraps `y` without checking. Use [`StiefelPoint::drift`] to audit.
    pub fn new_unchecked(y: Matrix<T>) -> Self {
        Self { y }
    }

    /// The distinct element `E = [I_n; 0]`.
    pub fn distinct(big_n: usize, n: usize) -> Self {
        assert!(n <= big_n);
        Self {
            y: Matrix::eye(big_n, n),
        }
    }

    /// Ambient dimension `N`.
    pub fn ambient_dim(&self) -> usize {
        self.y.rows()
    }

    /// Subspace dimension `n`.
    pub fn dim(&self) -> usize {
        self.y.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.y
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.y
    }

    /// `max |YᵀY - I|`.
    pub fn drift(&self) -> T {
        self.y.orthonormality_defect()
    }

    /// Re-orthonormalizes through a QR of `Y`, keeping column orientation.
    ///
    /// Never called implicitly by [`geodesic_step`].
    pub fn repair(&self) -> Result<Self> {
        let (q, r) = householder_qr(&self.y)?;
        let mut out = q.columns(0, self.dim());
        for c in 0..self.dim() {
            if r[(c, c)] < T::zero() {
                out.col_mut(c).iter_mut().for_each(|x| *x = -*x);
            }
        }
        Ok(Self { y: out })
    }
}

/// A tangent vector `Δ` attached to a base point.
///
/// Tangency means `YᵀΔ` is skew: `YᵀΔ + ΔᵀY = 0`.
#[derive(Clone, Debug)]
pub struct TangentVector<'a, T> {
    base: &'a StiefelPoint<T>,
    delta: Matrix<T>,
}

impl<'a, T: Real> TangentVector<'a, T> {
    pub fn new(base: &'a StiefelPoint<T>, delta: Matrix<T>) -> Result<Self> {
        if delta.shape() != base.matrix().shape() {
            return Err(shape_err(
                "TangentVector",
                format!("{:?}", base.matrix().shape()),
                format!("{:?}", delta.shape()),
            ));
        }
        let residual = tangency_defect(base, &delta);
        let tol = T::tangent_tol() * (T::one() + delta.max_abs());
        if residual > tol {
            return Err(Error::NotTangent {
                residual: residual.as_f64(),
                tol: tol.as_f64(),
            });
        }
        Ok(Self { base, delta })
    }

    /// Projects an arbitrary `N × n` matrix onto the tangent space:
    /// `Δ = V - Y sym(YᵀV)`.
    pub fn project(base: &'a StiefelPoint<T>, v: &Matrix<T>) -> Result<Self> {
        let y = base.matrix();
        let ytv = y.matmul_tn(v);
        let sym = &ytv - &skew_part(&ytv);
        let delta = v - &y.matmul(&sym);
        Self::new(base, delta)
    }

    pub fn zero(base: &'a StiefelPoint<T>) -> Self {
        let (r, c) = base.matrix().shape();
        Self {
            base,
            delta: Matrix::zeros(r, c),
        }
    }

    pub fn base(&self) -> &'a StiefelPoint<T> {
        self.base
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.delta
    }

    pub fn into_matrix(self) -> Matrix<T> {
        self.delta
    }
}

/// `max |YᵀΔ + ΔᵀY|`.
pub fn tangency_defect<T: Real>(y: &StiefelPoint<T>, delta: &Matrix<T>) -> T {
    skew_defect(&y.matrix().matmul_tn(delta))
}

/// An element of `g_hor`, stored as its two free blocks.
///
/// Represents `[[A, -Bᵀ], [B, 0]]` (an `N × N` skew matrix) without forming
/// it. The optimizer's flat coordinate layout is `A` column-major followed by
/// `B` column-major, `n·n + (N-n)·n = N·n` numbers in total.
#[derive(Clone, Debug, PartialEq)]
pub struct HorizontalElement<T> {
    a: Matrix<T>,
    b: Matrix<T>,
}

impl<T: Real> HorizontalElement<T> {
    /// Checks that `a` is `n × n` skew and `b` is `(N-n) × n`.
    pub fn new(a: Matrix<T>, b: Matrix<T>) -> Result<Self> {
        let n = a.cols();
        if !a.is_square() || b.cols() != n {
            return Err(shape_err(
                "HorizontalElement",
                "A n×n and B (N-n)×n",
                format!("A {:?}, B {:?}", a.shape(), b.shape()),
            ));
        }
        let tol = T::tangent_tol() * (T::one() + a.max_abs());
        let defect = skew_defect(&a);
        if defect > tol {
            return Err(Error::NotTangent {
                residual: defect.as_f64(),
                tol: tol.as_f64(),
            });
        }
        Ok(Self { a, b })
    }

    pub fn zero(big_n: usize, n: usize) -> Self {
        Self {
            a: Matrix::zeros(n, n),
            b: Matrix::zeros(big_n - n, n),
        }
    }

    /// Reads the flat layout. With `reskew`, the `A` block is replaced by
    /// its skew part, which makes any coordinate vector a valid element.
    /// Without it the block is taken verbatim.
    pub fn from_flat(coords: &[T], big_n: usize, n: usize, reskew: bool) -> Result<Self> {
        if coords.len() != big_n * n || n > big_n {
            return Err(shape_err(
                "HorizontalElement::from_flat",
                format!("{} coordinates", big_n * n),
                format!("{} coordinates", coords.len()),
            ));
        }
        let a = Matrix::from_col_major(n, n, coords[..n * n].to_vec())?;
        let b = Matrix::from_col_major(big_n - n, n, coords[n * n..].to_vec())?;
        let a = if reskew { skew_part(&a) } else { a };
        Ok(Self { a, b })
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.a.as_slice().len() + self.b.as_slice().len());
        out.extend_from_slice(self.a.as_slice());
        out.extend_from_slice(self.b.as_slice());
        out
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn ambient_dim(&self) -> usize {
        self.a.rows() + self.b.rows()
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn scale(&self, s: T) -> Self {
        Self {
            a: self.a.scale(s),
            b: self.b.scale(s),
        }
    }

    /// The full `N × N` matrix `[[A, -Bᵀ], [B, 0]]`.
    pub fn to_dense(&self) -> Matrix<T> {
        let n = self.dim();
        let big_n = self.ambient_dim();
        let mut m = Matrix::zeros(big_n, big_n);
        m.set_block(0, 0, &self.a);
        m.set_block(n, 0, &self.b);
        m.set_block(0, n, &(-&self.b.transpose()));
        m
    }
}

/// An orthogonal `N × N` matrix `λ(Y)` with `λ(Y) E = Y`.
#[derive(Clone, Debug, PartialEq)]
pub struct SectionMatrix<T> {
    lambda: Matrix<T>,
    n: usize,
}

impl<T: Real> SectionMatrix<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.lambda
    }

    /// The completion columns `n..N`.
    pub fn complement(&self) -> Matrix<T> {
        self.lambda.columns(self.n, self.lambda.cols() - self.n)
    }

    pub fn dim(&self) -> usize {
        self.n
    }
}

fn gaussian<T: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

/// Samples a point on `St(n, N)` as the first `n` columns of the `Q` factor
/// of an `N × n` standard Gaussian matrix.
pub fn rand_stiefel<T: Real, R: Rng + ?Sized>(
    big_n: usize,
    n: usize,
    rng: &mut R,
) -> Result<StiefelPoint<T>> {
    if n > big_n {
        return Err(shape_err("rand_stiefel", "n <= N", format!("n={n}, N={big_n}")));
    }
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let sample = gaussian::<T, R>(big_n, n, rng);
        match householder_qr(&sample) {
            Ok((q, _)) => {
                return Ok(StiefelPoint {
                    y: q.columns(0, n),
                })
            }
            Err(e @ Error::RankDeficient { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

/// Riemannian gradient for the canonical metric: `∇L - Y (∇L)ᵀ Y`.
pub fn rgrad<'a, T: Real>(
    y: &'a StiefelPoint<T>,
    euclid_grad: &Matrix<T>,
) -> Result<TangentVector<'a, T>> {
    let ym = y.matrix();
    if euclid_grad.shape() != ym.shape() {
        return Err(shape_err(
            "rgrad",
            format!("{:?}", ym.shape()),
            format!("{:?}", euclid_grad.shape()),
        ));
    }
    // Y (∇L)ᵀ Y = Y (Yᵀ ∇L)ᵀ
    let ytg = ym.matmul_tn(euclid_grad);
    let correction = ym.matmul(&ytg.transpose());
    Ok(TangentVector {
        base: y,
        delta: euclid_grad - &correction,
    })
}

fn same_base<T: Real>(a: &StiefelPoint<T>, b: &StiefelPoint<T>) -> bool {
    std::ptr::eq(a, b) || a == b
}

/// Canonical metric `Tr(V1ᵀ (I - ½YYᵀ) V2)`.
pub fn metric<T: Real>(
    y: &StiefelPoint<T>,
    v1: &TangentVector<'_, T>,
    v2: &TangentVector<'_, T>,
) -> Result<T> {
    if !same_base(y, v1.base) || !same_base(y, v2.base) {
        return Err(Error::BasePointMismatch);
    }
    let ym = y.matrix();
    // (I - ½YYᵀ) V2 = V2 - ½ Y (Yᵀ V2)
    let mut pv2 = v2.matrix().clone();
    pv2.axpy(-T::lit(0.5), &ym.matmul(&ym.matmul_tn(v2.matrix())));
    Ok(v1.matrix().dot(&pv2))
}

/// The skew matrix `Ω(Δ) = (I - ½YYᵀ)ΔYᵀ - YΔᵀ(I - ½YYᵀ)` with `Ω(Δ)Y = Δ`.
pub fn omega<T: Real>(y: &StiefelPoint<T>, delta: &TangentVector<'_, T>) -> Result<Matrix<T>> {
    if !same_base(y, delta.base) {
        return Err(Error::BasePointMismatch);
    }
    let ym = y.matrix();
    let d = delta.matrix();
    let mut pd = d.clone();
    pd.axpy(-T::lit(0.5), &ym.matmul(&ym.matmul_tn(d)));
    let m = pd.matmul_nt(ym);
    // second term is the transpose of the first since I - ½YYᵀ is symmetric
    Ok(&m - &m.transpose())
}

/// Computes a section `λ(Y) = [Y, Q_⊥]`, where `Q_⊥` spans the complement
/// of `Y`: the trailing `N - n` columns of `Q` in the QR of `[Y, A]` for a
/// Gaussian `A`, which equals the QR of `A - YYᵀA` up to column signs.
pub fn section<T: Real, R: Rng + ?Sized>(
    y: &StiefelPoint<T>,
    rng: &mut R,
) -> Result<SectionMatrix<T>> {
    let ym = y.matrix();
    let (big_n, n) = ym.shape();
    if big_n == n {
        return Ok(SectionMatrix {
            lambda: ym.clone(),
            n,
        });
    }
    let mut last = None;
    for _ in 0..MAX_REDRAWS {
        let sample = gaussian::<T, R>(big_n, big_n - n, rng);
        match householder_qr(&Matrix::hstack(&[ym, &sample])) {
            Ok((q, _)) => {
                let lambda = Matrix::hstack(&[ym, &q.columns(n, big_n - n)]);
                return Ok(SectionMatrix { lambda, n });
            }
            Err(e @ Error::RankDeficient { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one draw"))
}

/// Maps `Δ ∈ T_Y` to the global tangent space: `𝓑 = λᵀ Ω(Δ) λ`, returned
/// as its `(A, B)` blocks together with the section used.
pub fn lift<T: Real, R: Rng + ?Sized>(
    y: &StiefelPoint<T>,
    delta: &TangentVector<'_, T>,
    rng: &mut R,
) -> Result<(SectionMatrix<T>, HorizontalElement<T>)> {
    let lambda = section(y, rng)?;
    let w = lift_with_section(y, &lambda, delta)?;
    Ok((lambda, w))
}

/// [`lift`] with a caller-provided section.
pub fn lift_with_section<T: Real>(
    y: &StiefelPoint<T>,
    lambda: &SectionMatrix<T>,
    delta: &TangentVector<'_, T>,
) -> Result<HorizontalElement<T>> {
    let (big_n, n) = y.matrix().shape();
    if lambda.matrix().shape() != (big_n, big_n) || lambda.dim() != n {
        return Err(shape_err(
            "lift",
            format!("section {big_n}x{big_n}"),
            format!("{:?}", lambda.matrix().shape()),
        ));
    }
    let om = omega(y, delta)?;
    let l = lambda.matrix();
    let conj = l.matmul_tn(&om.matmul(l));
    let a = skew_part(&conj.block(0, 0, n, n));
    let b = conj.block(n, 0, big_n - n, n);
    Ok(HorizontalElement { a, b })
}

/// `𝔄(S) = Σ_{k≥1} S^{k-1} / k!`, so that `exp(S) = I + S 𝔄(S)`.
///
/// Terms are accumulated while the newest term's largest entry exceeds
/// machine epsilon.
pub fn exp_series<T: Real>(s: &Matrix<T>) -> Result<Matrix<T>> {
    assert!(s.is_square(), "exp_series needs a square matrix");
    s.ensure_finite("exp_series")?;
    let k = s.rows();
    let mut output = Matrix::identity(k);
    let mut product = Matrix::identity(k);
    let mut t = 1usize;
    while product.max_abs() > T::epsilon() {
        t += 1;
        if t > SERIES_TERM_CAP {
            return Err(Error::NonConvergence { terms: SERIES_TERM_CAP });
        }
        product = product.matmul(s);
        product.scale_in_place(T::one() / T::lit(t as f64));
        output.axpy(T::one(), &product);
    }
    output.ensure_finite("exp_series")?;
    Ok(output)
}

/// Exact geodesic step `λ exp(𝓑) E` for `𝓑 = [[A, -Bᵀ], [B, 0]]`:
///
/// ```text
/// Y' = Y + λ [[½A, I], [B, 0]] 𝔄([[½A, I], [¼A² - BᵀB, ½A]]) [I; ½A]
/// ```
///
/// `W` carries the already signed and scaled velocity. The result is not
/// re-orthonormalized; audit it with [`StiefelPoint::drift`].
pub fn geodesic_step<T: Real>(
    y: &StiefelPoint<T>,
    lambda: &SectionMatrix<T>,
    w: &HorizontalElement<T>,
) -> Result<StiefelPoint<T>> {
    let ym = y.matrix();
    let (big_n, n) = ym.shape();
    if w.dim() != n || w.ambient_dim() != big_n {
        return Err(shape_err(
            "geodesic_step",
            format!("blocks for N={big_n}, n={n}"),
            format!("N={}, n={}", w.ambient_dim(), w.dim()),
        ));
    }
    if lambda.matrix().shape() != (big_n, big_n) || lambda.dim() != n {
        return Err(shape_err(
            "geodesic_step",
            format!("section {big_n}x{big_n}"),
            format!("{:?}", lambda.matrix().shape()),
        ));
    }

    let half = T::lit(0.5);
    let half_a = w.a().scale(half);
    let b = w.b();

    // λ [[½A, I], [B, 0]] = [Y ½A + λ⊥ B, Y]
    let mut left = ym.matmul(&half_a);
    if big_n > n {
        left.axpy(T::one(), &lambda.complement().matmul(b));
    }
    let left = Matrix::hstack(&[&left, ym]);

    let mut lower_left = half_a.matmul(&half_a);
    lower_left.axpy(-T::one(), &b.matmul_tn(b));
    let mut middle = Matrix::zeros(2 * n, 2 * n);
    middle.set_block(0, 0, &half_a);
    middle.set_block(0, n, &Matrix::identity(n));
    middle.set_block(n, 0, &lower_left);
    middle.set_block(n, n, &half_a);

    let series = exp_series(&middle)?;
    let right = Matrix::vstack(&[&Matrix::identity(n), &half_a]);
    let update = left.matmul(&series.matmul(&right));

    let mut next = ym.clone();
    next.axpy(T::one(), &update);
    next.ensure_finite("geodesic_step")?;
    Ok(StiefelPoint { y: next })
}
