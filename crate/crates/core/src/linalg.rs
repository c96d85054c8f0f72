//! Dense matrices, Householder QR and a reference matrix exponential.
//!
//! [`Matrix`] stores its entries in **column-major** order: entry `(r, c)`
//! lives at `data[c * rows + r]`. Every routine in this crate relies on
//! that layout, and the flat optimizer coordinates of a Euclidean weight are
//! exactly this buffer.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    /// `[I_n; 0]`, the first `n` columns of the `rows × rows` identity.
    pub fn eye(rows: usize, n: usize) -> Self {
        let mut m = Self::zeros(rows, n);
        for i in 0..n.min(rows) {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for c in 0..cols {
            for r in 0..rows {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Wraps a column-major buffer.
    pub fn from_col_major(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "from_col_major",
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices; convenient for literals in tests.
    ///
    /// Panics if the rows are ragged.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Self::from_fn(r, c, |i, j| T::lit(rows[i][j]))
    }

    pub fn column_vector(v: &[T]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn col(&self, c: usize) -> &[T] {
        &self.data[c * self.rows..(c + 1) * self.rows]
    }

    #[inline]
    pub fn col_mut(&mut self, c: usize) -> &mut [T] {
        let rows = self.rows;
        &mut self.data[c * rows..(c + 1) * rows]
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn scale_in_place(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: T, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn hadamard(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "hadamard shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).collect(),
        }
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> T {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `Tr(selfᵀ other)`, the Frobenius inner product.
    pub fn dot(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "dot shape mismatch");
        self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Copies the block with top-left corner `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        assert!(r0 + rows <= self.rows && c0 + cols <= self.cols, "block out of range");
        Self::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Self) {
        assert!(
            r0 + block.rows <= self.rows && c0 + block.cols <= self.cols,
            "block out of range"
        );
        for c in 0..block.cols {
            let dst = &mut self.col_mut(c0 + c)[r0..r0 + block.rows];
            dst.copy_from_slice(block.col(c));
        }
    }

    /// Columns `c0..c0 + cols`.
    pub fn columns(&self, c0: usize, cols: usize) -> Self {
        assert!(c0 + cols <= self.cols, "column range out of bounds");
        Self {
            rows: self.rows,
            cols,
            data: self.data[c0 * self.rows..(c0 + cols) * self.rows].to_vec(),
        }
    }

    pub fn hstack(parts: &[&Self]) -> Self {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows), "hstack row mismatch");
        let mut data = Vec::with_capacity(rows * parts.iter().map(|p| p.cols).sum::<usize>());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        let cols = data.len() / rows.max(1);
        Self { rows, cols, data }
    }

    pub fn vstack(parts: &[&Self]) -> Self {
        let cols = parts.first().map_or(0, |p| p.cols);
        assert!(parts.iter().all(|p| p.cols == cols), "vstack column mismatch");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut out = Self::zeros(rows, cols);
        let mut r0 = 0;
        for p in parts {
            out.set_block(r0, 0, p);
            r0 += p.rows;
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "matmul inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for j in 0..other.cols {
            let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
            for (k, &b) in other.col(j).iter().enumerate() {
                if b == T::zero() {
                    continue;
                }
                let src = &self.data[k * self.rows..(k + 1) * self.rows];
                for (d, &a) in dst.iter_mut().zip(src) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn matmul_tn(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension mismatch");
        let mut out = Self::zeros(self.cols, other.cols);
        for j in 0..other.cols {
            let b = other.col(j);
            for i in 0..self.cols {
                out.data[j * self.cols + i] = dot_slices(self.col(i), b);
            }
        }
        out
    }

    /// `self · otherᵀ` without forming the transpose.
    pub fn matmul_nt(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension mismatch");
        let mut out = Self::zeros(self.rows, other.rows);
        for k in 0..self.cols {
            let a = self.col(k);
            let b = other.col(k);
            for (j, &bj) in b.iter().enumerate() {
                if bj == T::zero() {
                    continue;
                }
                let dst = &mut out.data[j * self.rows..(j + 1) * self.rows];
                for (d, &ai) in dst.iter_mut().zip(a) {
                    *d += ai * bj;
                }
            }
        }
        out
    }

    /// `max |selfᵀ self - I|`.
    pub fn orthonormality_defect(&self) -> T {
        let gram = self.matmul_tn(self);
        let mut worst = T::zero();
        for c in 0..gram.cols {
            for r in 0..gram.rows {
                let target = if r == c { T::one() } else { T::zero() };
                worst = worst.max((gram[(r, c)] - target).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }
}

#[inline]
pub(crate) fn dot_slices<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[c * self.rows + r]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[c * self.rows + r]
    }
}

impl<T: Real> Add for &Matrix<T> {
    type Output = Matrix<T>;
    fn add(self, rhs: Self) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "add shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }
}

impl<T: Real> Sub for &Matrix<T> {
    type Output = Matrix<T>;
    fn sub(self, rhs: Self) -> Matrix<T> {
        assert_eq!(self.shape(), rhs.shape(), "sub shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }
}

impl<T: Real> Mul for &Matrix<T> {
    type Output = Matrix<T>;
    fn mul(self, rhs: Self) -> Matrix<T> {
        self.matmul(rhs)
    }
}

impl<T: Real> Neg for &Matrix<T> {
    type Output = Matrix<T>;
    fn neg(self) -> Matrix<T> {
        self.map(|x| -x)
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, " ")?;
            for c in 0..self.cols {
                write!(f, " {:?}", self[(r, c)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// Full Householder QR of an `N × M` matrix with `M ≤ N`.
///
/// Returns `Q` (`N × N`, orthogonal) and `R` (`N × M`, upper triangular).
/// Fails with [`Error::RankDeficient`] when a diagonal entry of `R` falls
/// below `N · ε · max |R_ii|`.
pub fn householder_qr<T: Real>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    let (n, m) = a.shape();
    if m > n {
        return Err(shape_err("householder_qr", "cols <= rows", format!("{n}x{m}")));
    }
    a.ensure_finite("householder_qr")?;

    let mut r = a.clone();
    // Unit reflector vectors, one per eliminated column, each of length n - k.
    let mut reflectors: Vec<Vec<T>> = Vec::with_capacity(m);
    let two = T::lit(2.0);

    for k in 0..m {
        let x = &r.col(k)[k..];
        let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        let mut v = x.to_vec();
        if norm == T::zero() {
            reflectors.push(Vec::new());
            continue;
        }
        // alpha = -sign(x0) ‖x‖ avoids cancellation in v0 = x0 - alpha.
        let alpha = if v[0] >= T::zero() { -norm } else { norm };
        v[0] -= alpha;
        let vnorm = v.iter().map(|&e| e * e).sum::<T>().sqrt();
        if vnorm == T::zero() {
            reflectors.push(Vec::new());
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);

        for j in k..m {
            let col = &mut r.col_mut(j)[k..];
            let proj = two * dot_slices(&v, col);
            for (c, &vi) in col.iter_mut().zip(&v) {
                *c -= proj * vi;
            }
        }
        for i in k + 1..n {
            r[(i, k)] = T::zero();
        }
        reflectors.push(v);
    }

    // Q = H_0 H_1 ... H_{m-1}, applied to the identity from the right end.
    let mut q = Matrix::identity(n);
    for (k, v) in reflectors.iter().enumerate().rev() {
        if v.is_empty() {
            continue;
        }
        for j in 0..n {
            let col = &mut q.col_mut(j)[k..];
            let proj = two * dot_slices(v, col);
            if proj == T::zero() {
                continue;
            }
            for (c, &vi) in col.iter_mut().zip(v) {
                *c -= proj * vi;
            }
        }
    }

    let max_diag = (0..m).fold(T::zero(), |acc, i| acc.max(r[(i, i)].abs()));
    let tol = T::lit(n as f64) * T::epsilon() * max_diag;
    for i in 0..m {
        let pivot = r[(i, i)].abs();
        if max_diag == T::zero() || pivot < tol {
            return Err(Error::RankDeficient {
                pivot: pivot.as_f64(),
                tol: tol.as_f64(),
            });
        }
    }
    Ok((q, r))
}

/// `(M - Mᵀ) / 2`.
pub fn skew_part<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    assert!(m.is_square(), "skew_part needs a square matrix");
    let half = T::lit(0.5);
    Matrix::from_fn(m.rows(), m.cols(), |r, c| (m[(r, c)] - m[(c, r)]) * half)
}

/// Largest entry of `|M + Mᵀ|`; zero for an exactly skew matrix.
pub fn skew_defect<T: Real>(m: &Matrix<T>) -> T {
    let mut worst = T::zero();
    for c in 0..m.cols() {
        for r in 0..=c.min(m.rows().saturating_sub(1)) {
            worst = worst.max((m[(r, c)] + m[(c, r)]).abs());
        }
    }
    worst
}

/// Reference matrix exponential by scaling and squaring a Taylor series.
///
/// Intended as a test oracle (dense, `O(k³ log ‖M‖)`), not for the
/// optimizer's hot path.
pub fn dense_exp<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    assert!(m.is_square(), "dense_exp needs a square matrix");
    m.ensure_finite("dense_exp")?;
    let k = m.rows();

    // max column sum
    let norm1 = (0..k)
        .map(|c| m.col(c).iter().map(|x| x.abs()).sum::<T>())
        .fold(T::zero(), T::max);
    let mut squarings = 0u32;
    let mut scale = T::one();
    let half = T::lit(0.5);
    while norm1 * scale > half {
        scale = scale * half;
        squarings += 1;
    }
    let scaled = m.scale(scale);

    let mut out = Matrix::identity(k);
    let mut term = Matrix::identity(k);
    for i in 1..=200usize {
        term = term.matmul(&scaled);
        term.scale_in_place(T::one() / T::lit(i as f64));
        out.axpy(T::one(), &term);
        if term.max_abs() <= T::epsilon() * T::lit(1e-3) {
            break;
        }
    }
    for _ in 0..squarings {
        out = out.matmul(&out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn column_major_layout() {
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(m.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn products_agree_with_explicit_transposes() {
        let a = random(5, 3, 1);
        let b = random(5, 4, 2);
        let c = random(4, 3, 3);
        assert!(a.matmul_tn(&b).max_abs_diff(&a.transpose().matmul(&b)) < 1e-15);
        assert!(a.matmul_nt(&c).max_abs_diff(&a.matmul(&c.transpose())) < 1e-15);
    }

    #[test]
    fn qr_identity() {
        let (q, r) = householder_qr(&Matrix::<f64>::identity(3)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((q[(i, j)].abs() - expect).abs() < 1e-15);
                assert!((r[(i, j)].abs() - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn qr_single_axis_column() {
        let a = Matrix::<f64>::from_rows(&[&[2.0], &[0.0]]);
        let (q, r) = householder_qr(&a).unwrap();
        assert!((r[(0, 0)].abs() - 2.0).abs() < 1e-15);
        assert!((q[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert!(q[(1, 0)].abs() < 1e-15);
    }

    #[test]
    fn qr_reconstructs_random_tall_matrix() {
        let a = random(8, 3, 7);
        let (q, r) = householder_qr(&a).unwrap();
        assert!(q.matmul(&r).max_abs_diff(&a) <= 1e-12);
        assert!(q.orthonormality_defect() <= 64.0 * f64::EPSILON * 8.0);
        for c in 0..3 {
            for row in c + 1..8 {
                assert_eq!(r[(row, c)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rejects_rank_deficient_input() {
        let a = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        assert!(matches!(householder_qr(&a), Err(Error::RankDeficient { .. })));
        assert!(matches!(
            householder_qr(&Matrix::<f64>::zeros(3, 1)),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn qr_rejects_wide_input() {
        assert!(matches!(
            householder_qr(&Matrix::<f64>::zeros(2, 3)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let e = dense_exp(&Matrix::<f64>::zeros(4, 4)).unwrap();
        assert_eq!(e, Matrix::identity(4));
    }

    #[test]
    fn exp_scalar() {
        let e = dense_exp(&Matrix::<f64>::from_rows(&[&[1.0]])).unwrap();
        assert!((e[(0, 0)] - std::f64::consts::E).abs() < 1e-14);
    }

    #[test]
    fn exp_quarter_turn() {
        let t = std::f64::consts::FRAC_PI_2;
        let m = Matrix::<f64>::from_rows(&[&[0.0, -t], &[t, 0.0]]);
        let expect = Matrix::<f64>::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]);
        assert!(dense_exp(&m).unwrap().max_abs_diff(&expect) <= 1e-12);
    }

    #[test]
    fn exp_inverse_pair() {
        let mut m = random(6, 6, 11);
        let s = 5.0 / m.frobenius();
        m.scale_in_place(s);
        let prod = dense_exp(&m).unwrap().matmul(&dense_exp(&(-&m)).unwrap());
        assert!(prod.max_abs_diff(&Matrix::identity(6)) <= 1e-10);
    }

    #[test]
    fn skew_part_cases() {
        let sym = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[2.0, 3.0]]);
        assert_eq!(skew_part(&sym), Matrix::zeros(2, 2));
        let skew = Matrix::<f64>::from_rows(&[&[0.0, 1.5], &[-1.5, 0.0]]);
        assert_eq!(skew_part(&skew), skew);
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]);
        let expect = Matrix::<f64>::from_rows(&[&[0.0, 1.0], &[-1.0, 0.0]]);
        assert_eq!(skew_part(&m), expect);
    }

    #[test]
    fn skew_part_is_idempotent() {
        let m = random(5, 5, 5);
        let once = skew_part(&m);
        let twice = skew_part(&once);
        assert!(once.max_abs_diff(&twice) <= 2.0 * f64::EPSILON);
        assert!(skew_defect(&once) == 0.0);
    }

    #[test]
    fn nonfinite_input_is_rejected() {
        let mut m = Matrix::<f64>::identity(2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(dense_exp(&m), Err(Error::NonFinite(_))));
        assert!(matches!(householder_qr(&m), Err(Error::NonFinite(_))));
    }
}
