//! Small dense linear algebra and normal-distribution primitives.
//!
//! Everything here targets fixed small dimensions (d in 2..10, occasionally a
//! d x T matrix with T in the thousands). Storage is row-major `Vec`.

use std::ops::{Index, IndexMut};

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::scalar::{dot, Scalar};

/// Absolute pivot tolerance for [`cholesky`].
pub const PIVOT_TOL: f64 = 1e-12;
/// Iteration cap for [`operator_norm`].
pub const POWER_ITER_CAP: usize = 500;
/// Convergence threshold on successive Rayleigh quotients (relative).
pub const POWER_ITER_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite: pivot {index} = {value:e}")]
    NotPositiveDefinite { index: usize, value: f64 },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("argument out of domain: {0}")]
    Domain(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::DimensionMismatch("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.concat())
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(cols: &[Vec<S>], rows: usize) -> Result<Self> {
        let mut m = Self::zeros(rows, cols.len());
        for (j, col) in cols.iter().enumerate() {
            if col.len() != rows {
                return Err(LinalgError::DimensionMismatch(format!("column {j} has length {}", col.len())));
            }
            for (i, &v) in col.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Ok(m)
    }

    pub fn diag(values: &[S]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] = out.data[i * other.cols + j] + a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `self^T v`
    pub fn tmatvec(&self, v: &[S]) -> Result<Vec<S>> {
        if v.len() != self.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "transpose of {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![S::zero(); self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + a * vi;
            }
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    fn zip_with(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, s: S) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    /// In-place `self -= a b^T`.
    pub fn sub_outer(&mut self, a: &[S], b: &[S]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for (i, &ai) in a.iter().enumerate() {
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r = *r - ai * bj;
            }
        }
    }

    /// In-place `self += s * a a^T` for square matrices.
    pub fn add_scaled_outer(&mut self, s: S, a: &[S]) {
        assert!(self.is_square() && a.len() == self.rows);
        for (i, &ai) in a.iter().enumerate() {
            let sai = s * ai;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &aj) in row.iter_mut().zip(a) {
                *r = *r + sai * aj;
            }
        }
    }

    pub fn frobenius(&self) -> S {
        let plain = self.data.iter().map(|&a| a * a).sum::<S>();
        if plain >= S::min_positive_value() && plain.is_finite() {
            return plain.sqrt();
        }
        // Squares under- or overflowed; rescale by the largest entry.
        let scale = self.max_abs();
        if scale == S::zero() || !scale.is_finite() {
            return scale;
        }
        scale * self.data.iter().map(|&a| (a / scale) * (a / scale)).sum::<S>().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &a| m.max(a.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<S> {
        Ok(self.sub(other)?.max_abs())
    }

    /// Quadratic form `v^T self v`.
    pub fn quad_form(&self, v: &[S]) -> Result<S> {
        Ok(dot(v, &self.matvec(v)?))
    }
}

impl<S> Index<(usize, usize)> for Matrix<S> {
    type Output = S;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S> IndexMut<(usize, usize)> for Matrix<S> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// A square matrix whose symmetry holds exactly: the constructor averages the
/// two triangles after checking they agree to tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricPD<S> {
    m: Matrix<S>,
}

impl<S: Scalar> SymmetricPD<S> {
    pub fn new(m: Matrix<S>) -> Result<Self> {
        if !m.is_square() {
            return Err(LinalgError::DimensionMismatch(format!("{}x{} is not square", m.rows, m.cols)));
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let n = m.rows;
        let scale = m.max_abs().max(S::one());
        let mut asym = S::zero();
        for i in 0..n {
            for j in 0..i {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > S::lit(1e-9) * scale {
            return Err(LinalgError::NotSymmetric(asym.f64()));
        }
        Ok(Self::symmetrized(m))
    }

    /// Averages the triangles without checking.
    pub fn symmetrized(mut m: Matrix<S>) -> Self {
        let n = m.rows;
        let half = S::lit(0.5);
        for i in 0..n {
            for j in 0..i {
                let v = (m[(i, j)] + m[(j, i)]) * half;
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { m }
    }

    pub fn identity(n: usize) -> Self {
        Self { m: Matrix::identity(n) }
    }

    pub fn dim(&self) -> usize {
        self.m.rows
    }

    pub fn matrix(&self) -> &Matrix<S> {
        &self.m
    }

    pub fn into_matrix(self) -> Matrix<S> {
        self.m
    }
}

/// Lower-triangular Cholesky factor `L` with `L L^T = s`.
pub fn cholesky<S: Scalar>(s: &SymmetricPD<S>) -> Result<Matrix<S>> {
    let a = s.matrix();
    let n = a.rows();
    let tol = S::lit(PIVOT_TOL);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag = diag - l[(j, k)] * l[(j, k)];
        }
        if !(diag > tol) {
            return Err(LinalgError::NotPositiveDefinite { index: j, value: diag.f64() });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v = v - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Solves `s x = b` for symmetric positive definite `s`.
pub fn solve_spd<S: Scalar>(s: &SymmetricPD<S>, b: &[S]) -> Result<Vec<S>> {
    let l = cholesky(s)?;
    cholesky_solve(&l, b)
}

pub fn cholesky_solve<S: Scalar>(l: &Matrix<S>, b: &[S]) -> Result<Vec<S>> {
    let n = l.rows();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch(format!("rhs length {} vs {n}", b.len())));
    }
    let mut y = vec![S::zero(); n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v = v - l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    let mut x = vec![S::zero(); n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v = v - l[(k, i)] * x[k];
        }
        x[i] = v / l[(i, i)];
    }
    Ok(x)
}

pub fn inverse_spd<S: Scalar>(s: &SymmetricPD<S>) -> Result<SymmetricPD<S>> {
    let n = s.dim();
    let l = cholesky(s)?;
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![S::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = S::zero());
        e[j] = S::one();
        let col = cholesky_solve(&l, &e)?;
        for (i, v) in col.into_iter().enumerate() {
            inv[(i, j)] = v;
        }
    }
    Ok(SymmetricPD::symmetrized(inv))
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the second element.
pub fn sym_eigen<S: Scalar>(s: &SymmetricPD<S>) -> (Vec<S>, Matrix<S>) {
    let n = s.dim();
    let mut a = s.matrix().clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off = off + a[(i, j)] * a[(i, j)];
            }
        }
        if off <= S::epsilon() * S::epsilon() * a.frobenius().powi(2) || off == S::zero() {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == S::zero() {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (S::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + S::one()).sqrt());
                let c = S::one() / (t * t + S::one()).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].partial_cmp(&a[(j, j)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vecs = Matrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, new_j)] = v[(i, old_j)];
        }
    }
    (values, vecs)
}

/// Rebuilds `V f(Λ) V^T` from an eigen-decomposition.
pub fn spectral_map<S: Scalar>(values: &[S], vectors: &Matrix<S>, f: impl Fn(S) -> S) -> SymmetricPD<S> {
    let n = values.len();
    let mut out = Matrix::zeros(n, n);
    for (k, &lam) in values.iter().enumerate() {
        let fl = f(lam);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = out[(i, j)] + fl * vectors[(i, k)] * vectors[(j, k)];
            }
        }
    }
    SymmetricPD::symmetrized(out)
}

pub fn min_eigenvalue<S: Scalar>(s: &SymmetricPD<S>) -> S {
    let (vals, _) = sym_eigen(s);
    vals.first().copied().unwrap_or(S::zero())
}

/// Largest singular value, by power iteration on the smaller Gram matrix.
///
/// The first run starts at `(1,..,1)/sqrt(n)`. For small Gram matrices the
/// iteration is repeated from each standard basis vector so a start vector
/// orthogonal to the top singular direction cannot hide it.
pub fn operator_norm<S: Scalar>(m: &Matrix<S>) -> S {
    if m.rows() == 0 || m.cols() == 0 {
        return S::zero();
    }
    let gram = if m.rows() < m.cols() {
        m.matmul(&m.transpose()).expect("conforming")
    } else {
        m.transpose().matmul(m).expect("conforming")
    };
    let n = gram.rows();
    let ones = vec![S::one() / S::from_usize_lossy(n).sqrt(); n];
    let mut best = power_iterate(&gram, ones);
    if n <= 16 {
        for k in 0..n {
            let mut e = vec![S::zero(); n];
            e[k] = S::one();
            best = best.max(power_iterate(&gram, e));
        }
    }
    best.max(S::zero()).sqrt()
}

fn power_iterate<S: Scalar>(gram: &Matrix<S>, mut v: Vec<S>) -> S {
    let tol = S::lit(POWER_ITER_TOL);
    let mut rq = S::zero();
    for _ in 0..POWER_ITER_CAP {
        let w = gram.matvec(&v).expect("square");
        let new_rq = dot(&v, &w);
        let norm = dot(&w, &w).sqrt();
        if norm == S::zero() {
            return S::zero();
        }
        v = w.into_iter().map(|x| x / norm).collect();
        let done = (new_rq - rq).abs() <= tol * new_rq.abs();
        rq = new_rq;
        if done {
            break;
        }
    }
    // Rayleigh quotient at the final normalized iterate.
    let w = gram.matvec(&v).expect("square");
    dot(&v, &w).max(rq)
}

/// Standard normal CDF.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Inverse of the standard normal CDF.
///
/// Acklam's rational approximation (relative error below 1.15e-9) refined by
/// one Newton step on the CDF.
pub fn std_normal_quantile<S: Scalar>(prob: S) -> Result<S> {
    let p = prob.f64();
    if !(p > 0.0 && p < 1.0) {
        return Err(LinalgError::Domain(format!("normal quantile needs prob in (0,1), got {p}")));
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] =
        [7.784_695_709_041_462e-3, 3.224_671_290_700_398e-1, 2.445_134_137_142_996, 3.754_408_661_907_416];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Newton on Phi(x) - p; in the upper tail work with the complement to
    // avoid cancellation.
    let x = if p > 0.5 {
        let resid = 0.5 * libm::erfc(x / std::f64::consts::SQRT_2) - (1.0 - p);
        x + resid / std_normal_pdf(x)
    } else {
        let resid = std_normal_cdf(x) - p;
        x - resid / std_normal_pdf(x)
    };
    Ok(S::lit(x))
}

/// Precomputed factor for drawing from `N(mean, cov)`.
///
/// Positive definite covariances use the Cholesky factor. Covariances that are
/// only positive semi-definite (for instance the zero matrix) fall back to an
/// eigen-decomposition with eigenvalues clipped at zero, and `clipped` is set.
#[derive(Debug, Clone)]
pub struct MvnSampler<S> {
    mean: Vec<S>,
    factor: Matrix<S>,
    pub clipped: bool,
}

impl<S: Scalar> MvnSampler<S> {
    pub fn new(mean: Vec<S>, cov: &SymmetricPD<S>) -> Result<Self> {
        if mean.len() != cov.dim() {
            return Err(LinalgError::DimensionMismatch(format!(
                "mean length {} vs covariance dim {}",
                mean.len(),
                cov.dim()
            )));
        }
        match cholesky(cov) {
            Ok(factor) => Ok(Self { mean, factor, clipped: false }),
            Err(LinalgError::NotPositiveDefinite { index, value }) => {
                let (vals, vecs) = sym_eigen(cov);
                let scale = vals.iter().fold(S::one(), |m, v| m.max(v.abs()));
                if vals.iter().any(|&v| v < -S::lit(1e-10) * scale) {
                    return Err(LinalgError::NotPositiveDefinite { index, value });
                }
                let n = vals.len();
                let mut factor = Matrix::zeros(n, n);
                for (k, &lam) in vals.iter().enumerate() {
                    let s = lam.max(S::zero()).sqrt();
                    for i in 0..n {
                        factor[(i, k)] = vecs[(i, k)] * s;
                    }
                }
                Ok(Self { mean, factor, clipped: true })
            }
            Err(e) => Err(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factor(&self) -> &Matrix<S> {
        &self.factor
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<S> {
        let z: Vec<S> = (0..self.dim())
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                S::lit(v)
            })
            .collect();
        let lz = self.factor.matvec(&z).expect("square factor");
        self.mean.iter().zip(lz).map(|(&m, v)| m + v).collect()
    }
}

/// One draw from `N(mean, cov)`.
pub fn mvn_sample<S: Scalar, R: Rng + ?Sized>(mean: &[S], cov: &SymmetricPD<S>, rng: &mut R) -> Result<Vec<S>> {
    Ok(MvnSampler::new(mean.to_vec(), cov)?.sample(rng))
}
