//! Numerics on the manifold of symmetric positive-definite matrices.
//!
//! Every spectral function (log, exp, powers, square roots) goes through a
//! single symmetric eigendecomposition. Covariance dimensions in this crate
//! are small (tens of channels), so spectral accuracy matters more than the
//! speed a Padé or scaling-and-squaring scheme would buy.
//!
//! [`SpdMatrix`] keeps its eigendecomposition next to the dense values, which
//! makes repeated logarithms and whitening transforms of the same matrix
//! cheap. Values are immutable once constructed.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative Frobenius tolerance for accepting a matrix as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Eigenvalues below `dim * EIGEN_FLOOR_REL * lambda_max` are raised to that floor.
pub const EIGEN_FLOOR_REL: f64 = 1e-12;

/// Below this (relative to the largest eigenvalue) a matrix is rejected
/// outright instead of being floored.
const INDEFINITE_REL: f64 = 1e-6;

/// exp() of anything larger overflows an f64.
const EXP_MAX_ARG: f64 = 700.0;

/// A symmetric positive-definite matrix together with its eigendecomposition.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    values: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    floored: bool,
}

/// A symmetric (possibly indefinite) matrix, typically a matrix logarithm.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    values: DMatrix<f64>,
}

/// Settings of the Karcher-flow solver behind [`frechet_mean`].
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FrechetConfig {
    /// Stop once the mean tangent vector has Frobenius norm at most `tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Step along the mean tangent vector, in (0, 1].
    pub step: f64,
}

impl Default for FrechetConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 50,
            step: 1.0,
        }
    }
}

impl FrechetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Argument(format!("frechet tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Argument("frechet max_iter must be >= 1".into()));
        }
        if !(self.step > 0.0 && self.step <= 1.0) {
            return Err(Error::Argument(format!(
                "frechet step must lie in (0, 1], got {}",
                self.step
            )));
        }
        Ok(())
    }
}

/// Outcome of a converged Fréchet-mean solve.
#[derive(Clone, Debug)]
pub struct FrechetSolution {
    pub mean: SpdMatrix,
    pub iterations: usize,
    pub residual: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `||M - M^T||_F / ||M||_F` (zero for the zero matrix).
pub fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.transpose()).norm() / norm
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::shape(
            "non-empty square matrix",
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    Ok(())
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("matrix has non-finite entries".into()));
    }
    let asym = relative_asymmetry(m);
    if asym > SYMMETRY_TOL {
        return Err(Error::Argument(format!(
            "matrix is not symmetric (relative asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

fn compose(vectors: &DMatrix<f64>, spectrum: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (mut col, &s) in scaled.column_iter_mut().zip(spectrum.iter()) {
        col *= s;
    }
    symmetrize(&(scaled * vectors.transpose()))
}

impl SpdMatrix {
    /// Validates and wraps a dense matrix.
    ///
    /// The input must be square, finite and symmetric to within
    /// [`SYMMETRY_TOL`]. It is re-symmetrized, and eigenvalues that fall below
    /// `dim * 1e-12 * lambda_max` are raised to that floor (see
    /// [`SpdMatrix::was_floored`]). Clearly indefinite input is rejected.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        let sym = symmetrize(&m);
        let eig = SymmetricEigen::new(sym.clone());
        Self::assemble(Some(sym), eig.eigenvectors, eig.eigenvalues)
    }

    /// Builds `V diag(spectrum) V^T` without a fresh decomposition.
    pub(crate) fn from_spectrum(vectors: DMatrix<f64>, spectrum: DVector<f64>) -> Result<Self> {
        Self::assemble(None, vectors, spectrum)
    }

    fn assemble(
        dense: Option<DMatrix<f64>>,
        vectors: DMatrix<f64>,
        mut spectrum: DVector<f64>,
    ) -> Result<Self> {
        if spectrum.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain("non-finite eigenvalue".into()));
        }
        let dim = spectrum.len();
        let max = spectrum.max();
        if !(max > 0.0) {
            return Err(Error::NumericDomain(
                "matrix is not positive definite (largest eigenvalue <= 0)".into(),
            ));
        }
        let min = spectrum.min();
        if min < -INDEFINITE_REL * max {
            return Err(Error::NumericDomain(format!(
                "matrix is not positive definite (eigenvalue {min:.3e} vs max {max:.3e})"
            )));
        }
        let floor = dim as f64 * EIGEN_FLOOR_REL * max;
        let mut floored = false;
        for v in spectrum.iter_mut() {
            if *v < floor {
                *v = floor;
                floored = true;
            }
        }
        let values = match dense {
            Some(d) if !floored => d,
            _ => compose(&vectors, &spectrum),
        };
        Ok(Self {
            values,
            eigenvalues: spectrum,
            eigenvectors: vectors,
            floored,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            values: DMatrix::identity(dim, dim),
            eigenvalues: DVector::from_element(dim, 1.0),
            eigenvectors: DMatrix::identity(dim, dim),
            floored: false,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    /// Row-major constructor, mostly for tests and file readers.
    pub fn from_row_slice(dim: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::shape(dim * dim, data.len()));
        }
        Self::new(DMatrix::from_row_slice(dim, dim, data))
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// True if construction had to raise tiny eigenvalues to the floor.
    pub fn was_floored(&self) -> bool {
        self.floored
    }

    pub fn trace(&self) -> f64 {
        self.values.trace()
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.values.transpose().iter().copied().collect()
    }

    /// `V f(L) V^T` as a dense symmetric matrix.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        compose(&self.eigenvectors, &self.eigenvalues.map(f))
    }

    /// Matrix power `S^t` for real `t`.
    pub fn powf(&self, t: f64) -> SpdMatrix {
        let spectrum = self.eigenvalues.map(|l| l.powf(t));
        SpdMatrix::from_spectrum(self.eigenvectors.clone(), spectrum)
            .expect("powers of a positive spectrum stay positive")
    }

    /// Frobenius norm of `self - other`.
    pub fn frobenius_distance(&self, other: &SpdMatrix) -> f64 {
        (&self.values - &other.values).norm()
    }

    fn same_dim(&self, other: &SpdMatrix) -> Result<()> {
        if self.dim() != other.dim() {
            return Err(Error::shape(
                format!("{0}x{0}", self.dim()),
                format!("{0}x{0}", other.dim()),
            ));
        }
        Ok(())
    }
}

impl PartialEq for SpdMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.values == other.values
    }
}

impl SymMatrix {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&m)?;
        Ok(Self {
            values: symmetrize(&m),
        })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: DMatrix::zeros(dim, dim),
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self {
            values: DMatrix::from_diagonal(&DVector::from_column_slice(diag)),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.values.norm()
    }

    pub fn scaled(&self, factor: f64) -> SymMatrix {
        SymMatrix {
            values: &self.values * factor,
        }
    }

    /// `self + other`, for matrices of equal size.
    pub fn add(&self, other: &SymMatrix) -> Result<SymMatrix> {
        if self.dim() != other.dim() {
            return Err(Error::shape(self.dim(), other.dim()));
        }
        Ok(SymMatrix {
            values: &self.values + &other.values,
        })
    }
}

/// Matrix logarithm `V diag(ln l) V^T`.
///
/// Total on [`SpdMatrix`]: finiteness and positivity are enforced when the
/// input is constructed.
pub fn spd_log(s: &SpdMatrix) -> SymMatrix {
    SymMatrix {
        values: s.map_spectrum(f64::ln),
    }
}

/// Matrix exponential of a symmetric matrix.
pub fn spd_exp(m: &SymMatrix) -> Result<SpdMatrix> {
    let eig = SymmetricEigen::new(m.values.clone());
    if let Some(&big) = eig.eigenvalues.iter().find(|&&l| l > EXP_MAX_ARG) {
        return Err(Error::NumericDomain(format!(
            "matrix exponential overflows (eigenvalue {big:.3e})"
        )));
    }
    if eig.eigenvalues.iter().any(|&l| l < -EXP_MAX_ARG) {
        return Err(Error::NumericDomain(
            "matrix exponential underflows to a singular matrix".into(),
        ));
    }
    SpdMatrix::from_spectrum(eig.eigenvectors, eig.eigenvalues.map(f64::exp))
}

/// Returns `(S^{1/2}, S^{-1/2})`.
pub fn spd_sqrt_invsqrt(s: &SpdMatrix) -> (SpdMatrix, SpdMatrix) {
    (s.powf(0.5), s.powf(-0.5))
}

/// Eigenvalues of the symmetric matrix `W S W^T` where `W = A^{-1/2}`.
fn whitened_spectrum(a: &SpdMatrix, b: &SpdMatrix) -> DVector<f64> {
    let inv_sqrt = a.map_spectrum(|l| l.powf(-0.5));
    let m = symmetrize(&(&inv_sqrt * b.matrix() * &inv_sqrt));
    m.symmetric_eigenvalues()
}

/// Affine-invariant Riemannian distance `||log(A^{-1/2} B A^{-1/2})||_F`.
pub fn airm_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    a.same_dim(b)?;
    let sum_sq: f64 = whitened_spectrum(a, b)
        .iter()
        .map(|&l| {
            let l = l.max(f64::MIN_POSITIVE);
            l.ln().powi(2)
        })
        .sum();
    Ok(sum_sq.sqrt())
}

/// `W S W^T`, re-symmetrized.
///
/// Fails if `W` is numerically singular or not square of matching size.
pub fn congruence(s: &SpdMatrix, w: &DMatrix<f64>) -> Result<SpdMatrix> {
    if w.nrows() != s.dim() || w.ncols() != s.dim() {
        return Err(Error::shape(
            format!("{0}x{0}", s.dim()),
            format!("{}x{}", w.nrows(), w.ncols()),
        ));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain("transform has non-finite entries".into()));
    }
    let sv = w.clone().singular_values();
    let (max, min) = (sv.max(), sv.min());
    if !(max > 0.0) || min <= max * 1e-13 {
        return Err(Error::NumericDomain(format!(
            "congruence transform is singular (condition {:.3e})",
            if min > 0.0 { max / min } else { f64::INFINITY }
        )));
    }
    congruence_unchecked(s, w)
}

/// Congruence by a transform already known to be invertible.
pub(crate) fn congruence_unchecked(s: &SpdMatrix, w: &DMatrix<f64>) -> Result<SpdMatrix> {
    SpdMatrix::new(symmetrize(&(w * s.matrix() * w.transpose())))
}

/// Point at parameter `t` on the AIRM geodesic from `a` (t = 0) to `b` (t = 1).
pub fn geodesic(a: &SpdMatrix, b: &SpdMatrix, t: f64) -> Result<SpdMatrix> {
    a.same_dim(b)?;
    if !t.is_finite() {
        return Err(Error::Argument(format!("geodesic parameter must be finite, got {t}")));
    }
    let (sqrt, inv_sqrt) = spd_sqrt_invsqrt(a);
    let inner = congruence_unchecked(b, inv_sqrt.matrix())?.powf(t);
    congruence_unchecked(&inner, sqrt.matrix())
}

fn check_common_dim(samples: &[SpdMatrix]) -> Result<usize> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Argument("empty sample set".into()))?;
    let dim = first.dim();
    if let Some(bad) = samples.iter().find(|s| s.dim() != dim) {
        return Err(Error::shape(
            format!("{dim}x{dim}"),
            format!("{0}x{0}", bad.dim()),
        ));
    }
    Ok(dim)
}

/// `exp(mean_i log S_i)`.
pub fn log_euclidean_mean(samples: &[SpdMatrix]) -> Result<SpdMatrix> {
    let dim = check_common_dim(samples)?;
    if samples.len() == 1 {
        return Ok(samples[0].clone());
    }
    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    for s in samples {
        acc += s.map_spectrum(f64::ln);
    }
    acc /= samples.len() as f64;
    spd_exp(&SymMatrix {
        values: symmetrize(&acc),
    })
}

/// Riemannian (Karcher) mean under the affine-invariant metric.
pub fn frechet_mean(samples: &[SpdMatrix], cfg: &FrechetConfig) -> Result<SpdMatrix> {
    frechet_mean_detailed(samples, cfg).map(|sol| sol.mean)
}

/// Karcher flow started at the log-Euclidean mean.
///
/// Each iteration whitens the samples by the current estimate `M`, averages
/// their logarithms into a tangent vector `T`, and moves to
/// `M^{1/2} exp(step * T) M^{1/2}`. Converged when `||T||_F <= tol`.
pub fn frechet_mean_detailed(samples: &[SpdMatrix], cfg: &FrechetConfig) -> Result<FrechetSolution> {
    cfg.validate()?;
    let dim = check_common_dim(samples)?;
    if samples.len() == 1 {
        return Ok(FrechetSolution {
            mean: samples[0].clone(),
            iterations: 0,
            residual: 0.0,
        });
    }
    let n = samples.len() as f64;
    let mut mean = log_euclidean_mean(samples)?;
    let mut residual = f64::INFINITY;
    for iteration in 0..=cfg.max_iter {
        let (sqrt, inv_sqrt) = spd_sqrt_invsqrt(&mean);
        let mut tangent = DMatrix::<f64>::zeros(dim, dim);
        for s in samples {
            let whitened = congruence_unchecked(s, inv_sqrt.matrix())?;
            tangent += whitened.map_spectrum(f64::ln);
        }
        tangent /= n;
        residual = tangent.norm();
        if residual <= cfg.tol {
            return Ok(FrechetSolution {
                mean,
                iterations: iteration,
                residual,
            });
        }
        if iteration == cfg.max_iter {
            break;
        }
        let step = spd_exp(&SymMatrix {
            values: symmetrize(&(tangent * cfg.step)),
        })?;
        mean = congruence_unchecked(&step, sqrt.matrix())?;
    }
    Err(Error::Convergence {
        iterations: cfg.max_iter,
        residual,
        last_iterate: mean.to_row_major(),
    })
}

/// Pulls the spectrum toward its mean: `V diag((1-lambda) l + lambda mean(l)) V^T`.
///
/// The trace is preserved.
pub fn eigenvalue_shrink(s: &SpdMatrix, lambda: f64) -> Result<SpdMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Argument(format!(
            "eigenvalue shrinkage must lie in [0, 1], got {lambda}"
        )));
    }
    let mean = s.eigenvalues.mean();
    let spectrum = s.eigenvalues.map(|l| (1.0 - lambda) * l + lambda * mean);
    SpdMatrix::from_spectrum(s.eigenvectors.clone(), spectrum)
}

/// Shrinks toward the identity in the log domain: `exp((1-alpha) log S)`.
pub fn identity_shrink(s: &SpdMatrix, alpha: f64) -> Result<SpdMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Argument(format!(
            "identity shrinkage must lie in [0, 1], got {alpha}"
        )));
    }
    Ok(s.powf(1.0 - alpha))
}
