//! Multivariate Gaussians: closed-form 2-Wasserstein and KL, symmetric matrix
//! functions, sampling and densities.

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

/// Relative tolerance of the symmetry check.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Eigenvalues above `-PSD_CLAMP_TOL * λmax` are clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-8;
/// A covariance with `λmin <= SINGULAR_TOL * λmax` is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Checks symmetry within `SYMMETRY_TOL · (1 + max|S|)` and returns the
/// symmetrized eigendecomposition.
pub fn symmetric_eigen(s: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch { expected: s.nrows(), found: s.ncols() });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("matrix has non-finite entries"));
    }
    let asymmetry = max_asymmetry(s);
    let scale = s.amax();
    if asymmetry > SYMMETRY_TOL * (1.0 + scale) {
        return Err(Error::NotSymmetric { asymmetry });
    }
    let sym = (s + s.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym))
}

fn max_asymmetry(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst
}

/// Clamps eigenvalues within the PSD tolerance; errors on anything more negative.
fn clamp_psd(eigenvalues: &DVector<f64>) -> Result<DVector<f64>> {
    let largest = eigenvalues.max().max(0.0);
    let mut out = eigenvalues.clone();
    for v in out.iter_mut() {
        if *v < 0.0 {
            if *v < -PSD_CLAMP_TOL * largest {
                return Err(Error::NotPsd { eigenvalue: *v, largest });
            }
            *v = 0.0;
        }
    }
    Ok(out)
}

/// `V diag(f(λ)) Vᵀ`.
fn spectral_apply(
    vectors: &DMatrix<f64>,
    values: &DVector<f64>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let fj = f(lambda);
        scaled.column_mut(j).scale_mut(fj);
    }
    let out = scaled * vectors.transpose();
    (&out + out.transpose()) * 0.5
}

/// Principal square root of a symmetric positive semidefinite matrix.
pub fn sqrtm_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(s)?;
    let values = clamp_psd(&eig.eigenvalues)?;
    Ok(spectral_apply(&eig.eigenvectors, &values, f64::sqrt))
}

/// Matrix exponential of a symmetric matrix.
pub fn sym_expm(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = symmetric_eigen(s)?;
    Ok(spectral_apply(&eig.eigenvectors, &eig.eigenvalues, f64::exp))
}

/// A Gaussian distribution `N(mean, cov)` with a full covariance matrix.
///
/// Construction validates symmetry and positive semidefiniteness and caches
/// the spectral factors used by distances, sampling and densities.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    sqrt_cov: DMatrix<f64>,
    // Rows of `whitener` map x - mean to standard coordinates of the
    // (possibly ridge-regularized) covariance used for densities.
    whitener: DMatrix<f64>,
    log_norm: f64,
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let d = mean.len();
        if d == 0 {
            return Err(Error::invalid("Gaussian dimension must be at least 1"));
        }
        if cov.nrows() != d || cov.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, found: cov.nrows() });
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("mean has non-finite entries"));
        }
        let eig = symmetric_eigen(&cov)?;
        let raw = eig.eigenvalues.clone();
        let values = clamp_psd(&raw)?;
        let cov = if values != raw {
            spectral_apply(&eig.eigenvectors, &values, |v| v)
        } else {
            (&cov + cov.transpose()) * 0.5
        };
        let sqrt_cov = spectral_apply(&eig.eigenvectors, &values, f64::sqrt);

        let largest = values.max();
        let smallest = values.min();
        let ridge = if largest <= 0.0 || smallest <= SINGULAR_TOL * largest {
            1e-9 * cov.trace() / d as f64 + 1e-12
        } else {
            0.0
        };
        let mut whitener = eig.eigenvectors.transpose();
        let mut log_det = 0.0;
        for (k, &lambda) in values.iter().enumerate() {
            let l = lambda + ridge;
            log_det += l.ln();
            whitener.row_mut(k).scale_mut(1.0 / l.sqrt());
        }
        let log_norm = -0.5 * (d as f64 * (2.0 * PI).ln() + log_det);

        Ok(Self { mean, cov, eigenvalues: values, sqrt_cov, whitener, log_norm })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov_row_major.len() != d * d {
            return Err(Error::DimensionMismatch { expected: d * d, found: cov_row_major.len() });
        }
        Self::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov_row_major))
    }

    /// `N(mean, σ² I)`.
    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(DVector::from_column_slice(mean), DMatrix::identity(d, d) * variance)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Symmetric PSD square root of the covariance.
    pub fn sqrt_cov(&self) -> &DMatrix<f64> {
        &self.sqrt_cov
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// True when the covariance is numerically singular.
    pub fn is_singular(&self) -> bool {
        let largest = self.eigenvalues.max();
        largest <= 0.0 || self.eigenvalues.min() <= SINGULAR_TOL * largest
    }

    /// Log density at `x`. Singular covariances are regularized by a small ridge.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim());
        let d = self.dim();
        let mut quad = 0.0;
        for k in 0..d {
            let mut z = 0.0;
            for (c, xc) in x.iter().enumerate() {
                z += self.whitener[(k, c)] * (xc - self.mean[c]);
            }
            quad += z * z;
        }
        self.log_norm - 0.5 * quad
    }

    /// Writes one draw into `out` using the symmetric square-root factor.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, z: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        for zi in z.iter_mut().take(d) {
            *zi = rng.sample(StandardNormal);
        }
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let mut v = self.mean[r];
            for (c, zc) in z.iter().enumerate().take(d) {
                v += self.sqrt_cov[(r, c)] * zc;
            }
            *o = v;
        }
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let a = self.mean.iter().chain(self.cov.iter());
        let b = other.mean.iter().chain(other.cov.iter());
        for (x, y) in a.zip(b) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        Ordering::Equal
    }
}

fn check_dims(a: &Gaussian, b: &Gaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), found: b.dim() });
    }
    Ok(())
}

/// Closed-form 2-Wasserstein distance between two Gaussians:
/// `sqrt(|μ1 − μ2|² + tr(Σ1 + Σ2 − 2 (Σ1^½ Σ2 Σ1^½)^½))`.
///
/// Singular covariances are accepted. The computation is ordered
/// canonically so the result is bitwise symmetric in its arguments.
pub fn w2_gaussian(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    check_dims(a, b)?;
    let (a, b) = match a.canonical_cmp(b) {
        Ordering::Equal => return Ok(0.0),
        Ordering::Less => (a, b),
        Ordering::Greater => (b, a),
    };
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let cross = &a.sqrt_cov * &b.cov * &a.sqrt_cov;
    let cross = (&cross + cross.transpose()) * 0.5;
    let root_trace: f64 = SymmetricEigen::new(cross)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt())
        .sum();
    let trace_term = (a.cov.trace() + b.cov.trace() - 2.0 * root_trace).max(0.0);
    Ok((mean_term + trace_term).sqrt())
}

/// `KL(a ‖ b)` between Gaussians. Errors when `b` is singular; returns
/// `+∞` when only `a` is singular.
pub fn kl_gaussian(a: &Gaussian, b: &Gaussian) -> Result<f64> {
    check_dims(a, b)?;
    if b.is_singular() {
        return Err(Error::Singular { smallest: b.eigenvalues.min(), largest: b.eigenvalues.max() });
    }
    if a == b {
        return Ok(0.0);
    }
    if a.is_singular() {
        return Ok(f64::INFINITY);
    }
    let d = a.dim() as f64;
    let eig = SymmetricEigen::new(b.cov.clone());
    let inv = spectral_apply(&eig.eigenvectors, &eig.eigenvalues, |l| 1.0 / l);
    let diff = &b.mean - &a.mean;
    let trace = (&inv * &a.cov).trace();
    let maha = diff.dot(&(&inv * &diff));
    let log_det_b: f64 = eig.eigenvalues.iter().map(|l| l.ln()).sum();
    let log_det_a: f64 = a.eigenvalues.iter().map(|l| l.ln()).sum();
    Ok((0.5 * (trace + maha - d + log_det_b - log_det_a)).max(0.0))
}

/// Draws `n` points (rows of the result) from `g`.
pub fn sample_gaussian(g: &Gaussian, n: usize, seed: u64) -> DMatrix<f64> {
    let d = g.dim();
    let mut rng = seed::rng(seed);
    let mut out = DMatrix::zeros(n, d);
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    for i in 0..n {
        g.sample_into(&mut rng, &mut z, &mut x);
        for c in 0..d {
            out[(i, c)] = x[c];
        }
    }
    out
}

/// Maximum-likelihood Gaussian (biased covariance) of the rows of `points`.
pub fn fit_mle(points: &DMatrix<f64>) -> Result<Gaussian> {
    let n = points.nrows();
    if n == 0 {
        return Err(Error::invalid("cannot fit a Gaussian to zero points"));
    }
    let mean = points.row_mean().transpose();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / n as f64;
    Gaussian::new(mean, cov)
}
