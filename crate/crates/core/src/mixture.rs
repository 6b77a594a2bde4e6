//! Gaussian mixtures and state registration between them.

use nalgebra::DMatrix;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::gaussian::{w2_gaussian, Gaussian};
use crate::ot::{self, SinkhornParams};
use crate::seed;

/// Tolerance on mixture weight sums.
pub const WEIGHT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    components: Vec<Gaussian>,
    weights: Vec<f64>,
}

pub(crate) fn check_simplex(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidModel(format!("{name} has negative or non-finite entries")));
    }
    let s: f64 = w.iter().sum();
    if (s - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidModel(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

pub(crate) fn check_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 2.0) {
        return Err(Error::invalid(format!("p must lie in (0, 2], got {p}")));
    }
    Ok(())
}

impl GaussianMixture {
    pub fn new(components: Vec<Gaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("mixture needs at least one component".into()));
        }
        if weights.len() != components.len() {
            return Err(Error::DimensionMismatch { expected: components.len(), found: weights.len() });
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: c.dim() });
        }
        check_simplex("mixture weights", &weights)?;
        Ok(Self { components, weights })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Writes the component posterior at `x` into `out`.
    pub fn posterior_into(&self, x: &[f64], out: &mut [f64]) {
        let mut top = f64::NEG_INFINITY;
        for ((o, c), &w) in out.iter_mut().zip(&self.components).zip(&self.weights) {
            *o = if w > 0.0 { w.ln() + c.log_pdf(x) } else { f64::NEG_INFINITY };
            top = top.max(*o);
        }
        let mut total = 0.0;
        for o in out.iter_mut() {
            *o = (*o - top).exp();
            total += *o;
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Log density of the mixture at `x`.
    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(c, &w)| w.ln() + c.log_pdf(x))
            .collect();
        let top = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln()
    }
}

/// Posterior component probabilities of `m` at `x`.
pub fn posterior(m: &GaussianMixture, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != m.dim() {
        return Err(Error::DimensionMismatch { expected: m.dim(), found: x.len() });
    }
    let mut out = vec![0.0; m.len()];
    m.posterior_into(x, &mut out);
    Ok(out)
}

/// Draws `n` points from `m`, returning the points (rows) and component labels.
pub fn sample_mixture_labeled(m: &GaussianMixture, n: usize, seed: u64) -> (DMatrix<f64>, Vec<usize>) {
    let d = m.dim();
    let mut rng = seed::rng(seed);
    let picker = WeightedIndex::new(&m.weights).expect("mixture weights are a valid simplex");
    let mut out = DMatrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let mut z = vec![0.0; d];
    let mut x = vec![0.0; d];
    for i in 0..n {
        let k = picker.sample(&mut rng);
        m.components[k].sample_into(&mut rng, &mut z, &mut x);
        for c in 0..d {
            out[(i, c)] = x[c];
        }
        labels.push(k);
    }
    (out, labels)
}

/// Draws `n` points (rows of the result) from `m`.
pub fn sample_mixture(m: &GaussianMixture, n: usize, seed: u64) -> DMatrix<f64> {
    sample_mixture_labeled(m, n, seed).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegistrationSource {
    MawExact,
    IawEmpirical,
}

/// Nonnegative coupling between the states of two mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationMatrix {
    pub weights: DMatrix<f64>,
    pub source: RegistrationSource,
    /// ∞-norm deviation of row and column sums from the mixture weights.
    pub marginal_residual: f64,
}

fn marginal_residual(w: &DMatrix<f64>, pi1: &[f64], pi2: &[f64]) -> f64 {
    let rows = pi1.iter().enumerate().map(|(i, p)| (w.row(i).sum() - p).abs());
    let cols = pi2.iter().enumerate().map(|(j, p)| (w.column(j).sum() - p).abs());
    rows.chain(cols).fold(0.0, f64::max)
}

/// Pairwise `W2(aᵢ, bⱼ)^p`.
pub fn w2_cost_matrix(a: &[Gaussian], b: &[Gaussian], p: f64) -> Result<DMatrix<f64>> {
    let mut cost = DMatrix::zeros(a.len(), b.len());
    for (i, ga) in a.iter().enumerate() {
        for (j, gb) in b.iter().enumerate() {
            cost[(i, j)] = w2_gaussian(ga, gb)?.powf(p);
        }
    }
    Ok(cost)
}

pub(crate) fn registration_from_cost(
    cost: &DMatrix<f64>,
    pi1: &[f64],
    pi2: &[f64],
) -> Result<RegistrationMatrix> {
    let plan = ot::solve_exact_transport(cost, pi1, pi2)?;
    Ok(RegistrationMatrix {
        weights: plan.weights,
        source: RegistrationSource::MawExact,
        marginal_residual: plan.marginal_residual,
    })
}

/// Minimum-cost state registration under pairwise Gaussian `W2^p` costs.
pub fn registration_maw(m1: &GaussianMixture, m2: &GaussianMixture, p: f64) -> Result<RegistrationMatrix> {
    check_p(p)?;
    let cost = w2_cost_matrix(&m1.components, &m2.components, p)?;
    registration_from_cost(&cost, &m1.weights, &m2.weights)
}

/// `(Σ wᵢⱼ costᵢⱼ)^{1/p}` for a precomputed `W2^p` cost matrix.
pub(crate) fn aggregate(cost: &DMatrix<f64>, w: &DMatrix<f64>, p: f64) -> f64 {
    let total: f64 = w.iter().zip(cost.iter()).map(|(a, b)| a * b).sum();
    total.max(0.0).powf(1.0 / p)
}

/// `(Σᵢⱼ wᵢⱼ W2(φ1ᵢ, φ2ⱼ)^p)^{1/p}`.
pub fn registered_distance(
    m1: &GaussianMixture,
    m2: &GaussianMixture,
    w: &RegistrationMatrix,
    p: f64,
) -> Result<f64> {
    check_p(p)?;
    if w.weights.nrows() != m1.len() {
        return Err(Error::DimensionMismatch { expected: m1.len(), found: w.weights.nrows() });
    }
    if w.weights.ncols() != m2.len() {
        return Err(Error::DimensionMismatch { expected: m2.len(), found: w.weights.ncols() });
    }
    let cost = w2_cost_matrix(&m1.components, &m2.components, p)?;
    Ok(aggregate(&cost, &w.weights, p))
}

/// `n × M` matrix of component posteriors for the rows of `points`.
fn posterior_matrix(m: &GaussianMixture, points: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (points.nrows(), points.ncols());
    let mut out = DMatrix::zeros(n, m.len());
    let mut x = vec![0.0; d];
    let mut post = vec![0.0; m.len()];
    for i in 0..n {
        for c in 0..d {
            x[c] = points[(i, c)];
        }
        m.posterior_into(&x, &mut post);
        for (k, v) in post.iter().enumerate() {
            out[(i, k)] = *v;
        }
    }
    out
}

/// `‖xᵢ − yⱼ‖^p` between the rows of two point sets.
pub fn sample_cost_matrix(x: &DMatrix<f64>, y: &DMatrix<f64>, p: f64) -> DMatrix<f64> {
    let (n, m, d) = (x.nrows(), y.nrows(), x.ncols());
    let xt = x.transpose();
    let yt = y.transpose();
    DMatrix::from_fn(n, m, |i, j| {
        let (a, b) = (xt.column(i), yt.column(j));
        let mut s = 0.0;
        for k in 0..d {
            let t = a[k] - b[k];
            s += t * t;
        }
        if p == 2.0 {
            s
        } else {
            s.sqrt().powf(p)
        }
    })
}

/// Monte-Carlo registration: couple `n` samples from each mixture by
/// Sinkhorn under `‖x − y‖^p` with uniform marginals, then contract the
/// coupling with both posterior matrices, `Pxᵀ Π Py`.
pub fn registration_iaw(
    m1: &GaussianMixture,
    m2: &GaussianMixture,
    n: usize,
    p: f64,
    seed: u64,
    params: &SinkhornParams,
) -> Result<RegistrationMatrix> {
    check_p(p)?;
    if n < 2 {
        return Err(Error::invalid(format!("IAW needs at least 2 samples, got {n}")));
    }
    if m1.dim() != m2.dim() {
        return Err(Error::DimensionMismatch { expected: m1.dim(), found: m2.dim() });
    }
    if m1.len() == 1 && m2.len() == 1 {
        return Ok(RegistrationMatrix {
            weights: DMatrix::from_element(1, 1, 1.0),
            source: RegistrationSource::IawEmpirical,
            marginal_residual: 0.0,
        });
    }
    let x = sample_mixture(m1, n, seed::derive(seed, &[0]));
    let y = sample_mixture(m2, n, seed::derive(seed, &[1]));
    let px = posterior_matrix(m1, &x);
    let py = posterior_matrix(m2, &y);
    let uniform = vec![1.0 / n as f64; n];
    let plan = {
        let cost = sample_cost_matrix(&x, &y, p);
        ot::sinkhorn(&cost, &uniform, &uniform, params)?
    };
    let weights = px.transpose() * (&plan.weights * py);
    let marginal_residual = marginal_residual(&weights, &m1.weights, &m2.weights);
    Ok(RegistrationMatrix { weights, source: RegistrationSource::IawEmpirical, marginal_residual })
}
