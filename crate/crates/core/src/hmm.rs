//! Hidden Markov models with one Gaussian emission per state.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::mixture::GaussianMixture;
use crate::seed;

/// Row-sum tolerance for transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-9;
/// Maximum allowed `‖πT − π‖∞` for a stationary distribution.
pub const STATIONARY_TOL: f64 = 1e-8;
/// A second eigenvalue modulus at or above `1 − SPECTRAL_GAP_TOL` means the
/// stationary distribution is not unique.
pub const SPECTRAL_GAP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GmmHmm {
    transition: DMatrix<f64>,
    components: Vec<Gaussian>,
    stationary: Vec<f64>,
}

fn check_transition(t: &DMatrix<f64>) -> Result<()> {
    let m = t.nrows();
    if m == 0 {
        return Err(Error::InvalidModel("transition matrix is empty".into()));
    }
    if t.ncols() != m {
        return Err(Error::DimensionMismatch { expected: m, found: t.ncols() });
    }
    for i in 0..m {
        let row = t.row(i);
        if row.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidModel(format!("transition row {i} has negative or non-finite entries")));
        }
        let s = row.sum();
        if (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidModel(format!("transition row {i} sums to {s}, expected 1")));
        }
    }
    Ok(())
}

/// The unique `π` with `πT = π` and `Σπ = 1`.
///
/// Solved as a least-squares problem on `[(Tᵀ − I); 1ᵀ] π = [0; 1]`. Chains
/// whose second eigenvalue has modulus within `1e-8` of one (reducible or
/// periodic) are rejected.
pub fn stationary_distribution(t: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_transition(t)?;
    let m = t.nrows();
    if m == 1 {
        return Ok(vec![1.0]);
    }
    let mut moduli: Vec<f64> = t.complex_eigenvalues().iter().map(|z| z.norm()).collect();
    moduli.sort_by(|a, b| b.total_cmp(a));
    if moduli[1] >= 1.0 - SPECTRAL_GAP_TOL {
        return Err(Error::NonUniqueStationary(format!(
            "second eigenvalue modulus {} (chain is reducible or periodic)",
            moduli[1]
        )));
    }

    let mut a = DMatrix::zeros(m + 1, m);
    a.view_mut((0, 0), (m, m)).copy_from(&(t.transpose() - DMatrix::identity(m, m)));
    a.row_mut(m).fill(1.0);
    let mut b = DVector::zeros(m + 1);
    b[m] = 1.0;
    let pi = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(format!("stationary solve failed: {e}")))?;
    let mut pi: Vec<f64> = pi.iter().map(|x| x.max(0.0)).collect();
    let s: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= s);

    let resid = (0..m)
        .map(|j| ((0..m).map(|i| pi[i] * t[(i, j)]).sum::<f64>() - pi[j]).abs())
        .fold(0.0, f64::max);
    if resid > STATIONARY_TOL {
        return Err(Error::Numerical(format!("stationary residual {resid} exceeds {STATIONARY_TOL}")));
    }
    Ok(pi)
}

/// Stationary distribution computed in an order fixed by the states'
/// parameters, so that relabelling a model permutes `π` exactly instead of
/// perturbing it by rounding.
fn canonical_stationary(t: &DMatrix<f64>, components: &[Gaussian]) -> Result<Vec<f64>> {
    let m = t.nrows();
    let key = |k: usize| {
        let c = &components[k];
        c.mean().iter().chain(c.cov().iter()).chain(t.row(k).iter()).copied().collect::<Vec<f64>>()
    };
    let keys: Vec<Vec<f64>> = (0..m).map(key).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        keys[a].iter().zip(&keys[b]).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let canonical = DMatrix::from_fn(m, m, |a, b| t[(order[a], order[b])]);
    let pi_c = stationary_distribution(&canonical)?;
    let mut pi = vec![0.0; m];
    for (a, &k) in order.iter().enumerate() {
        pi[k] = pi_c[a];
    }
    Ok(pi)
}

impl GmmHmm {
    pub fn new(transition: DMatrix<f64>, components: Vec<Gaussian>) -> Result<Self> {
        check_transition(&transition)?;
        if components.len() != transition.nrows() {
            return Err(Error::DimensionMismatch { expected: transition.nrows(), found: components.len() });
        }
        let d = components[0].dim();
        if let Some(c) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: c.dim() });
        }
        let stationary = canonical_stationary(&transition, &components)?;
        Ok(Self { transition, components, stationary })
    }

    pub fn states(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn stationary(&self) -> &[f64] {
        &self.stationary
    }

    /// Relabels states so that new state `k` is old state `perm[k]`.
    pub fn permute_states(&self, perm: &[usize]) -> Result<Self> {
        let m = self.states();
        let mut seen = vec![false; m];
        if perm.len() != m || perm.iter().any(|&k| k >= m || std::mem::replace(&mut seen[k], true)) {
            return Err(Error::invalid("state permutation is not a permutation of 0..M"));
        }
        let transition = DMatrix::from_fn(m, m, |a, b| self.transition[(perm[a], perm[b])]);
        let components = perm.iter().map(|&k| self.components[k].clone()).collect();
        Self::new(transition, components)
    }
}

/// The marginal observation mixture, weighted by the stationary distribution.
pub fn marginal_gmm(h: &GmmHmm) -> GaussianMixture {
    GaussianMixture::new(h.components.clone(), h.stationary.clone()).expect("stationary distribution is a simplex")
}

/// The next-observation mixture given current state `i`.
pub fn conditional_gmm(h: &GmmHmm, i: usize) -> Result<GaussianMixture> {
    if i >= h.states() {
        return Err(Error::invalid(format!("state index {i} out of range for {} states", h.states())));
    }
    let row: Vec<f64> = h.transition.row(i).iter().copied().collect();
    GaussianMixture::new(h.components.clone(), row)
}

/// An observation sequence stored row-major, one row per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    dim: usize,
    data: Vec<f64>,
    states: Option<Vec<usize>>,
}

impl Sequence {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::invalid(format!(
                "sequence data of length {} does not form rows of dimension {dim}",
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("non-finite observation at row {}", k / dim)));
        }
        Ok(Self { dim, data, states: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::invalid(format!("row {r} has {} columns, expected {dim}", rows[r].len())));
        }
        Self::new(dim, rows.concat())
    }

    pub fn from_matrix(obs: &DMatrix<f64>) -> Result<Self> {
        Self::new(obs.ncols(), obs.transpose().as_slice().to_vec())
    }

    pub fn with_states(mut self, states: Vec<usize>) -> Result<Self> {
        if states.len() != self.len() {
            return Err(Error::DimensionMismatch { expected: self.len(), found: states.len() });
        }
        self.states = Some(states);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn states(&self) -> Option<&[usize]> {
        self.states.as_deref()
    }

    /// `T × d` observation matrix.
    pub fn observations(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim, &self.data)
    }
}

/// Samples a sequence of `len` observations starting from the stationary distribution.
pub fn sample_hmm(h: &GmmHmm, len: usize, seed: u64) -> Sequence {
    assert!(len >= 1, "sequence length must be positive");
    let (m, d) = (h.states(), h.dim());
    let mut rng = seed::rng(seed);
    let initial = WeightedIndex::new(&h.stationary).expect("stationary weights are valid");
    let rows: Vec<WeightedIndex<f64>> = (0..m)
        .map(|i| WeightedIndex::new(h.transition.row(i).iter().copied()).expect("transition rows are valid"))
        .collect();
    let mut data = vec![0.0; len * d];
    let mut states = Vec::with_capacity(len);
    let mut z = vec![0.0; d];
    let mut s = initial.sample(&mut rng);
    for t in 0..len {
        if t > 0 {
            s = rows[s].sample(&mut rng);
        }
        h.components[s].sample_into(&mut rng, &mut z, &mut data[t * d..(t + 1) * d]);
        states.push(s);
    }
    Sequence { dim: d, data, states: Some(states) }
}

fn log_emissions(components: &[Gaussian], s: &Sequence) -> DMatrix<f64> {
    DMatrix::from_fn(s.len(), components.len(), |t, j| components[j].log_pdf(s.row(t)))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let top = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return top;
    }
    top + values.map(|v| (v - top).exp()).sum::<f64>().ln()
}

/// `log P(O | h)` with the chain started from its stationary distribution.
pub fn forward_log_likelihood(h: &GmmHmm, s: &Sequence) -> Result<f64> {
    if s.dim() != h.dim() {
        return Err(Error::DimensionMismatch { expected: h.dim(), found: s.dim() });
    }
    let m = h.states();
    let logb = log_emissions(&h.components, s);
    let log_t = h.transition.map(f64::ln);
    let mut alpha: Vec<f64> = (0..m).map(|j| h.stationary[j].ln() + logb[(0, j)]).collect();
    let mut next = vec![0.0; m];
    for t in 1..s.len() {
        for (j, n) in next.iter_mut().enumerate() {
            *n = log_sum_exp((0..m).map(|i| alpha[i] + log_t[(i, j)])) + logb[(t, j)];
        }
        std::mem::swap(&mut alpha, &mut next);
    }
    Ok(log_sum_exp(alpha.iter().copied()))
}

/// Baum-Welch stopping rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaumWelchParams {
    pub max_iter: usize,
    /// Stop when the per-observation log-likelihood gain drops below this.
    pub tol: f64,
}

impl Default for BaumWelchParams {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct BaumWelchFit {
    pub model: GmmHmm,
    /// Total log-likelihood of the initial model and after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Expected transition counts below this are lifted to keep chains irreducible.
const TRANSITION_FLOOR: f64 = 1e-6;
const COLLAPSE_MASS: f64 = 1e-6;
const KMEANS_RESTARTS: usize = 10;
const KMEANS_ITERS: usize = 100;

/// `Σ + (1e-6·tr(Σ)/d + 1e-10)·I`.
fn floor_covariance(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let d = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let ridge = 1e-6 * sym.trace() / d as f64 + 1e-10;
    sym + DMatrix::identity(d, d) * ridge
}

fn weighted_moments<'a>(rows: impl Iterator<Item = (&'a [f64], f64)> + Clone, d: usize) -> (DVector<f64>, DMatrix<f64>, f64) {
    let mut mean = DVector::zeros(d);
    let mut mass = 0.0;
    for (x, w) in rows.clone() {
        mass += w;
        for c in 0..d {
            mean[c] += w * x[c];
        }
    }
    mean /= mass;
    let mut cov = DMatrix::zeros(d, d);
    let mut diff = DVector::zeros(d);
    for (x, w) in rows {
        for c in 0..d {
            diff[c] = x[c] - mean[c];
        }
        cov.syger(w, &diff, &diff, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= mass;
    (mean, cov, mass)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations; returns (centers, labels, inertia).
fn kmeans(points: &[&[f64]], k: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>, f64) {
    let n = points.len();
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    let mut nearest: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            WeightedIndex::new(&nearest).map(|w| w.sample(rng)).unwrap_or_else(|_| rng.random_range(0..n))
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].to_vec());
        let c = centers.last().unwrap();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, c));
        }
    }

    let mut labels = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| squared_distance(p, &centers[a]).total_cmp(&squared_distance(p, &centers[b])))
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        for c in 0..k {
            let members: Vec<&[f64]> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
            if members.is_empty() {
                // Re-seed an empty cluster at the point worst served by the others.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        squared_distance(points[a], &centers[labels[a]])
                            .total_cmp(&squared_distance(points[b], &centers[labels[b]]))
                    })
                    .unwrap();
                centers[c] = points[far].to_vec();
                labels[far] = c;
                continue;
            }
            for (x, v) in centers[c].iter_mut().enumerate() {
                *v = members.iter().map(|p| p[x]).sum::<f64>() / members.len() as f64;
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| squared_distance(p, &centers[l])).sum();
    (centers, labels, inertia)
}

fn initial_model(sequences: &[Sequence], m: usize, seed: u64) -> Result<GmmHmm> {
    let d = sequences[0].dim();
    let points: Vec<&[f64]> = sequences.iter().flat_map(|s| s.rows()).collect();
    let mut rng = seed::rng(seed);
    let mut best: Option<(Vec<Vec<f64>>, Vec<usize>, f64)> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = kmeans(&points, m, &mut rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (centers, labels, _) = best.expect("at least one restart");
    let (_, pooled, _) = weighted_moments(points.iter().map(|p| (*p, 1.0)), d);

    let mut components = Vec::with_capacity(m);
    for (c, center) in centers.iter().enumerate() {
        let members: Vec<&[f64]> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
        let cov = if members.len() >= 2 {
            weighted_moments(members.iter().map(|p| (*p, 1.0)), d).1
        } else {
            pooled.clone()
        };
        components.push(Gaussian::new(DVector::from_column_slice(center), floor_covariance(&cov))?);
    }

    let gamma = Gamma::new(1.0, 1.0).expect("valid Gamma parameters");
    let mut transition = DMatrix::zeros(m, m);
    for i in 0..m {
        let draws: Vec<f64> = (0..m).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        for j in 0..m {
            transition[(i, j)] = 0.5 / m as f64 + 0.5 * draws[j] / total;
        }
        let s = transition.row(i).sum();
        transition.row_mut(i).scale_mut(1.0 / s);
    }
    GmmHmm::new(transition, components)
}

struct Expectations {
    /// Per-sequence `T × M` state posteriors.
    gamma: Vec<DMatrix<f64>>,
    /// Summed first-step posteriors over sequences.
    first: Vec<f64>,
    /// Summed expected transition counts.
    xi: DMatrix<f64>,
    log_likelihood: f64,
}

fn expectations(h: &GmmHmm, sequences: &[Sequence]) -> Result<Expectations> {
    let m = h.states();
    let t_mat = h.transition();
    let mut out = Expectations {
        gamma: Vec::with_capacity(sequences.len()),
        first: vec![0.0; m],
        xi: DMatrix::zeros(m, m),
        log_likelihood: 0.0,
    };
    for s in sequences {
        let len = s.len();
        let logb = log_emissions(&h.components, s);
        let mut b = DMatrix::zeros(len, m);
        let mut shift = vec![0.0; len];
        for t in 0..len {
            let top = logb.row(t).max();
            shift[t] = top;
            for j in 0..m {
                b[(t, j)] = (logb[(t, j)] - top).exp();
            }
        }
        let mut alpha = DMatrix::zeros(len, m);
        let mut scale = vec![0.0; len];
        for t in 0..len {
            for j in 0..m {
                let prior = if t == 0 {
                    h.stationary[j]
                } else {
                    (0..m).map(|i| alpha[(t - 1, i)] * t_mat[(i, j)]).sum()
                };
                alpha[(t, j)] = prior * b[(t, j)];
            }
            let c = alpha.row(t).sum();
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Numerical(format!("forward scaling underflow at step {t}")));
            }
            scale[t] = c;
            alpha.row_mut(t).scale_mut(1.0 / c);
        }
        out.log_likelihood += scale.iter().zip(&shift).map(|(c, s)| c.ln() + s).sum::<f64>();

        let mut beta = DMatrix::from_element(len, m, 1.0);
        for t in (0..len.saturating_sub(1)).rev() {
            for i in 0..m {
                beta[(t, i)] = (0..m).map(|j| t_mat[(i, j)] * b[(t + 1, j)] * beta[(t + 1, j)]).sum::<f64>()
                    / scale[t + 1];
            }
        }
        let mut gamma = alpha.component_mul(&beta);
        for t in 0..len {
            let g = gamma.row(t).sum();
            gamma.row_mut(t).scale_mut(1.0 / g);
        }
        for t in 0..len.saturating_sub(1) {
            for i in 0..m {
                for j in 0..m {
                    out.xi[(i, j)] +=
                        alpha[(t, i)] * t_mat[(i, j)] * b[(t + 1, j)] * beta[(t + 1, j)] / scale[t + 1];
                }
            }
        }
        for j in 0..m {
            out.first[j] += gamma[(0, j)];
        }
        out.gamma.push(gamma);
    }
    Ok(out)
}

fn emission_q(g: &Gaussian, j: usize, sequences: &[Sequence], e: &Expectations) -> f64 {
    let mut q = 0.0;
    for (s, gamma) in sequences.iter().zip(&e.gamma) {
        for (t, x) in s.rows().enumerate() {
            let w = gamma[(t, j)];
            if w > 0.0 {
                q += w * g.log_pdf(x);
            }
        }
    }
    q
}

fn transition_q(t: &DMatrix<f64>, e: &Expectations) -> Option<f64> {
    let pi = stationary_distribution(t).ok()?;
    let mut q = 0.0;
    for (x, p) in e.xi.iter().zip(t.iter()) {
        if *x > 0.0 {
            q += x * p.ln();
        }
    }
    for (f, p) in e.first.iter().zip(&pi) {
        if *f > 0.0 {
            q += f * p.ln();
        }
    }
    q.is_finite().then_some(q)
}

fn maximize(h: &GmmHmm, sequences: &[Sequence], e: &Expectations, iteration: usize, warnings: &mut Vec<String>) -> Result<GmmHmm> {
    let (m, d) = (h.states(), h.dim());
    let pooled = {
        let rows = sequences.iter().flat_map(|s| s.rows().map(|x| (x, 1.0)));
        weighted_moments(rows, d).1
    };

    let mut components = Vec::with_capacity(m);
    for j in 0..m {
        let old = &h.components[j];
        let rows = sequences
            .iter()
            .zip(&e.gamma)
            .flat_map(|(s, g)| s.rows().enumerate().map(move |(t, x)| (x, g[(t, j)])));
        let mass: f64 = e.gamma.iter().map(|g| g.column(j).sum()).sum();
        let old_q = emission_q(old, j, sequences, e);
        let candidate = if mass < COLLAPSE_MASS {
            warnings.push(format!(
                "iteration {iteration}: state {j} collapsed (responsibility {mass:.3e}); covariance reset"
            ));
            Gaussian::new(old.mean().clone(), floor_covariance(&pooled))?
        } else {
            let (mean, cov, _) = weighted_moments(rows, d);
            let full = Gaussian::new(mean.clone(), floor_covariance(&cov))?;
            if emission_q(&full, j, sequences, e) >= old_q {
                full
            } else {
                Gaussian::new(mean, old.cov().clone())?
            }
        };
        // Never accept a step that lowers this component's share of Q.
        components.push(if emission_q(&candidate, j, sequences, e) >= old_q { candidate } else { old.clone() });
    }

    let mut target = e.xi.clone();
    for i in 0..m {
        let s: f64 = target.row(i).iter().map(|x| x + TRANSITION_FLOOR).sum();
        for j in 0..m {
            target[(i, j)] = (target[(i, j)] + TRANSITION_FLOOR) / s;
        }
    }
    let old_t = h.transition();
    let old_q = transition_q(old_t, e).unwrap_or(f64::NEG_INFINITY);
    let mut transition = old_t.clone();
    let mut step = 1.0;
    for _ in 0..30 {
        let trial = old_t * (1.0 - step) + &target * step;
        if transition_q(&trial, e).is_some_and(|q| q >= old_q) {
            transition = trial;
            break;
        }
        step *= 0.5;
    }
    GmmHmm::new(transition, components)
}

/// Maximum-likelihood fit of an `m`-state model to `sequences` by EM.
///
/// The initial state distribution is tied to the stationary distribution of
/// the current transition estimate. Each M-step keeps a parameter block at
/// its previous value if the closed-form update (after the covariance floor)
/// would lower the expected complete log-likelihood, so the observed
/// log-likelihood never decreases.
pub fn baum_welch(sequences: &[Sequence], m: usize, seed: u64, params: &BaumWelchParams) -> Result<BaumWelchFit> {
    if sequences.is_empty() {
        return Err(Error::invalid("no sequences to fit"));
    }
    if m == 0 {
        return Err(Error::invalid("state count must be positive"));
    }
    let d = sequences[0].dim();
    if let Some(s) = sequences.iter().find(|s| s.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: s.dim() });
    }
    let total: usize = sequences.iter().map(Sequence::len).sum();
    if m > total {
        return Err(Error::invalid(format!("{m} states requested for {total} observations")));
    }

    let mut model = initial_model(sequences, m, seed)?;
    let mut e = expectations(&model, sequences)?;
    let mut trace = vec![e.log_likelihood];
    let mut warnings = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        let next = maximize(&model, sequences, &e, iterations, &mut warnings)?;
        let next_e = expectations(&next, sequences)?;
        if next_e.log_likelihood < e.log_likelihood {
            // Only rounding can lower the likelihood here; keep the previous model.
            converged = true;
            break;
        }
        let gain = (next_e.log_likelihood - e.log_likelihood) / total as f64;
        model = next;
        e = next_e;
        trace.push(e.log_likelihood);
        if gain < params.tol {
            converged = true;
            break;
        }
    }
    Ok(BaumWelchFit { model, log_likelihood: trace, iterations, converged, warnings })
}
