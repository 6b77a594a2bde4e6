//! Distances between GMM-HMMs: MAW, IAW and a Monte-Carlo KL baseline.

use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::hmm::{forward_log_likelihood, marginal_gmm, sample_hmm, GmmHmm};
use crate::mixture::{aggregate, check_p, registration_from_cost, registration_iaw, w2_cost_matrix, RegistrationMatrix};
use crate::ot::{solve_exact_transport, SinkhornParams};
use crate::seed;

pub const DEFAULT_ALPHA: f64 = 0.5;
pub const DEFAULT_P: f64 = 1.0;
pub const DEFAULT_KL_LEN: usize = 1000;
pub const DEFAULT_IAW_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Maw,
    Iaw,
    KlMc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Maw => "maw",
            Method::Iaw => "iaw",
            Method::KlMc => "kl-mc",
        }
    }

    /// Whether the distance is a deterministic function of the two models.
    pub fn is_deterministic(self) -> bool {
        matches!(self, Method::Maw)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "maw" => Ok(Method::Maw),
            "iaw" => Ok(Method::Iaw),
            "kl" | "kl-mc" => Ok(Method::KlMc),
            other => Err(Error::invalid(format!("unknown method '{other}' (expected maw, iaw or kl)"))),
        }
    }
}

fn seconds<S: Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Result of one distance evaluation.
///
/// For MAW and IAW, `value == (1 − alpha)·marginal_term + alpha·transition_term`
/// exactly. For the KL baseline the two terms are the directed estimates
/// `D(h1‖h2)` and `D(h2‖h1)`; `p` is not used and reported as 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub method: Method,
    pub value: f64,
    pub marginal_term: f64,
    pub transition_term: f64,
    pub alpha: f64,
    pub p: f64,
    pub seed: Option<u64>,
    pub sample_count: Option<usize>,
    pub registration_residual: f64,
    #[serde(rename = "wall_time_seconds", serialize_with = "seconds")]
    pub wall_time: Duration,
}

/// `(1 − α)·marginal + α·transition`, evaluated in a fixed order.
pub fn combine(alpha: f64, marginal: f64, transition: f64) -> f64 {
    (1.0 - alpha) * marginal + alpha * transition
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn check_pair(h1: &GmmHmm, h2: &GmmHmm) -> Result<()> {
    if h1.dim() != h2.dim() {
        return Err(Error::DimensionMismatch { expected: h1.dim(), found: h2.dim() });
    }
    Ok(())
}

/// Which model's state space a transition matrix is mapped into.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Map `T2` into the first model's states: `W_r T2 W_cᵀ`.
    TowardFirst,
    /// Map `T1` into the second model's states: `W_cᵀ T1 W_r`.
    TowardSecond,
}

/// Row- and column-normalized registration, with zero rows (columns)
/// replaced by uniform ones.
fn normalized(w: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (m1, m2) = (w.nrows(), w.ncols());
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid("registration has negative or non-finite entries"));
    }
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("registration matrix is all zero"));
    }
    let mut wr = w.clone();
    for i in 0..m1 {
        let s = w.row(i).sum();
        if s > 0.0 {
            wr.row_mut(i).iter_mut().for_each(|x| *x /= s);
        } else {
            wr.row_mut(i).fill(1.0 / m2 as f64);
        }
    }
    let mut wc = w.clone();
    for j in 0..m2 {
        let s = w.column(j).sum();
        if s > 0.0 {
            wc.column_mut(j).iter_mut().for_each(|x| *x /= s);
        } else {
            wc.column_mut(j).fill(1.0 / m1 as f64);
        }
    }
    Ok((wr, wc))
}

/// Maps a transition matrix into the other model's state space through `w`.
pub fn register_transition(t: &DMatrix<f64>, w: &RegistrationMatrix, direction: Direction) -> Result<DMatrix<f64>> {
    let (m1, m2) = w.weights.shape();
    let expected = match direction {
        Direction::TowardFirst => m2,
        Direction::TowardSecond => m1,
    };
    if t.nrows() != expected || t.ncols() != expected {
        return Err(Error::DimensionMismatch { expected, found: t.nrows() });
    }
    let (wr, wc) = normalized(&w.weights)?;
    Ok(match direction {
        Direction::TowardFirst => &wr * t * wc.transpose(),
        Direction::TowardSecond => wc.transpose() * t * &wr,
    })
}

/// `Σᵢ πᵢ · OT_cost(T(i,:), T̃(i,:))` with `cost` the model's own `W2^p` matrix.
fn directed_transition_term(pi: &[f64], t: &DMatrix<f64>, registered: &DMatrix<f64>, cost: &DMatrix<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (i, &w) in pi.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let a: Vec<f64> = t.row(i).iter().copied().collect();
        let b: Vec<f64> = registered.row(i).iter().copied().collect();
        total += w * solve_exact_transport(cost, &a, &b)?.objective;
    }
    Ok(total)
}

fn transition_term(
    h1: &GmmHmm,
    h2: &GmmHmm,
    w: &RegistrationMatrix,
    p: f64,
    self1: &DMatrix<f64>,
    self2: &DMatrix<f64>,
) -> Result<f64> {
    let t2_reg = register_transition(h2.transition(), w, Direction::TowardFirst)?;
    let t1_reg = register_transition(h1.transition(), w, Direction::TowardSecond)?;
    let d1 = directed_transition_term(h1.stationary(), h1.transition(), &t2_reg, self1)?;
    let d2 = directed_transition_term(h2.stationary(), h2.transition(), &t1_reg, self2)?;
    Ok((d1 + d2).max(0.0).powf(1.0 / p))
}

/// Transition discrepancy `D_p(T1, T2 : W)`.
pub fn transition_discrepancy(h1: &GmmHmm, h2: &GmmHmm, w: &RegistrationMatrix, p: f64) -> Result<f64> {
    check_p(p)?;
    check_pair(h1, h2)?;
    if w.weights.shape() != (h1.states(), h2.states()) {
        return Err(Error::DimensionMismatch { expected: h1.states(), found: w.weights.nrows() });
    }
    let self1 = w2_cost_matrix(h1.components(), h1.components(), p)?;
    let self2 = w2_cost_matrix(h2.components(), h2.components(), p)?;
    transition_term(h1, h2, w, p, &self1, &self2)
}

fn report_from_registration(
    method: Method,
    h1: &GmmHmm,
    h2: &GmmHmm,
    w: &RegistrationMatrix,
    cross: &DMatrix<f64>,
    p: f64,
    alpha: f64,
) -> Result<DistanceReport> {
    let self1 = w2_cost_matrix(h1.components(), h1.components(), p)?;
    let self2 = w2_cost_matrix(h2.components(), h2.components(), p)?;
    let marginal_term = aggregate(cross, &w.weights, p);
    let transition_term = transition_term(h1, h2, w, p, &self1, &self2)?;
    Ok(DistanceReport {
        method,
        value: combine(alpha, marginal_term, transition_term),
        marginal_term,
        transition_term,
        alpha,
        p,
        seed: None,
        sample_count: None,
        registration_residual: w.marginal_residual,
        wall_time: Duration::ZERO,
    })
}

/// Minimized Aggregated Wasserstein distance. Deterministic, and bitwise
/// symmetric in its arguments.
pub fn maw(h1: &GmmHmm, h2: &GmmHmm, p: f64, alpha: f64) -> Result<DistanceReport> {
    let start = Instant::now();
    check_p(p)?;
    check_alpha(alpha)?;
    check_pair(h1, h2)?;
    let (h1, h2) = if crate::eval::model_key(h2) < crate::eval::model_key(h1) { (h2, h1) } else { (h1, h2) };
    let cross = w2_cost_matrix(h1.components(), h2.components(), p)?;
    let w = registration_from_cost(&cross, h1.stationary(), h2.stationary())?;
    let mut report = report_from_registration(Method::Maw, h1, h2, &w, &cross, p, alpha)?;
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Improved Aggregated Wasserstein distance: as [`maw`] but with the state
/// registration estimated from `n` samples of each marginal mixture.
pub fn iaw(
    h1: &GmmHmm,
    h2: &GmmHmm,
    p: f64,
    alpha: f64,
    n: usize,
    seed: u64,
    params: &SinkhornParams,
) -> Result<DistanceReport> {
    let start = Instant::now();
    check_p(p)?;
    check_alpha(alpha)?;
    check_pair(h1, h2)?;
    let w = registration_iaw(&marginal_gmm(h1), &marginal_gmm(h2), n, p, seed, params)?;
    let cross = w2_cost_matrix(h1.components(), h2.components(), p)?;
    let mut report = report_from_registration(Method::Iaw, h1, h2, &w, &cross, p, alpha)?;
    report.seed = Some(seed);
    report.sample_count = Some(n);
    report.wall_time = start.elapsed();
    Ok(report)
}

/// Per-observation log-likelihood ratio on one sequence drawn from `h1`:
/// `(log P(O|h1) − log P(O|h2)) / len`. A single draw may be negative.
pub fn directed_kl_mc(h1: &GmmHmm, h2: &GmmHmm, len: usize, seed: u64) -> Result<f64> {
    check_pair(h1, h2)?;
    if len == 0 {
        return Err(Error::invalid("KL sequence length must be positive"));
    }
    let o = sample_hmm(h1, len, seed);
    Ok((forward_log_likelihood(h1, &o)? - forward_log_likelihood(h2, &o)?) / len as f64)
}

/// Monte-Carlo KL divergence rate between two models.
///
/// The forward direction samples with sub-seed `derive(seed, [0])`; when
/// symmetrizing, the reverse direction uses `derive(seed, [1])` and the
/// value is the average of both.
pub fn kl_hmm_mc(h1: &GmmHmm, h2: &GmmHmm, len: usize, seed: u64, symmetrize: bool) -> Result<DistanceReport> {
    let start = Instant::now();
    let forward = directed_kl_mc(h1, h2, len, seed::derive(seed, &[0]))?;
    let (backward, alpha) = if symmetrize {
        (directed_kl_mc(h2, h1, len, seed::derive(seed, &[1]))?, 0.5)
    } else {
        (0.0, 0.0)
    };
    Ok(DistanceReport {
        method: Method::KlMc,
        value: combine(alpha, forward, backward),
        marginal_term: forward,
        transition_term: backward,
        alpha,
        p: 1.0,
        seed: Some(seed),
        sample_count: Some(len),
        registration_residual: 0.0,
        wall_time: start.elapsed(),
    })
}
