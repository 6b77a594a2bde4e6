//! Pairwise distance matrices and retrieval evaluation.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::distance::{self, combine, DistanceReport, Method, DEFAULT_ALPHA, DEFAULT_IAW_SAMPLES, DEFAULT_KL_LEN, DEFAULT_P};
use crate::error::{Error, Result};
use crate::hmm::GmmHmm;
use crate::ot::SinkhornParams;
use crate::seed;

/// Parameters shared by all distance evaluations in a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistanceParams {
    pub p: f64,
    pub alpha: f64,
    pub iaw_samples: usize,
    #[serde(skip)]
    pub sinkhorn: SinkhornParams,
    pub kl_len: usize,
    pub kl_symmetrize: bool,
}

impl Default for DistanceParams {
    fn default() -> Self {
        Self {
            p: DEFAULT_P,
            alpha: DEFAULT_ALPHA,
            iaw_samples: DEFAULT_IAW_SAMPLES,
            sinkhorn: SinkhornParams::default(),
            kl_len: DEFAULT_KL_LEN,
            kl_symmetrize: true,
        }
    }
}

/// Evaluates `method` on one pair. `seed` is ignored by MAW.
pub fn distance(method: Method, h1: &GmmHmm, h2: &GmmHmm, params: &DistanceParams, seed: u64) -> Result<DistanceReport> {
    match method {
        Method::Maw => distance::maw(h1, h2, params.p, params.alpha),
        Method::Iaw => distance::iaw(h1, h2, params.p, params.alpha, params.iaw_samples, seed, &params.sinkhorn),
        Method::KlMc => distance::kl_hmm_mc(h1, h2, params.kl_len, seed, params.kl_symmetrize),
    }
}

/// Stable content hash of a model's parameters.
pub fn model_key(h: &GmmHmm) -> u64 {
    let comps = h.components().iter().flat_map(|c| c.mean().iter().chain(c.cov().iter()));
    seed::hash_f64s(h.transition().iter().chain(comps))
}

/// All pairwise distances between a set of models, with the two terms kept
/// separately so the matrix can be recombined at any `alpha`.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: DMatrix<f64>,
    pub marginal: DMatrix<f64>,
    pub transition: DMatrix<f64>,
    /// Seconds spent on each entry.
    pub timings: DMatrix<f64>,
    pub labels: Vec<String>,
    pub names: Vec<String>,
    pub method: Method,
    pub params: DistanceParams,
    pub base_seed: u64,
}

impl DistanceMatrix {
    /// Wraps precomputed distances, e.g. ones read from disk.
    pub fn from_values(values: DMatrix<f64>, labels: Vec<String>, names: Vec<String>, method: Method) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::DimensionMismatch { expected: n, found: values.ncols() });
        }
        if labels.len() != n || names.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: labels.len().min(names.len()) });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("distance matrix has non-finite entries"));
        }
        let params = DistanceParams::default();
        Ok(Self {
            marginal: DMatrix::from_element(n, n, f64::NAN),
            transition: DMatrix::from_element(n, n, f64::NAN),
            timings: DMatrix::zeros(n, n),
            values,
            labels,
            names,
            method,
            params,
            base_seed: seed::DEFAULT_SEED,
        })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    /// The matrix recombined at a different `alpha`.
    pub fn at_alpha(&self, alpha: f64) -> Result<DMatrix<f64>> {
        if self.method == Method::KlMc {
            return Err(Error::invalid("KL distances have no marginal/transition split to recombine"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        if self.marginal.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("distance terms are unavailable for this matrix"));
        }
        Ok(self.marginal.zip_map(&self.transition, |m, t| combine(alpha, m, t)))
    }

    /// Copy with `values` recombined at `alpha`.
    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut out = self.clone();
        out.values = self.at_alpha(alpha)?;
        out.params.alpha = alpha;
        Ok(out)
    }
}

/// Distance matrix over `models`.
///
/// Each unordered pair is evaluated once and mirrored, except for the
/// unsymmetrized KL estimate, which is evaluated per ordered pair. Sampling
/// methods seed each pair from `base_seed` and the two models' content
/// hashes, with the arguments in a canonical order, so the result does not
/// depend on the order of `models` or on evaluation order. Diagonal entries
/// are zero.
pub fn pairwise_distance_matrix(
    models: &[GmmHmm],
    labels: &[String],
    names: &[String],
    method: Method,
    params: &DistanceParams,
    base_seed: u64,
) -> Result<DistanceMatrix> {
    let n = models.len();
    if n < 2 {
        return Err(Error::invalid("need at least two models"));
    }
    if labels.len() != n || names.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: labels.len().min(names.len()) });
    }
    let d = models[0].dim();
    if let Some(h) = models.iter().find(|h| h.dim() != d) {
        return Err(Error::DimensionMismatch { expected: d, found: h.dim() });
    }
    let keys: Vec<u64> = models.iter().map(model_key).collect();
    let directed = method == Method::KlMc && !params.kl_symmetrize;
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| if directed { i != j } else { i < j })
        .collect();

    let results: Vec<Result<(usize, usize, DistanceReport)>> = pairs
        .par_iter()
        .map(|&(i, j)| {
            let (a, b) = if directed || keys[i] <= keys[j] { (i, j) } else { (j, i) };
            let pair_seed = seed::derive(base_seed, &[keys[a], keys[b]]);
            distance(method, &models[a], &models[b], params, pair_seed)
                .map(|r| (i, j, r))
                .map_err(|e| Error::Pair { i, j, source: Box::new(e) })
        })
        .collect();

    let mut values = DMatrix::zeros(n, n);
    let mut marginal = DMatrix::zeros(n, n);
    let mut transition = DMatrix::zeros(n, n);
    let mut timings = DMatrix::zeros(n, n);
    for r in results {
        let (i, j, report) = r?;
        let mut put = |a: usize, b: usize| {
            values[(a, b)] = report.value;
            marginal[(a, b)] = report.marginal_term;
            transition[(a, b)] = report.transition_term;
            timings[(a, b)] = report.wall_time.as_secs_f64();
        };
        put(i, j);
        if !directed {
            put(j, i);
        }
    }
    Ok(DistanceMatrix {
        values,
        marginal,
        transition,
        timings,
        labels: labels.to_vec(),
        names: names.to_vec(),
        method,
        params: *params,
        base_seed,
    })
}

/// Other items ranked by ascending distance from `q`, ties by index.
fn ranking(values: &DMatrix<f64>, q: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..values.nrows()).filter(|&j| j != q).collect();
    others.sort_by(|&a, &b| match values[(q, a)].total_cmp(&values[(q, b)]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    others
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryCurve {
    pub query: usize,
    /// `k / R` for `k = 1..=R`.
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub average_precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub mean_average_precision: f64,
    pub queries: Vec<QueryCurve>,
    pub warnings: Vec<String>,
}

/// Retrieval precision-recall, each item serving as a query against the rest.
///
/// Precision is measured at each relevant retrieval and averaged across
/// queries at the recall levels `k/R`. When queries have different numbers
/// of relevant items, each query's curve is read as a step function on the
/// union of their recall levels.
pub fn precision_recall(dm: &DistanceMatrix) -> Result<PrCurve> {
    let n = dm.len();
    let mut queries = Vec::new();
    let mut warnings = Vec::new();
    for q in 0..n {
        let relevant = (0..n).filter(|&j| j != q && dm.labels[j] == dm.labels[q]).count();
        if relevant == 0 {
            warnings.push(format!("query {q} ('{}') has no other member of its class; skipped", dm.names[q]));
            continue;
        }
        let mut found = 0usize;
        let mut precision = Vec::with_capacity(relevant);
        for (depth, j) in ranking(&dm.values, q).into_iter().enumerate() {
            if dm.labels[j] == dm.labels[q] {
                found += 1;
                precision.push(found as f64 / (depth + 1) as f64);
                if found == relevant {
                    break;
                }
            }
        }
        let recall = (1..=relevant).map(|k| k as f64 / relevant as f64).collect();
        let average_precision = precision.iter().sum::<f64>() / relevant as f64;
        queries.push(QueryCurve { query: q, recall, precision, average_precision });
    }
    if queries.is_empty() {
        return Err(Error::invalid("no query has a relevant item"));
    }

    let mut grid: Vec<f64> = queries.iter().flat_map(|c| c.recall.iter().copied()).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    let precision = grid
        .iter()
        .map(|&r| {
            let total: f64 = queries
                .iter()
                .map(|c| {
                    let k = c.recall.iter().position(|&x| x >= r - 1e-12).unwrap_or(c.recall.len() - 1);
                    c.precision[k]
                })
                .sum();
            total / queries.len() as f64
        })
        .collect();
    let mean_average_precision = queries.iter().map(|c| c.average_precision).sum::<f64>() / queries.len() as f64;
    Ok(PrCurve { recall: grid, precision, mean_average_precision, queries, warnings })
}

/// Leave-one-out 1-nearest-neighbour accuracy.
pub fn knn1_accuracy(dm: &DistanceMatrix) -> f64 {
    knn1_accuracy_of(&dm.values, &dm.labels)
}

fn knn1_accuracy_of(values: &DMatrix<f64>, labels: &[String]) -> f64 {
    let n = values.nrows();
    let correct = (0..n)
        .filter(|&q| {
            let nearest = ranking(values, q)[0];
            labels[nearest] == labels[q]
        })
        .count();
    correct as f64 / n as f64
}

/// `0, 0.1, …, 1.0`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSelection {
    pub alpha: f64,
    /// `(alpha, accuracy)` for every grid value, in grid order.
    pub table: Vec<(f64, f64)>,
}

/// Picks the `alpha` maximizing 1-NN accuracy by recombining the cached
/// terms of `dm`; ties go to the smallest `alpha`.
pub fn select_alpha_from(dm: &DistanceMatrix, grid: &[f64]) -> Result<AlphaSelection> {
    if grid.is_empty() {
        return Err(Error::invalid("alpha grid is empty"));
    }
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None;
    for &alpha in grid {
        let acc = knn1_accuracy_of(&dm.at_alpha(alpha)?, &dm.labels);
        table.push((alpha, acc));
        let better = match best {
            None => true,
            Some((a, b)) => acc > b || (acc == b && alpha < a),
        };
        if better {
            best = Some((alpha, acc));
        }
    }
    Ok(AlphaSelection { alpha: best.expect("grid is nonempty").0, table })
}

/// Computes the distance matrix of `models` once and selects `alpha` on it.
pub fn select_alpha(
    models: &[GmmHmm],
    labels: &[String],
    method: Method,
    grid: &[f64],
    params: &DistanceParams,
    base_seed: u64,
) -> Result<AlphaSelection> {
    let names: Vec<String> = (0..models.len()).map(|i| i.to_string()).collect();
    let dm = pairwise_distance_matrix(models, labels, &names, method, params, base_seed)?;
    select_alpha_from(&dm, grid)
}
