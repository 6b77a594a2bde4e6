//! Synthetic perturbation retrieval study and the Gaussian robustness toy study.

use nalgebra::{DMatrix, DVector};
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::Serialize;

use crate::distance::Method;
use crate::error::{Error, Result};
use crate::eval::{
    default_alpha_grid, pairwise_distance_matrix, precision_recall, select_alpha_from, AlphaSelection, DistanceMatrix,
    DistanceParams, PrCurve,
};
use crate::gaussian::{fit_mle, kl_gaussian, sample_gaussian, sym_expm, w2_gaussian, Gaussian};
use crate::hmm::{baum_welch, sample_hmm, BaumWelchParams, GmmHmm, Sequence};
use crate::seed;

const TAG_SIGMA_S: u64 = 1;
const TAG_DIRICHLET: u64 = 2;
const TAG_SEQUENCES: u64 = 3;
const TAG_FIT: u64 = 4;
const TAG_DISTANCE: u64 = 5;
const TAG_PILOT: u64 = 6;

/// Which parameter block differs between the generating models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Perturbation {
    Mu,
    Sigma,
    Transition,
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(Self::Mu),
            "sigma" => Ok(Self::Sigma),
            "transition" | "t" => Ok(Self::Transition),
            other => Err(Error::invalid(format!("unknown experiment '{other}' (expected mu, sigma or transition)"))),
        }
    }
}

impl std::fmt::Display for Perturbation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mu => "mu",
            Self::Sigma => "sigma",
            Self::Transition => "transition",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationConfig {
    pub experiment: Perturbation,
    pub delta: f64,
    pub num_models: usize,
    pub sequences_per_model: usize,
    pub sequence_len: usize,
    pub states: usize,
    pub seed: u64,
}

impl PerturbationConfig {
    pub fn new(experiment: Perturbation, delta: f64, seed: u64) -> Self {
        Self { experiment, delta, num_models: 5, sequences_per_model: 10, sequence_len: 100, states: 2, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::invalid(format!("delta must be positive, got {}", self.delta)));
        }
        if self.num_models == 0 || self.sequences_per_model == 0 || self.sequence_len == 0 || self.states == 0 {
            return Err(Error::invalid("experiment counts must be positive"));
        }
        Ok(())
    }
}

fn base_transition() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.8])
}

fn base_means() -> [[f64; 2]; 2] {
    [[2.0, 2.0], [5.0, 5.0]]
}

/// The generating models of one perturbation experiment.
pub fn synth_models(cfg: &PerturbationConfig) -> Result<Vec<GmmHmm>> {
    cfg.validate()?;
    let identity = DMatrix::<f64>::identity(2, 2);
    let mut out = Vec::with_capacity(cfg.num_models);
    match cfg.experiment {
        Perturbation::Mu => {
            for i in 1..=cfg.num_models {
                let shift = i as f64 * cfg.delta;
                let comps = base_means()
                    .iter()
                    .map(|m| Gaussian::new(DVector::from_fn(2, |c, _| m[c] + shift), identity.clone()))
                    .collect::<Result<Vec<_>>>()?;
                out.push(GmmHmm::new(base_transition(), comps)?);
            }
        }
        Perturbation::Sigma => {
            let mut rng = seed::rng(seed::derive(cfg.seed, &[TAG_SIGMA_S]));
            let raw = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>());
            let s = (&raw + raw.transpose()) * 0.5;
            for i in 1..=cfg.num_models {
                let cov = sym_expm(&(&s * (i as f64 * cfg.delta)))? * 0.2;
                let comps = base_means()
                    .iter()
                    .map(|m| Gaussian::new(DVector::from_column_slice(m), cov.clone()))
                    .collect::<Result<Vec<_>>>()?;
                out.push(GmmHmm::new(base_transition(), comps)?);
            }
        }
        Perturbation::Transition => {
            let s = base_transition();
            let comps = base_means()
                .iter()
                .map(|m| Gaussian::new(DVector::from_column_slice(m), identity.clone()))
                .collect::<Result<Vec<_>>>()?;
            for i in 1..=cfg.num_models {
                let mut rng = seed::rng(seed::derive(cfg.seed, &[TAG_DIRICHLET, i as u64]));
                let mut t = DMatrix::zeros(2, 2);
                for j in 0..2 {
                    let row = dirichlet(&mut rng, &s.row(j).iter().map(|x| 10.0 * x).collect::<Vec<_>>());
                    for k in 0..2 {
                        t[(j, k)] = cfg.delta * s[(j, k)] + (1.0 - cfg.delta) * row[k];
                    }
                }
                out.push(GmmHmm::new(t, comps.clone())?);
            }
        }
    }
    Ok(out)
}

/// Dirichlet draw as normalized Gamma variates.
pub fn dirichlet(rng: &mut impl Rng, concentration: &[f64]) -> Vec<f64> {
    let draws: Vec<f64> = concentration
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|x| x / total).collect()
}

/// Settings of the retrieval pipeline that are not part of the data design.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentParams {
    pub distance: DistanceParams,
    pub baum_welch: BaumWelchParams,
    /// Sequences per class in the pilot replicate used to pick `alpha`;
    /// zero keeps `distance.alpha`.
    pub pilot_per_class: usize,
    pub alpha_grid: Vec<f64>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        Self {
            distance: DistanceParams { iaw_samples: 250, ..DistanceParams::default() },
            baum_welch: BaumWelchParams::default(),
            pilot_per_class: 4,
            alpha_grid: default_alpha_grid(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    /// Selected `alpha` and its accuracy table (MAW and IAW only).
    pub alpha_selection: Option<AlphaSelection>,
    pub matrix: DistanceMatrix,
    pub pr: PrCurve,
}

/// Mean and standard deviation of distances from the first class to one class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub class: usize,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct PerturbationResult {
    pub config: PerturbationConfig,
    pub models: Vec<GmmHmm>,
    pub fitted: Vec<GmmHmm>,
    pub labels: Vec<String>,
    pub names: Vec<String>,
    pub methods: Vec<MethodResult>,
    pub summary: Vec<SummaryRow>,
    /// Items dropped because estimation failed.
    pub dropped: Vec<String>,
    pub warnings: Vec<String>,
}

impl PerturbationResult {
    pub fn map(&self, method: Method) -> Option<f64> {
        self.methods.iter().find(|m| m.method == method).map(|m| m.pr.mean_average_precision)
    }
}

struct FittedSet {
    models: Vec<GmmHmm>,
    labels: Vec<String>,
    names: Vec<String>,
    dropped: Vec<String>,
    warnings: Vec<String>,
}

fn class_label(class: usize) -> String {
    format!("class{}", class + 1)
}

fn generate_and_fit(
    generators: &[GmmHmm],
    per_class: usize,
    len: usize,
    states: usize,
    seed: u64,
    params: &BaumWelchParams,
) -> FittedSet {
    let jobs: Vec<(usize, usize)> =
        (0..generators.len()).flat_map(|c| (0..per_class).map(move |k| (c, k))).collect();
    let fits: Vec<_> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let s: Sequence = sample_hmm(&generators[c], len, seed::derive(seed, &[TAG_SEQUENCES, c as u64, k as u64]));
            let fit = baum_welch(
                std::slice::from_ref(&s),
                states,
                seed::derive(seed, &[TAG_FIT, c as u64, k as u64]),
                params,
            );
            (c, k, fit)
        })
        .collect();
    let mut out = FittedSet { models: Vec::new(), labels: Vec::new(), names: Vec::new(), dropped: Vec::new(), warnings: Vec::new() };
    for (c, k, fit) in fits {
        let name = format!("{}_seq{:02}", class_label(c), k + 1);
        match fit {
            Ok(f) => {
                out.warnings.extend(f.warnings.iter().map(|w| format!("{name}: {w}")));
                out.models.push(f.model);
                out.labels.push(class_label(c));
                out.names.push(name);
            }
            Err(e) => out.dropped.push(format!("{name}: {e}")),
        }
    }
    out
}

fn first_class_summary(dm: &DistanceMatrix, classes: usize) -> Vec<SummaryRow> {
    let first = class_label(0);
    let queries: Vec<usize> = (0..dm.len()).filter(|&i| dm.labels[i] == first).collect();
    (0..classes)
        .map(|c| {
            let label = class_label(c);
            let mut vals = Vec::new();
            for &q in &queries {
                vals.extend((0..dm.len()).filter(|&j| j != q && dm.labels[j] == label).map(|j| dm.values[(q, j)]));
            }
            let (mean, sd) = mean_sd(&vals);
            SummaryRow { method: dm.method, class: c + 1, mean, sd, count: vals.len() }
        })
        .collect()
}

/// Mean and sample standard deviation; `sd` is 0 for fewer than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Generates sequences from the perturbed models, fits a model to each,
/// and evaluates retrieval with every requested distance.
///
/// For MAW and IAW, `alpha` is chosen by 1-NN accuracy on a separately
/// seeded pilot replicate, then applied to the evaluation replicate.
pub fn run_perturbation_experiment(
    cfg: &PerturbationConfig,
    methods: &[Method],
    params: &ExperimentParams,
) -> Result<PerturbationResult> {
    let models = synth_models(cfg)?;
    let data = generate_and_fit(&models, cfg.sequences_per_model, cfg.sequence_len, cfg.states, cfg.seed, &params.baum_welch);
    if data.models.len() < 2 {
        return Err(Error::Numerical(format!("too few fitted models ({} dropped)", data.dropped.len())));
    }
    let mut warnings = data.warnings.clone();
    let mut dropped = data.dropped.clone();

    let pilot = if params.pilot_per_class > 0 && methods.iter().any(|m| *m != Method::KlMc) {
        let p = generate_and_fit(
            &models,
            params.pilot_per_class,
            cfg.sequence_len,
            cfg.states,
            seed::derive(cfg.seed, &[TAG_PILOT]),
            &params.baum_welch,
        );
        dropped.extend(p.dropped.iter().map(|d| format!("pilot {d}")));
        Some(p)
    } else {
        None
    };

    let mut results = Vec::with_capacity(methods.len());
    let mut summary = Vec::new();
    for (k, &method) in methods.iter().enumerate() {
        let base_seed = seed::derive(cfg.seed, &[TAG_DISTANCE, k as u64]);
        let mut matrix =
            pairwise_distance_matrix(&data.models, &data.labels, &data.names, method, &params.distance, base_seed)?;
        let mut alpha_selection = None;
        if method != Method::KlMc {
            if let Some(p) = pilot.as_ref().filter(|p| p.models.len() >= 2) {
                let pm = pairwise_distance_matrix(&p.models, &p.labels, &p.names, method, &params.distance, base_seed)?;
                let sel = select_alpha_from(&pm, &params.alpha_grid)?;
                matrix = matrix.with_alpha(sel.alpha)?;
                alpha_selection = Some(sel);
            }
        }
        let pr = precision_recall(&matrix)?;
        warnings.extend(pr.warnings.iter().cloned());
        summary.extend(first_class_summary(&matrix, cfg.num_models));
        results.push(MethodResult { method, alpha_selection, matrix, pr });
    }
    Ok(PerturbationResult {
        config: *cfg,
        models,
        fitted: data.models,
        labels: data.labels,
        names: data.names,
        methods: results,
        summary,
        dropped,
        warnings,
    })
}

/// Point-wise mean of several PR curves sharing a recall grid.
pub fn average_curves(curves: &[&PrCurve]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = curves.first().ok_or_else(|| Error::invalid("no curves to average"))?;
    if curves.iter().any(|c| c.recall != first.recall) {
        return Err(Error::invalid("curves have different recall grids"));
    }
    let n = curves.len() as f64;
    let precision = (0..first.recall.len()).map(|k| curves.iter().map(|c| c.precision[k]).sum::<f64>() / n).collect();
    Ok((first.recall.clone(), precision))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ToyVarying {
    Mu,
    Sigma,
}

impl std::str::FromStr for ToyVarying {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mu" => Ok(Self::Mu),
            "sigma" => Ok(Self::Sigma),
            other => Err(Error::invalid(format!("unknown toy family '{other}' (expected mu or sigma)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyRow {
    pub i: usize,
    pub mean_w2: f64,
    pub sd_w2: f64,
    pub mean_kl: f64,
    pub sd_kl: f64,
}

pub const TOY_BATCHES: usize = 100;
pub const TOY_BATCH_SIZE: usize = 50;
pub const TOY_TARGETS: usize = 10;

/// The `i`-th target Gaussian of a toy family.
pub fn toy_target(varying: ToyVarying, i: usize) -> Result<Gaussian> {
    match varying {
        ToyVarying::Mu => Gaussian::isotropic(&[0.5 * i as f64, 0.5 * i as f64], 1.0),
        ToyVarying::Sigma => Gaussian::isotropic(&[0.0, 0.0], (0.5 * i as f64).exp()),
    }
}

/// Fits `N(0, I₂)` to 100 batches of 50 draws and reports the spread of
/// `W2(φ̂, φᵢ)` and `KL(φ̂ ‖ φᵢ)` for `i = 1..=10`.
pub fn toy_gaussian_experiment(varying: ToyVarying, seed: u64) -> Result<Vec<ToyRow>> {
    let base = Gaussian::isotropic(&[0.0, 0.0], 1.0)?;
    let fits = (0..TOY_BATCHES)
        .map(|b| fit_mle(&sample_gaussian(&base, TOY_BATCH_SIZE, seed::derive(seed, &[b as u64]))))
        .collect::<Result<Vec<_>>>()?;
    (1..=TOY_TARGETS)
        .map(|i| {
            let target = toy_target(varying, i)?;
            let w2 = fits.iter().map(|f| w2_gaussian(f, &target)).collect::<Result<Vec<_>>>()?;
            let kl = fits.iter().map(|f| kl_gaussian(f, &target)).collect::<Result<Vec<_>>>()?;
            let (mean_w2, sd_w2) = mean_sd(&w2);
            let (mean_kl, sd_kl) = mean_sd(&kl);
            Ok(ToyRow { i, mean_w2, sd_w2, mean_kl, sd_kl })
        })
        .collect()
}
