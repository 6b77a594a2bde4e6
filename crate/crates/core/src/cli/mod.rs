//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.

pub mod format;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::distance::{Method, DEFAULT_ALPHA, DEFAULT_IAW_SAMPLES, DEFAULT_KL_LEN, DEFAULT_P};
use crate::error::Error;
use crate::eval::{self, DistanceMatrix, DistanceParams};
use crate::experiments::{self, ExperimentParams, Perturbation, PerturbationConfig, ToyVarying};
use crate::hmm::{baum_welch, BaumWelchParams};
use crate::seed::DEFAULT_SEED;
use format::{fmt_f64, to_json_exact, write_file, ModelMetadata};

pub const THREADS_ENV: &str = "HMMDIST_THREADS";
const VERSION: &str = env!("CARGO_PKG_VERSION");
const DEFAULT_SEED_STR: &str = "20170612";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub(crate) fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else if matches!(e, Error::InvalidArgument(_)) {
            CliError::Usage(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hmmdist", version, about = "Distances between Gaussian-emission hidden Markov models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a GMM-HMM to one or more sequence CSV files with Baum-Welch.
    Estimate(EstimateArgs),
    /// Distance between two model files.
    Dist(DistArgs),
    /// Pairwise distance matrix over a directory of model files.
    Distmat(DistmatArgs),
    /// Retrieval precision-recall or 1-NN accuracy of a distance matrix.
    Eval(EvalArgs),
    /// Run the synthetic perturbation retrieval experiment.
    Synth(SynthArgs),
    /// Run the Gaussian W2-versus-KL robustness experiment.
    Toy(ToyArgs),
}

#[derive(Debug, Args)]
struct EstimateArgs {
    /// Sequence CSV files, one row per time step.
    #[arg(required = true)]
    input: Vec<PathBuf>,
    #[arg(long, default_value_t = 2)]
    states: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = BaumWelchParams::default().max_iter)]
    max_iter: usize,
    #[arg(long, default_value_t = BaumWelchParams::default().tol)]
    tol: f64,
    /// Output model file.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DistanceArgs {
    #[arg(long, default_value = "maw")]
    method: Method,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Monte-Carlo samples per model for IAW.
    #[arg(long, default_value_t = DEFAULT_IAW_SAMPLES)]
    samples: usize,
    /// Length of the sampled sequences for the KL baseline.
    #[arg(long, default_value_t = DEFAULT_KL_LEN)]
    kl_len: usize,
    /// Use the one-directional KL estimate.
    #[arg(long)]
    no_symmetrize: bool,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl DistanceArgs {
    fn params(&self) -> DistanceParams {
        DistanceParams {
            p: self.p,
            alpha: self.alpha,
            iaw_samples: self.samples,
            kl_len: self.kl_len,
            kl_symmetrize: !self.no_symmetrize,
            ..DistanceParams::default()
        }
    }
}

#[derive(Debug, Args)]
struct DistArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[command(flatten)]
    distance: DistanceArgs,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DistmatArgs {
    /// Directory of `*.json` model files.
    #[arg(long)]
    dir: PathBuf,
    /// CSV of `file,label` rows.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[command(flatten)]
    distance: DistanceArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EvalMode {
    Pr,
    Knn1,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    distmat: PathBuf,
    #[arg(long, value_enum, default_value = "pr")]
    mode: EvalMode,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    exp: Perturbation,
    #[arg(long)]
    delta: f64,
    #[arg(long, value_delimiter = ',', default_value = "maw,iaw,kl")]
    methods: Vec<Method>,
    /// One or more master seeds; curves are averaged across seeds.
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_SEED_STR)]
    seed: Vec<u64>,
    /// Monte-Carlo samples per model for IAW.
    #[arg(long, default_value_t = ExperimentParams::default().distance.iaw_samples)]
    samples: usize,
    #[arg(long, default_value_t = DEFAULT_KL_LEN)]
    kl_len: usize,
    #[arg(long, default_value_t = DEFAULT_P)]
    p: f64,
    /// Sequences per class in the pilot replicate used to select alpha; 0 disables selection.
    #[arg(long, default_value_t = ExperimentParams::default().pilot_per_class)]
    pilot: usize,
    /// Alpha used when selection is disabled.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ToyArgs {
    #[arg(long)]
    varying: ToyVarying,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("hmmdist: {e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    // A pool that is already configured (e.g. in tests) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Estimate(a) => cmd_estimate(&a),
        Command::Dist(a) => cmd_dist(&a),
        Command::Distmat(a) => cmd_distmat(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Toy(a) => cmd_toy(&a),
    }
}

fn cmd_estimate(a: &EstimateArgs) -> CliResult {
    if a.states == 0 {
        return Err(CliError::Usage("--states must be at least 1".into()));
    }
    let sequences = a.input.iter().map(|p| format::read_sequence(p)).collect::<CliResult<Vec<_>>>()?;
    let params = BaumWelchParams { max_iter: a.max_iter, tol: a.tol };
    let fit = baum_welch(&sequences, a.states, a.seed, &params)?;
    for w in &fit.warnings {
        eprintln!("warning: {w}");
    }
    if !fit.converged {
        eprintln!("warning: Baum-Welch stopped after {} iterations without converging", fit.iterations);
    }
    let metadata = ModelMetadata {
        seed: Some(a.seed),
        log_likelihood: fit.log_likelihood.last().copied(),
        iterations: Some(fit.iterations),
        converged: Some(fit.converged),
    };
    format::save_model(&a.out, &fit.model, Some(metadata))
}

fn cmd_dist(a: &DistArgs) -> CliResult {
    let h1 = format::load_model(&a.a)?;
    let h2 = format::load_model(&a.b)?;
    let report = eval::distance(a.distance.method, &h1, &h2, &a.distance.params(), a.distance.seed)?;
    if a.json {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        println!("{text}");
    } else {
        println!("{}", report.value);
    }
    Ok(())
}

fn params_line(cmd: &str, method: Method, params: &DistanceParams, seed: u64) -> String {
    format!(
        "hmmdist {VERSION} {cmd} method={method} p={} alpha={} samples={} kl_len={} symmetrize={} seed={seed}",
        params.p, params.alpha, params.iaw_samples, params.kl_len, params.kl_symmetrize
    )
}

fn sidecar_path(out: &Path) -> PathBuf {
    if out.extension().is_some_and(|e| e == "csv") {
        out.with_extension("json")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }
}

#[derive(Serialize)]
struct MatrixMetadata<'a> {
    version: &'a str,
    method: Method,
    params: &'a DistanceParams,
    seed: u64,
    names: &'a [String],
    labels: &'a [String],
    marginal_term: Vec<Vec<f64>>,
    transition_term: Vec<Vec<f64>>,
}

fn write_matrix_outputs(out: &Path, dm: &DistanceMatrix, line: &str) -> CliResult {
    format::write_matrix_csv(out, line, &dm.names, &dm.labels, &dm.values)?;
    let rows = |m: &nalgebra::DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
    let meta = MatrixMetadata {
        version: VERSION,
        method: dm.method,
        params: &dm.params,
        seed: dm.base_seed,
        names: &dm.names,
        labels: &dm.labels,
        marginal_term: rows(&dm.marginal),
        transition_term: rows(&dm.transition),
    };
    write_file(&sidecar_path(out), &to_json_exact(&meta))
}

fn cmd_distmat(a: &DistmatArgs) -> CliResult {
    let entries = std::fs::read_dir(&a.dir).map_err(|e| CliError::io(&a.dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!("{}: no *.json model files", a.dir.display())));
    }
    let names: Vec<String> =
        files.iter().map(|p| p.file_name().expect("file path").to_string_lossy().into_owned()).collect();
    let labels = match &a.labels {
        None => vec!["unlabeled".to_string(); names.len()],
        Some(path) => {
            let table = format::read_labels(path)?;
            names
                .iter()
                .map(|n| {
                    table
                        .iter()
                        .find(|(f, _)| f == n)
                        .map(|(_, l)| l.clone())
                        .ok_or_else(|| CliError::Data(format!("{}: no label for '{n}'", path.display())))
                })
                .collect::<CliResult<Vec<_>>>()?
        }
    };
    let models = files.iter().map(|p| format::load_model(p)).collect::<CliResult<Vec<_>>>()?;
    let params = a.distance.params();
    let start = Instant::now();
    let dm = eval::pairwise_distance_matrix(&models, &labels, &names, a.distance.method, &params, a.distance.seed)?;
    eprintln!("computed {} distances in {:.3} s", names.len() * names.len().saturating_sub(1) / 2, start.elapsed().as_secs_f64());
    write_matrix_outputs(&a.out, &dm, &params_line("distmat", a.distance.method, &params, a.distance.seed))
}

fn pr_csv(header: &str, recall: &[f64], precision: &[f64]) -> String {
    let mut s = format!("# {header}\nrecall,precision\n");
    for (r, p) in recall.iter().zip(precision) {
        let _ = writeln!(s, "{},{}", fmt_f64(*r), fmt_f64(*p));
    }
    s
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => write_file(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> CliResult {
    let file = format::read_matrix_csv(&a.distmat)?;
    let dm = DistanceMatrix::from_values(file.values, file.labels, file.names, file.method.unwrap_or(Method::Maw))?;
    match a.mode {
        EvalMode::Pr => {
            let pr = eval::precision_recall(&dm)?;
            for w in &pr.warnings {
                eprintln!("warning: {w}");
            }
            let header = format!("hmmdist {VERSION} eval mode=pr map={}", fmt_f64(pr.mean_average_precision));
            let text = pr_csv(&header, &pr.recall, &pr.precision);
            match &a.out {
                Some(p) => {
                    write_file(p, &text)?;
                    println!("MAP {}", pr.mean_average_precision);
                    Ok(())
                }
                None => emit(None, &text),
            }
        }
        EvalMode::Knn1 => {
            let acc = eval::knn1_accuracy(&dm);
            if let Some(p) = &a.out {
                write_file(p, &format!("# hmmdist {VERSION} eval mode=knn1\naccuracy\n{}\n", fmt_f64(acc)))?;
            }
            println!("{acc}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct SynthSeedRecord {
    seed: u64,
    dropped: Vec<String>,
    warnings: Vec<String>,
}

#[derive(Serialize)]
struct SynthMetadata<'a> {
    version: &'a str,
    experiment: Perturbation,
    delta: f64,
    methods: &'a [Method],
    seeds: &'a [u64],
    distance: &'a DistanceParams,
    pilot_per_class: usize,
    num_models: usize,
    sequences_per_model: usize,
    sequence_len: usize,
    states: usize,
    runs: Vec<SynthSeedRecord>,
}

fn cmd_synth(a: &SynthArgs) -> CliResult {
    if a.methods.is_empty() {
        return Err(CliError::Usage("--methods must name at least one method".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let params = ExperimentParams {
        distance: DistanceParams { p: a.p, alpha: a.alpha, iaw_samples: a.samples, kl_len: a.kl_len, ..DistanceParams::default() },
        pilot_per_class: a.pilot,
        ..ExperimentParams::default()
    };
    let mut map_csv = String::from("seed,method,alpha,map\n");
    let mut runs = Vec::new();
    let mut curves: Vec<Vec<crate::eval::PrCurve>> = vec![Vec::new(); a.methods.len()];
    let mut cfg0 = None;
    for &seed in &a.seed {
        let cfg = PerturbationConfig::new(a.exp, a.delta, seed);
        let result = experiments::run_perturbation_experiment(&cfg, &a.methods, &params)?;
        cfg0.get_or_insert(cfg);
        let dir = a.out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut summary = String::from("method,class,mean,sd,count\n");
        for row in &result.summary {
            let _ = writeln!(summary, "{},{},{},{},{}", row.method, row.class, fmt_f64(row.mean), fmt_f64(row.sd), row.count);
        }
        write_file(&dir.join("summary.csv"), &summary)?;
        for (k, m) in result.methods.iter().enumerate() {
            let alpha = m.alpha_selection.as_ref().map_or(m.matrix.params.alpha, |s| s.alpha);
            let line = params_line("synth", m.method, &m.matrix.params, m.matrix.base_seed);
            write_matrix_outputs(&dir.join(format!("{}_distmat.csv", m.method)), &m.matrix, &line)?;
            let header = format!("{line} map={}", fmt_f64(m.pr.mean_average_precision));
            write_file(&dir.join(format!("{}_pr.csv", m.method)), &pr_csv(&header, &m.pr.recall, &m.pr.precision))?;
            if let Some(sel) = &m.alpha_selection {
                let mut t = String::from("alpha,knn1_accuracy\n");
                for (al, acc) in &sel.table {
                    let _ = writeln!(t, "{al},{}", fmt_f64(*acc));
                }
                write_file(&dir.join(format!("{}_alpha.csv", m.method)), &t)?;
            }
            let alpha_field = if m.method == Method::KlMc { String::new() } else { alpha.to_string() };
            let _ = writeln!(map_csv, "{seed},{},{alpha_field},{}", m.method, fmt_f64(m.pr.mean_average_precision));
            println!("seed {seed} {:<6} MAP {:.4}", m.method.name(), m.pr.mean_average_precision);
            curves[k].push(m.pr.clone());
        }
        for d in &result.dropped {
            eprintln!("warning: seed {seed}: dropped {d}");
        }
        runs.push(SynthSeedRecord { seed, dropped: result.dropped, warnings: result.warnings });
    }
    write_file(&a.out.join("map.csv"), &map_csv)?;
    for (k, method) in a.methods.iter().enumerate() {
        let refs: Vec<&crate::eval::PrCurve> = curves[k].iter().collect();
        match experiments::average_curves(&refs) {
            Ok((recall, precision)) => {
                let header = format!("hmmdist {VERSION} synth mean over {} seeds method={method}", refs.len());
                write_file(&a.out.join(format!("{method}_pr_mean.csv")), &pr_csv(&header, &recall, &precision))?;
            }
            Err(e) => eprintln!("warning: {method}: mean curve not written: {e}"),
        }
    }
    let cfg = cfg0.expect("at least one seed");
    let meta = SynthMetadata {
        version: VERSION,
        experiment: a.exp,
        delta: a.delta,
        methods: &a.methods,
        seeds: &a.seed,
        distance: &params.distance,
        pilot_per_class: params.pilot_per_class,
        num_models: cfg.num_models,
        sequences_per_model: cfg.sequences_per_model,
        sequence_len: cfg.sequence_len,
        states: cfg.states,
        runs,
    };
    write_file(&a.out.join("run.json"), &to_json_exact(&meta))
}

fn cmd_toy(a: &ToyArgs) -> CliResult {
    let rows = experiments::toy_gaussian_experiment(a.varying, a.seed)?;
    let varying = match a.varying {
        ToyVarying::Mu => "mu",
        ToyVarying::Sigma => "sigma",
    };
    let mut s = format!(
        "# hmmdist {VERSION} toy varying={varying} seed={} batches={} batch_size={}\ni,mean_w2,sd_w2,mean_kl,sd_kl\n",
        a.seed,
        experiments::TOY_BATCHES,
        experiments::TOY_BATCH_SIZE
    );
    for r in &rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.i, fmt_f64(r.mean_w2), fmt_f64(r.sd_w2), fmt_f64(r.mean_kl), fmt_f64(r.sd_kl));
    }
    emit(a.out.as_deref(), &s)
}
