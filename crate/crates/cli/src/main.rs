use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::warn;
use serde::Serialize;

use msar::averaging::{average_report, DEFAULT_QP_TOL};
use msar::harness::{
    draw_covariates, run_experiment, split_evaluate, write_outputs, ExperimentConfig, RecipeContext, SplitOptions,
    WeightRecipe,
};
use msar::msar_core::{load_matrix_csv, spectral_radius};
use msar::selection::{evaluate_candidates, SelectionReport};
use msar::weights::{
    island_count, lattice_weights, load_matrix_market, row_normalize, save_matrix_market, IslandPolicy,
    LatticeScheme, LatticeSpec,
};
use msar::{fit, simulate, CandidateFit, Dataset, DenseMatrix, ErrorKind, ErrorLaw, FitOptions, MsarError, MsarParams, SpatialWeights};

/// Spatial weights matrix selection and averaging for multivariate spatial autoregressive models.
#[derive(Debug, Parser)]
#[command(name = "msar", version)]
struct Cli {
    /// Worker threads (default: all cores; 1 runs serially)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a spatial weights matrix and write it in Matrix Market format
    Weights(WeightsArgs),
    /// Fit the model under one weights matrix
    Fit(FitArgs),
    /// Fit every candidate and select one by the Mallows-type criterion
    Select(SelectArgs),
    /// Fit every candidate and average them with criterion-optimal weights
    Average(AverageArgs),
    /// Simulate a dataset from known parameters
    Simulate(SimulateArgs),
    /// Run a Monte Carlo experiment described by a JSON config
    Experiment(ExperimentArgs),
    /// Repeated train/test node splits of an observed dataset
    SplitEval(SplitArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scheme {
    Left,
    LeftRight,
    Rook,
    Queen,
}

impl From<Scheme> for LatticeScheme {
    fn from(s: Scheme) -> Self {
        match s {
            Scheme::Left => LatticeScheme::Left,
            Scheme::LeftRight => LatticeScheme::LeftRight,
            Scheme::Rook => LatticeScheme::Rook,
            Scheme::Queen => LatticeScheme::Queen,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Islands {
    Error,
    Drop,
}

impl From<Islands> for IslandPolicy {
    fn from(i: Islands) -> Self {
        match i {
            Islands::Error => IslandPolicy::Error,
            Islands::Drop => IslandPolicy::DropToZero,
        }
    }
}

#[derive(Debug, Args)]
struct WeightsArgs {
    /// Lattice scheme
    #[arg(long, conflicts_with = "recipe", requires_all = ["rows", "cols"])]
    scheme: Option<Scheme>,
    /// Lattice rows
    #[arg(long)]
    rows: Option<usize>,
    /// Lattice columns
    #[arg(long)]
    cols: Option<usize>,
    /// Override the scheme's default edge wrapping
    #[arg(long)]
    wrap: Option<bool>,
    /// JSON weights recipe (see README); relative paths resolve against its directory
    #[arg(long)]
    recipe: Option<PathBuf>,
    /// Keep raw weights instead of row-normalizing
    #[arg(long)]
    raw: bool,
    /// Handling of rows without neighbours when normalizing
    #[arg(long, value_enum, default_value = "error")]
    islands: Islands,
    /// Output Matrix Market file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FitControls {
    /// Stop when successive estimates of D differ by less than this
    #[arg(long)]
    tol: Option<f64>,
    /// Maximum outer iterations
    #[arg(long)]
    max_iter: Option<usize>,
    /// Required gradient norm at the returned estimate
    #[arg(long)]
    grad_tol: Option<f64>,
    /// Keep going when a fit does not converge
    #[arg(long)]
    allow_nonconverged: bool,
}

impl FitControls {
    fn options(&self) -> FitOptions {
        let mut o = FitOptions::default();
        if let Some(v) = self.tol {
            o.tol = v;
        }
        if let Some(v) = self.max_iter {
            o.max_iter = v;
        }
        if let Some(v) = self.grad_tol {
            o.grad_tol = v;
        }
        o
    }
}

#[derive(Debug, Args)]
struct FitArgs {
    /// CSV with columns y1..yq, x1..xp
    #[arg(long)]
    data: PathBuf,
    /// Matrix Market weights file
    #[arg(long)]
    weights: PathBuf,
    #[command(flatten)]
    controls: FitControls,
    /// Output JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CandidateArgs {
    /// CSV with columns y1..yq, x1..xp
    #[arg(long)]
    data: PathBuf,
    /// Candidate weights matrices (Matrix Market), numbered from 1
    #[arg(long, num_args = 1.., required = true)]
    weights: Vec<PathBuf>,
    /// Candidate (1-based) whose fit supplies the covariance estimate; default is the densest
    #[arg(long)]
    omega_from: Option<usize>,
    #[command(flatten)]
    controls: FitControls,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    candidates: CandidateArgs,
    /// Output JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AverageArgs {
    #[command(flatten)]
    candidates: CandidateArgs,
    /// QP tolerance on the KKT residual
    #[arg(long, default_value_t = DEFAULT_QP_TOL)]
    qp_tol: f64,
    /// Also write the averaged mean as CSV (columns mu1..muq)
    #[arg(long)]
    mu_out: Option<PathBuf>,
    /// Output JSON (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Errors {
    Gaussian,
    StudentT,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// JSON with D, B and Sigma_e as row-major nested arrays
    #[arg(long)]
    params: PathBuf,
    /// True weights matrix (Matrix Market)
    #[arg(long)]
    weights: PathBuf,
    /// Covariates CSV (x1..xp); drawn as correlated normals when omitted
    #[arg(long)]
    x: Option<PathBuf>,
    /// Correlation between drawn covariates
    #[arg(long, default_value_t = 0.5)]
    x_correlation: f64,
    /// Error distribution
    #[arg(long, value_enum, default_value = "gaussian")]
    errors: Errors,
    /// Degrees of freedom for student-t errors
    #[arg(long, default_value_t = 5.0)]
    df: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    config: PathBuf,
    /// Override the number of replications
    #[arg(long)]
    reps: Option<usize>,
    /// Override the seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for summary.csv, replications.csv and meta.json
    #[arg(long)]
    out: PathBuf,
    /// Leave the timestamp out of meta.json
    #[arg(long)]
    no_meta_time: bool,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    candidates: CandidateArgs,
    /// Number of random splits
    #[arg(long, default_value_t = 10)]
    splits: usize,
    /// Share of nodes used for training
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Handling of rows left without neighbours by a split
    #[arg(long, value_enum, default_value = "drop")]
    islands: Islands,
    /// Output CSV (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<MsarError> for Failure {
    fn from(e: MsarError) -> Self {
        let code = match e {
            MsarError::Singular(_)
            | MsarError::IllConditioned { .. }
            | MsarError::NotConverged { .. }
            | MsarError::NotPositiveDefinite(_) => 2,
            _ => 1,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        MsarError::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        MsarError::from(e).into()
    }
}

type CliResult<T> = Result<T, Failure>;

fn nonconverged(what: String) -> Failure {
    Failure {
        code: 2,
        message: format!("{what} did not converge (pass --allow-nonconverged to keep it)"),
    }
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Writes `text` to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> CliResult<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
        }
    }
    Ok(())
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

#[derive(Serialize)]
struct FitReport {
    candidate: usize,
    converged: bool,
    iterations: usize,
    objective: f64,
    grad_norm: f64,
    spectral_radius: f64,
    d_hat: Vec<Vec<f64>>,
    b_gls: Vec<Vec<f64>>,
    b_tilde: Vec<Vec<f64>>,
    sigma_hat: Vec<Vec<f64>>,
}

impl FitReport {
    fn new(f: &CandidateFit, p: usize) -> Self {
        Self {
            candidate: f.candidate_index + 1,
            converged: f.converged,
            iterations: f.iterations,
            objective: f.objective,
            grad_norm: f.grad_norm,
            spectral_radius: spectral_radius(&f.d_hat),
            d_hat: rows_of(&f.d_hat),
            b_gls: rows_of(&f.b_gls(p)),
            b_tilde: rows_of(&f.b_tilde(p)),
            sigma_hat: rows_of(&f.sigma_hat),
        }
    }
}

fn cmd_weights(a: &WeightsArgs) -> CliResult<()> {
    let policy = IslandPolicy::from(a.islands);
    let raw = match (&a.recipe, a.scheme) {
        (Some(path), _) => {
            let recipe: WeightRecipe = serde_json::from_str(&fs::read_to_string(path)?)?;
            let ctx = RecipeContext {
                grid: (a.rows.unwrap_or(0), a.cols.unwrap_or(0)),
                base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
                island_policy: policy,
            };
            recipe.build_raw(&ctx)?
        }
        (None, Some(scheme)) => {
            let mut spec = LatticeSpec::new(a.rows.unwrap_or(0), a.cols.unwrap_or(0), scheme.into());
            if let Some(w) = a.wrap {
                spec = spec.with_wrap(w);
            }
            lattice_weights(&spec)?
        }
        (None, None) => return Err(MsarError::Config("either --scheme or --recipe is required".into()).into()),
    };
    let w = if a.raw || raw.is_normalized() {
        raw
    } else {
        let islands = island_count(&raw);
        if islands > 0 && policy == IslandPolicy::DropToZero {
            warn!("{islands} rows without neighbours left as zero");
        }
        row_normalize(&raw, policy)?
    };
    save_matrix_market(&w, &a.out)?;
    Ok(())
}

fn load_candidates(paths: &[PathBuf]) -> CliResult<Vec<SpatialWeights>> {
    Ok(paths.iter().map(load_matrix_market).collect::<Result<Vec<_>, _>>()?)
}

fn omega_index(a: &CandidateArgs) -> CliResult<Option<usize>> {
    match a.omega_from {
        Some(0) => Err(MsarError::Config("--omega-from is 1-based".into()).into()),
        Some(k) if k > a.weights.len() => Err(MsarError::Config(format!(
            "--omega-from {k} exceeds the {} candidates",
            a.weights.len()
        ))
        .into()),
        Some(k) => Ok(Some(k - 1)),
        None => Ok(None),
    }
}

/// Fits and scores every candidate, honouring `--allow-nonconverged`.
fn evaluate(a: &CandidateArgs) -> CliResult<(Dataset, Vec<SpatialWeights>, SelectionReport)> {
    let omega = omega_index(a)?;
    let data = Dataset::load_csv(&a.data)?;
    let cands = load_candidates(&a.weights)?;
    let mut report = evaluate_candidates(&data, &cands, &a.controls.options(), omega)?;
    if let Some(f) = report.fits.iter().find(|f| !f.converged) {
        if !a.controls.allow_nonconverged {
            return Err(nonconverged(format!("candidate {}", f.candidate_index + 1)));
        }
        report.reselect(true)?;
    }
    Ok((data, cands, report))
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let data = Dataset::load_csv(&a.data)?;
    let w = load_matrix_market(&a.weights)?;
    let f = fit(&data, &w, &a.controls.options())?;
    if !f.converged && !a.controls.allow_nonconverged {
        return Err(nonconverged("the fit".into()));
    }
    emit(a.out.as_deref(), &to_json(&FitReport::new(&f, data.p()))?)
}

#[derive(Serialize)]
struct CandidateCriterion {
    candidate: usize,
    c_hat: f64,
    sse: f64,
    trace_term: f64,
    stein_term: f64,
    condition_number: f64,
    regularized: bool,
    eligible: bool,
    fit: FitReport,
}

#[derive(Serialize)]
struct SelectOutput {
    selected: usize,
    omega_source: Option<usize>,
    candidates: Vec<CandidateCriterion>,
}

fn cmd_select(a: &SelectArgs) -> CliResult<()> {
    let (data, _, report) = evaluate(&a.candidates)?;
    let out = SelectOutput {
        selected: report.selected + 1,
        omega_source: report.omega.source_candidate.map(|k| k + 1),
        candidates: report
            .criteria
            .iter()
            .zip(&report.fits)
            .enumerate()
            .map(|(k, (c, f))| CandidateCriterion {
                candidate: k + 1,
                c_hat: c.c_hat,
                sse: c.sse,
                trace_term: c.trace_term,
                stein_term: c.stein_term,
                condition_number: c.condition_number,
                regularized: c.warning,
                eligible: report.eligible[k],
                fit: FitReport::new(f, data.p()),
            })
            .collect(),
    };
    emit(a.out.as_deref(), &to_json(&out)?)
}

#[derive(Serialize)]
struct AverageOutput {
    weights: Vec<f64>,
    objective: f64,
    kkt_residual: f64,
    c_hat: Vec<f64>,
    mu_avg_path: Option<PathBuf>,
}

fn cmd_average(a: &AverageArgs) -> CliResult<()> {
    let (data, cands, report) = evaluate(&a.candidates)?;
    let (w, mu, _) = average_report(&report, &data, &cands, a.qp_tol)?;
    if let Some(path) = &a.mu_out {
        let (n, q) = (data.n(), data.q());
        let mut text = (1..=q).map(|j| format!("mu{j}")).collect::<Vec<_>>().join(",") + "\n";
        for u in 0..n {
            let row: Vec<String> = (0..q).map(|j| format!("{}", mu[j * n + u])).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        emit(Some(path), &text)?;
    }
    let out = AverageOutput {
        weights: w.w,
        objective: w.objective,
        kkt_residual: w.kkt_residual,
        c_hat: report.criteria.iter().map(|c| c.c_hat).collect(),
        mu_avg_path: a.mu_out.clone(),
    };
    emit(a.out.as_deref(), &to_json(&out)?)
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    let params = MsarParams::load(&a.params)?;
    let w = load_matrix_market(&a.weights)?;
    let x = match &a.x {
        Some(path) => load_matrix_csv(path)?,
        None => draw_covariates(w.n(), params.p(), a.x_correlation, a.seed)?,
    };
    let kind = match a.errors {
        Errors::Gaussian => ErrorKind::Gaussian,
        Errors::StudentT => ErrorKind::StudentT { df: a.df },
    };
    let law = ErrorLaw::new(kind, params.sigma_e.clone())?;
    let data = simulate(&params, &w, &x, &law, a.seed)?;
    data.save_csv(&a.out)?;
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let run = run_experiment(&cfg)?;
    write_outputs(&a.out, &cfg, &run, !a.no_meta_time)?;
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> CliResult<()> {
    let omega = omega_index(&a.candidates)?;
    let data = Dataset::load_csv(&a.candidates.data)?;
    let cands = load_candidates(&a.candidates.weights)?;
    let opts = SplitOptions {
        splits: a.splits,
        ratio: a.ratio,
        seed: a.seed,
        omega_source: omega,
        island_policy: a.islands.into(),
        fit: a.candidates.controls.options(),
    };
    let report = split_evaluate(&data, &cands, &opts)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    emit(a.out.as_deref(), &String::from_utf8_lossy(&buf))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Weights(a) => cmd_weights(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Select(a) => cmd_select(a),
        Command::Average(a) => cmd_average(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Experiment(a) => cmd_experiment(a),
        Command::SplitEval(a) => cmd_split(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure {t} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
