//! Monte Carlo experiments over candidate weights matrices, their summaries,
//! and a train/test split protocol for observed data.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::averaging::{average_report, DEFAULT_QP_TOL};
use crate::error::{MsarError, Result};
use crate::msar_core::{fit, simulate_from_errors, CandidateFit, Dataset, ErrorKind, ErrorLaw, FitOptions, MsarParams};
use crate::profile::xtilde_apply;
use crate::selection::{evaluate_with, omega_from_fits, SelectionReport};
use crate::solver::SpatialSolver;
use crate::tensor_ops::{DenseMatrix, DenseVector};
use crate::weights::{
    attribute_weighted, combine, distance_band, exp_kernel, island_count, lattice_weights, load_attribute_csv,
    load_matrix_market, near_square_grid, row_normalize, two_window_band, AttributeTransform, DistanceMatrix,
    IslandPolicy, LatticeScheme, LatticeSpec, SpatialWeights,
};

/// How a weights matrix is built. Paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightRecipe {
    Lattice {
        scheme: LatticeScheme,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        wrap: Option<bool>,
    },
    Combine {
        parts: Vec<WeightRecipe>,
        coeffs: Vec<f64>,
    },
    MatrixMarket {
        path: PathBuf,
    },
    DistanceBand {
        distances: PathBuf,
        threshold: f64,
    },
    TwoWindow {
        distances: PathBuf,
        t1: f64,
        t2: f64,
        inner_w: f64,
        outer_w: f64,
    },
    ExpKernel {
        distances: PathBuf,
        theta_d: f64,
        scale: f64,
    },
    Attribute {
        adjacency: Box<WeightRecipe>,
        attributes: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        column: Option<String>,
        transform: AttributeTransform,
    },
}

/// Context for turning recipes into matrices.
#[derive(Debug, Clone)]
pub struct RecipeContext {
    pub grid: (usize, usize),
    pub base_dir: PathBuf,
    pub island_policy: IslandPolicy,
}

impl WeightRecipe {
    /// Short display name.
    pub fn label(&self) -> String {
        match self {
            WeightRecipe::Lattice { scheme, .. } => format!("{scheme:?}").to_lowercase(),
            WeightRecipe::Combine { parts, coeffs } => parts
                .iter()
                .zip(coeffs)
                .map(|(p, c)| format!("{c}*{}", p.label()))
                .collect::<Vec<_>>()
                .join("+"),
            WeightRecipe::MatrixMarket { path } => path.display().to_string(),
            WeightRecipe::DistanceBand { threshold, .. } => format!("band({threshold})"),
            WeightRecipe::TwoWindow { t1, t2, .. } => format!("two_window({t1},{t2})"),
            WeightRecipe::ExpKernel { theta_d, .. } => format!("exp_kernel({theta_d})"),
            WeightRecipe::Attribute { adjacency, .. } => format!("attribute({})", adjacency.label()),
        }
    }

    /// Unnormalized matrix.
    pub fn build_raw(&self, ctx: &RecipeContext) -> Result<SpatialWeights> {
        let path = |p: &Path| ctx.base_dir.join(p);
        match self {
            WeightRecipe::Lattice { scheme, wrap } => {
                let mut spec = LatticeSpec::new(ctx.grid.0, ctx.grid.1, *scheme);
                if let Some(w) = wrap {
                    spec = spec.with_wrap(*w);
                }
                lattice_weights(&spec)
            }
            WeightRecipe::Combine { parts, coeffs } => {
                let built = parts.iter().map(|p| p.build(ctx)).collect::<Result<Vec<_>>>()?;
                combine(&built.iter().collect::<Vec<_>>(), coeffs)
            }
            WeightRecipe::MatrixMarket { path: p } => load_matrix_market(path(p)),
            WeightRecipe::DistanceBand { distances, threshold } => {
                distance_band(&DistanceMatrix::from_csv(path(distances))?, *threshold)
            }
            WeightRecipe::TwoWindow {
                distances,
                t1,
                t2,
                inner_w,
                outer_w,
            } => two_window_band(&DistanceMatrix::from_csv(path(distances))?, *t1, *t2, *inner_w, *outer_w),
            WeightRecipe::ExpKernel {
                distances,
                theta_d,
                scale,
            } => exp_kernel(&DistanceMatrix::from_csv(path(distances))?, *theta_d, *scale),
            WeightRecipe::Attribute {
                adjacency,
                attributes,
                column,
                transform,
            } => {
                let adj = adjacency.build_raw(ctx)?;
                let attr = load_attribute_csv(path(attributes), column.as_deref())?;
                attribute_weighted(&adj, &attr, *transform)
            }
        }
    }

    /// Row-normalized matrix.
    pub fn build(&self, ctx: &RecipeContext) -> Result<SpatialWeights> {
        let raw = self.build_raw(ctx)?;
        if raw.is_normalized() {
            Ok(raw)
        } else {
            row_normalize(&raw, ctx.island_policy)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    PerCandidate,
    Ms,
    Ma,
    UnivariateMs,
    UnivariateMa,
}

/// Whether MSE of `μ̂_j` is `‖μ̂_j − μ_j‖²/n` or the plain sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MseNormalization {
    #[default]
    Mean,
    Sum,
}

/// Rows of `X` are `N(0, C)` with unit variances and common correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateDesign {
    pub correlation: f64,
    /// Draw `X` once and reuse it in every replication.
    pub fixed: bool,
}

impl Default for CovariateDesign {
    fn default() -> Self {
        Self {
            correlation: 0.5,
            fixed: false,
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::PerCandidate, Method::Ms, Method::Ma]
}

fn default_error_law() -> ErrorKind {
    ErrorKind::Gaussian
}

/// A Monte Carlo design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub params: MsarParams,
    pub true_w: WeightRecipe,
    pub candidates: Vec<WeightRecipe>,
    /// Candidate whose fit supplies `Ω̂`; the densest candidate when absent.
    #[serde(default)]
    pub omega_source: Option<usize>,
    /// Error family; its scale matrix is `params.Sigma_e`.
    #[serde(default = "default_error_law")]
    pub error_law: ErrorKind,
    pub replications: usize,
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub grid_shape: Option<(usize, usize)>,
    #[serde(default)]
    pub mse_normalization: MseNormalization,
    #[serde(default)]
    pub covariates: CovariateDesign,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default)]
    pub island_policy: IslandPolicy,
    /// Simulate with `E = 0`.
    #[serde(default)]
    pub zero_noise: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = Self::from_json_str(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MsarError::Config(m));
        if self.replications == 0 {
            return bad("replications must be at least 1".into());
        }
        if self.candidates.is_empty() {
            return bad("candidate set is empty".into());
        }
        self.params.validate()?;
        if self.params.q() != self.q || self.params.p() != self.p {
            return bad(format!(
                "params are for p = {}, q = {} but the config says p = {}, q = {}",
                self.params.p(),
                self.params.q(),
                self.p,
                self.q
            ));
        }
        if self.n <= self.p * self.q {
            return bad(format!("need n > pq, got n = {}", self.n));
        }
        if let Some((r, c)) = self.grid_shape {
            if r * c != self.n {
                return bad(format!("grid {r}x{c} does not have n = {} cells", self.n));
            }
        }
        if let Some(k) = self.omega_source {
            if k >= self.candidates.len() {
                return bad(format!("omega_source {k} out of range"));
            }
        }
        if !(self.covariates.correlation.abs() < 1.0) {
            return bad("covariate correlation must lie in (-1, 1)".into());
        }
        if self.methods.is_empty() {
            return bad("no methods requested".into());
        }
        ErrorLaw::new(self.error_law, self.params.sigma_e.clone())?;
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid_shape.unwrap_or_else(|| near_square_grid(self.n))
    }

    pub fn has(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }

    /// SHA-256 of the serialized config.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn covariate_factor(p: usize, correlation: f64) -> Result<DenseMatrix> {
    let cov = DenseMatrix::from_fn(p, p, |i, j| if i == j { 1.0 } else { correlation });
    Ok(cov
        .cholesky()
        .ok_or_else(|| MsarError::InvalidParameter("covariate covariance is not positive definite".into()))?
        .l())
}

fn draw_rows<R: Rng + ?Sized>(chol: &DenseMatrix, n: usize, rng: &mut R) -> DenseMatrix {
    let p = chol.nrows();
    let mut x = DenseMatrix::zeros(n, p);
    let mut z = DenseVector::zeros(p);
    for i in 0..n {
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let row = chol * &z;
        for a in 0..p {
            x[(i, a)] = row[a];
        }
    }
    x
}

/// `n×p` covariates with i.i.d. `N(0, C)` rows, `C` having unit variances and
/// the given common correlation.
pub fn draw_covariates(n: usize, p: usize, correlation: f64, seed: u64) -> Result<DenseMatrix> {
    let chol = covariate_factor(p, correlation)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(draw_rows(&chol, n, &mut rng))
}

/// A config with its weights matrices built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub true_w: SpatialWeights,
    pub candidates: Vec<SpatialWeights>,
    law: ErrorLaw,
    x_chol: DenseMatrix,
    fixed_x: Option<DenseMatrix>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let ctx = RecipeContext {
            grid: config.grid(),
            base_dir: config.base_dir.clone(),
            island_policy: config.island_policy,
        };
        let true_w = config.true_w.build(&ctx)?;
        let candidates = config
            .candidates
            .iter()
            .map(|r| r.build(&ctx))
            .collect::<Result<Vec<_>>>()?;
        for (k, w) in std::iter::once(&true_w).chain(&candidates).enumerate() {
            if w.n() != config.n {
                return Err(MsarError::Config(format!(
                    "weights matrix {k} is {0}x{0}, expected n = {1}",
                    w.n(),
                    config.n
                )));
            }
        }
        let x_chol = covariate_factor(config.p, config.covariates.correlation)?;
        let law = ErrorLaw::new(config.error_law, config.params.sigma_e.clone())?;
        let mut exp = Self {
            config,
            true_w,
            candidates,
            law,
            x_chol,
            fixed_x: None,
        };
        if exp.config.covariates.fixed {
            let mut rng = exp.rng(u64::MAX);
            exp.fixed_x = Some(exp.draw_x(&mut rng));
        }
        Ok(exp)
    }

    /// Generator for replication `rep`: the config seed with its own stream.
    fn rng(&self, stream: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        rng
    }

    fn draw_x(&self, rng: &mut ChaCha20Rng) -> DenseMatrix {
        draw_rows(&self.x_chol, self.config.n, rng)
    }

    /// Covariates, the true mean and a simulated dataset for replication `rep`.
    pub fn draw(&self, rep: usize) -> Result<(Dataset, DenseVector)> {
        let mut rng = self.rng(rep as u64);
        let x = match &self.fixed_x {
            Some(x) => x.clone(),
            None => self.draw_x(&mut rng),
        };
        let (n, q) = (self.config.n, self.config.q);
        let errors = if self.config.zero_noise {
            DenseMatrix::zeros(n, q)
        } else {
            self.law.draw(n, &mut rng)
        };
        let params = &self.config.params;
        let solver = SpatialSolver::new(&params.d, &self.true_w)?;
        let mu = solver.solve(&xtilde_apply(&x, q, &params.beta()))?;
        let data = simulate_from_errors(params, &self.true_w, &x, &errors)?;
        Ok((data, DenseVector::from_vec(mu)))
    }
}

/// One method's metrics in one replication.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodResult {
    pub method: String,
    /// One entry per response; empty when the method failed.
    pub mse_mu: Vec<f64>,
    pub frob_d: Option<f64>,
    pub frob_b: Option<f64>,
    pub frob_w: Option<f64>,
    /// Position of the chosen candidate.
    pub selected: Option<usize>,
    pub weights: Option<Vec<f64>>,
    pub converged: bool,
    pub error: Option<String>,
}

impl MethodResult {
    fn failed(method: String, err: &MsarError) -> Self {
        Self {
            method,
            mse_mu: Vec::new(),
            frob_d: None,
            frob_b: None,
            frob_w: None,
            selected: None,
            weights: None,
            converged: false,
            error: Some(err.to_string()),
        }
    }

    fn with_mse(method: String, mse_mu: Vec<f64>, converged: bool) -> Self {
        Self {
            method,
            mse_mu,
            frob_d: None,
            frob_b: None,
            frob_w: None,
            selected: None,
            weights: None,
            converged,
            error: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.error.is_none()
    }

    /// Scalar metrics as `(name, value)` pairs.
    pub fn metrics(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self
            .mse_mu
            .iter()
            .enumerate()
            .map(|(j, v)| (format!("mse_mu{}", j + 1), *v))
            .collect();
        for (name, v) in [("frob_d", self.frob_d), ("frob_b", self.frob_b), ("frob_w", self.frob_w)] {
            if let Some(v) = v {
                out.push((name.to_string(), v));
            }
        }
        if let Some(k) = self.selected {
            out.push(("selected".into(), k as f64));
        }
        if let Some(w) = &self.weights {
            out.extend(w.iter().enumerate().map(|(k, v)| (format!("weight_{}", k + 1), *v)));
        }
        out
    }
}

/// All methods for one simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub rep: usize,
    pub methods: Vec<MethodResult>,
}

impl ReplicationResult {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

fn mse_per_response(est: &[f64], truth: &[f64], n: usize, norm: MseNormalization) -> Vec<f64> {
    let q = truth.len() / n;
    (0..q)
        .map(|j| {
            let s: f64 = (0..n).map(|u| (est[j * n + u] - truth[j * n + u]).powi(2)).sum();
            match norm {
                MseNormalization::Mean => s / n as f64,
                MseNormalization::Sum => s,
            }
        })
        .collect()
}

/// Per-candidate, MS and MA results for one dataset (multivariate or one response).
struct MethodSet<'a> {
    prefix: &'a str,
    per_candidate: bool,
    ms: bool,
    ma: bool,
    /// True `D` and `B` when they are comparable with the fitted ones.
    truth_db: Option<(&'a DenseMatrix, &'a DenseMatrix)>,
}

fn run_methods(exp: &Experiment, data: &Dataset, mu: &[f64], set: &MethodSet<'_>, out: &mut Vec<MethodResult>) {
    let cfg = &exp.config;
    let n = data.n();
    let norm = cfg.mse_normalization;
    let cand = &exp.candidates;
    let name = |s: String| format!("{}{s}", set.prefix);
    let fits: Vec<Result<CandidateFit>> = cand
        .iter()
        .enumerate()
        .map(|(k, w)| fit(data, w, &cfg.fit).map(|f| f.with_index(k)))
        .collect();
    let frob = |f: &CandidateFit, r: &mut MethodResult| {
        if let Some((d, b)) = set.truth_db {
            r.frob_d = Some((&f.d_hat - d).norm());
            r.frob_b = Some((f.b_gls(data.p()) - b).norm());
        }
    };

    if set.per_candidate {
        for (k, f) in fits.iter().enumerate() {
            let label = name(format!("W{}", k + 1));
            out.push(match f {
                Ok(f) => {
                    let mut r = MethodResult::with_mse(
                        label,
                        mse_per_response(f.mu_tilde.as_slice(), mu, n, norm),
                        f.converged,
                    );
                    frob(f, &mut r);
                    r
                }
                Err(e) => MethodResult::failed(label, e),
            });
        }
    }
    if !(set.ms || set.ma) {
        return;
    }
    let report = (|| -> Result<SelectionReport> {
        let ok = fits
            .iter()
            .map(|f| f.as_ref().map(Clone::clone).map_err(|e| MsarError::Config(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let omega = omega_from_fits(&ok, cand, cfg.omega_source)?;
        evaluate_with(data, cand, ok, omega)
    })();
    let report = match report {
        Ok(r) => r,
        Err(e) => {
            if set.ms {
                out.push(MethodResult::failed(name("MS".into()), &e));
            }
            if set.ma {
                out.push(MethodResult::failed(name("MA".into()), &e));
            }
            return;
        }
    };
    let all_converged = report.fits.iter().all(|f| f.converged);
    if set.ms {
        let k = report.selected;
        let f = &report.fits[k];
        let mut r = MethodResult::with_mse(
            name("MS".into()),
            mse_per_response(f.mu_tilde.as_slice(), mu, n, norm),
            all_converged,
        );
        frob(f, &mut r);
        r.frob_w = cand[k].frobenius_distance(&exp.true_w).ok();
        r.selected = Some(k);
        out.push(r);
    }
    if set.ma {
        let label = name("MA".into());
        let res = average_report(&report, data, cand, DEFAULT_QP_TOL);
        out.push(match res {
            Ok((w, m, wa)) => {
                let mut r = MethodResult::with_mse(label, mse_per_response(m.as_slice(), mu, n, norm), all_converged);
                r.frob_w = wa.frobenius_distance(&exp.true_w).ok();
                r.weights = Some(w.w);
                r
            }
            Err(e) => MethodResult::failed(label, &e),
        });
    }
}

/// Simulates replication `rep` and evaluates every requested method on it.
pub fn run_replication(exp: &Experiment, rep: usize) -> ReplicationResult {
    let cfg = &exp.config;
    let mut methods = Vec::new();
    let (data, mu) = match exp.draw(rep) {
        Ok(v) => v,
        Err(e) => {
            warn!("replication {rep}: simulation failed: {e}");
            methods.push(MethodResult::failed("simulate".into(), &e));
            return ReplicationResult { rep, methods };
        }
    };
    run_methods(
        exp,
        &data,
        mu.as_slice(),
        &MethodSet {
            prefix: "",
            per_candidate: cfg.has(Method::PerCandidate),
            ms: cfg.has(Method::Ms),
            ma: cfg.has(Method::Ma),
            truth_db: Some((&cfg.params.d, &cfg.params.b)),
        },
        &mut methods,
    );
    let (ums, uma) = (cfg.has(Method::UnivariateMs), cfg.has(Method::UnivariateMa));
    if ums || uma {
        let n = cfg.n;
        for j in 0..cfg.q {
            let prefix = format!("SAR_Y{}_", j + 1);
            run_methods(
                exp,
                &data.response(j),
                &mu.as_slice()[j * n..(j + 1) * n],
                &MethodSet {
                    prefix: &prefix,
                    per_candidate: cfg.has(Method::PerCandidate),
                    ms: ums,
                    ma: uma,
                    truth_db: None,
                },
                &mut methods,
            );
        }
    }
    for m in &methods {
        if let Some(e) = &m.error {
            warn!("replication {rep}: {} failed: {e}", m.method);
        }
    }
    ReplicationResult { rep, methods }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Default, Clone, Copy)]
struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Mean, median and sample standard deviation.
fn describe(values: &[f64]) -> (f64, f64, f64) {
    let n = values.len() as f64;
    let mut s = KahanSum::default();
    values.iter().for_each(|&v| s.add(v));
    let mean = s.total() / n;
    let mut ss = KahanSum::default();
    values.iter().for_each(|&v| ss.add((v - mean).powi(2)));
    let std = if values.len() > 1 {
        (ss.total() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    (mean, median, std)
}

/// One cell of the long-format summary.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub metric: String,
    pub statistic: String,
    pub value: f64,
}

/// Aggregated metrics over replications.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    pub replications: usize,
}

impl SummaryTable {
    pub fn get(&self, method: &str, metric: &str, statistic: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method && r.metric == metric && r.statistic == statistic)
            .map(|r| r.value)
    }

    /// Selection frequency of each candidate for an MS method.
    pub fn ms_accuracy(&self, method: &str, k: usize) -> Vec<f64> {
        (0..k)
            .map(|c| self.get(method, &format!("ms_accuracy_W{}", c + 1), "mean").unwrap_or(0.0))
            .collect()
    }

    /// Mean weight of each candidate for an MA method.
    pub fn ma_weights(&self, method: &str, k: usize) -> Vec<f64> {
        (0..k)
            .map(|c| self.get(method, &format!("ma_weight_W{}", c + 1), "mean").unwrap_or(0.0))
            .collect()
    }

    pub fn methods(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.method) {
                seen.push(r.method.clone());
            }
        }
        seen
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Aggregates replication results, keeping methods in first-seen order.
pub fn summarize(reps: &[ReplicationResult], k: usize) -> SummaryTable {
    let mut order: Vec<String> = Vec::new();
    let mut by_method: BTreeMap<String, Vec<&MethodResult>> = BTreeMap::new();
    for r in reps {
        for m in &r.methods {
            if !by_method.contains_key(&m.method) {
                order.push(m.method.clone());
            }
            by_method.entry(m.method.clone()).or_default().push(m);
        }
    }
    let mut rows = Vec::new();
    let mut push = |method: &str, metric: &str, stat: &str, value: f64| {
        rows.push(SummaryRow {
            method: method.into(),
            metric: metric.into(),
            statistic: stat.into(),
            value,
        })
    };
    for method in &order {
        let all = &by_method[method];
        let ok: Vec<&MethodResult> = all.iter().copied().filter(|m| m.ok()).collect();
        push(method, "replications", "count", ok.len() as f64);
        push(method, "failures", "count", (all.len() - ok.len()) as f64);
        push(method, "nonconverged", "count", ok.iter().filter(|m| !m.converged).count() as f64);
        if ok.is_empty() {
            continue;
        }
        let mut series: Vec<(String, Vec<f64>)> = Vec::new();
        for m in &ok {
            for (name, v) in m.metrics() {
                if name == "selected" || name.starts_with("weight_") {
                    continue;
                }
                match series.iter_mut().find(|(s, _)| *s == name) {
                    Some((_, vals)) => vals.push(v),
                    None => series.push((name, vec![v])),
                }
            }
        }
        for (name, vals) in &series {
            let (mean, median, std) = describe(vals);
            push(method, name, "mean", mean);
            push(method, name, "median", median);
            push(method, name, "std", std);
        }
        if ok.iter().any(|m| m.selected.is_some()) {
            let total = ok.len() as f64;
            for c in 0..k {
                let hits = ok.iter().filter(|m| m.selected == Some(c)).count() as f64;
                push(method, &format!("ms_accuracy_W{}", c + 1), "mean", hits / total);
            }
        }
        if ok.iter().any(|m| m.weights.is_some()) {
            let total = ok.len() as f64;
            for c in 0..k {
                let mut s = KahanSum::default();
                ok.iter().filter_map(|m| m.weights.as_ref()).for_each(|w| s.add(w[c]));
                push(method, &format!("ma_weight_W{}", c + 1), "mean", s.total() / total);
            }
        }
    }
    SummaryTable {
        rows,
        replications: reps.len(),
    }
}

/// Replication results and their summary.
#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub replications: Vec<ReplicationResult>,
    pub summary: SummaryTable,
}

/// Runs every replication on the current rayon pool and summarizes them.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    let exp = Experiment::new(config.clone())?;
    info!(
        "running {} replications with {} candidates (n = {})",
        config.replications,
        exp.candidates.len(),
        config.n
    );
    let replications: Vec<ReplicationResult> = (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(&exp, r))
        .collect();
    let summary = summarize(&replications, exp.candidates.len());
    Ok(ExperimentRun { replications, summary })
}

/// Per-replication rows in long format.
pub fn write_replications_csv(reps: &[ReplicationResult], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "method", "metric", "value"])?;
    for r in reps {
        for m in &r.methods {
            if !m.ok() {
                w.write_record([r.rep.to_string(), m.method.clone(), "failed".into(), "1".into()])?;
                continue;
            }
            for (name, v) in m.metrics() {
                w.write_record([r.rep.to_string(), m.method.clone(), name, format!("{v}")])?;
            }
            w.write_record([
                r.rep.to_string(),
                m.method.clone(),
                "converged".into(),
                (m.converged as u8).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sidecar describing how a set of outputs was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMeta {
    pub config_sha256: String,
    pub library_version: String,
    pub replications: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub unix_time: Option<u64>,
}

/// Writes `summary.csv`, `replications.csv` and `meta.json` into `dir`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, run: &ExperimentRun, with_time: bool) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.summary
        .write_csv(std::io::BufWriter::new(std::fs::File::create(dir.join("summary.csv"))?))?;
    write_replications_csv(
        &run.replications,
        std::io::BufWriter::new(std::fs::File::create(dir.join("replications.csv"))?),
    )?;
    let meta = RunMeta {
        config_sha256: config.hash()?,
        library_version: env!("CARGO_PKG_VERSION").into(),
        replications: config.replications,
        seed: config.seed,
        unix_time: with_time.then(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        }),
    };
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Controls for [`split_evaluate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitOptions {
    pub splits: usize,
    /// Share of nodes used for training.
    pub ratio: f64,
    pub seed: u64,
    pub omega_source: Option<usize>,
    pub island_policy: IslandPolicy,
    pub fit: FitOptions,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            splits: 10,
            ratio: 0.5,
            seed: 0,
            omega_source: None,
            island_policy: IslandPolicy::DropToZero,
            fit: FitOptions::default(),
        }
    }
}

/// Train and test mean squared residuals of one method on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitRow {
    pub split: usize,
    pub method: String,
    pub train_mse: Vec<f64>,
    pub test_mse: Vec<f64>,
    pub selected: Option<usize>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitReport {
    pub rows: Vec<SplitRow>,
    /// Rows left without neighbours by restriction, per split and candidate (train then test).
    pub islands: Vec<Vec<(usize, usize)>>,
}

impl SplitReport {
    /// Average over splits of one method's train and test MSE.
    pub fn mean(&self, method: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let rows: Vec<&SplitRow> = self.rows.iter().filter(|r| r.method == method).collect();
        let first = rows.first()?;
        let q = first.train_mse.len();
        let avg = |f: &dyn Fn(&SplitRow) -> &Vec<f64>| -> Vec<f64> {
            (0..q)
                .map(|j| rows.iter().map(|r| f(r)[j]).sum::<f64>() / rows.len() as f64)
                .collect()
        };
        Some((avg(&|r| &r.train_mse), avg(&|r| &r.test_mse)))
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["split", "method", "response", "train_mse", "test_mse"])?;
        for r in &self.rows {
            for j in 0..r.train_mse.len() {
                w.write_record([
                    r.split.to_string(),
                    r.method.clone(),
                    (j + 1).to_string(),
                    format!("{}", r.train_mse[j]),
                    format!("{}", r.test_mse[j]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn residual_mse(y: &[f64], fitted: &[f64], n: usize) -> Vec<f64> {
    mse_per_response(fitted, y, n, MseNormalization::Mean)
}

/// `Ŝ⁻¹X̃β̃` on another graph, using a training fit's `D̂` and `β̃`.
fn predict(f: &CandidateFit, w: &SpatialWeights, x: &DenseMatrix) -> Result<Vec<f64>> {
    let solver = SpatialSolver::new(&f.d_hat, w)?;
    solver.solve(&xtilde_apply(x, f.d_hat.nrows(), f.beta_tilde.as_slice()))
}

/// Repeated random train/test node splits: fit on the training subgraph,
/// predict the test subgraph with the fitted parameters, selection and weights.
pub fn split_evaluate(data: &Dataset, candidates: &[SpatialWeights], opts: &SplitOptions) -> Result<SplitReport> {
    let n = data.n();
    if opts.splits == 0 {
        return Err(MsarError::InvalidParameter("need at least one split".into()));
    }
    if !(opts.ratio > 0.0 && opts.ratio < 1.0) {
        return Err(MsarError::InvalidParameter(format!(
            "training ratio must lie in (0, 1), got {}",
            opts.ratio
        )));
    }
    let n_train = (opts.ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(MsarError::InvalidParameter(format!(
            "ratio {} leaves an empty training or test set for n = {n}",
            opts.ratio
        )));
    }
    if candidates.is_empty() {
        return Err(MsarError::InvalidParameter("empty candidate set".into()));
    }
    if let Some(w) = candidates.iter().find(|w| w.n() != n) {
        return Err(MsarError::DimensionMismatch(format!(
            "candidate is {0}x{0} but data has {n} rows",
            w.n()
        )));
    }
    let q = data.q();
    let results = (0..opts.splits)
        .into_par_iter()
        .map(|s| -> Result<(Vec<SplitRow>, Vec<(usize, usize)>)> {
            let mut rng = ChaCha20Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let mut nodes: Vec<usize> = (0..n).collect();
            nodes.shuffle(&mut rng);
            let (mut train, mut test) = (nodes[..n_train].to_vec(), nodes[n_train..].to_vec());
            train.sort_unstable();
            test.sort_unstable();
            let train_data = data.subset(&train);
            let test_data = data.subset(&test);
            let mut islands = Vec::new();
            let mut restrict = |nodes: &[usize]| -> Result<Vec<SpatialWeights>> {
                candidates
                    .iter()
                    .map(|w| {
                        let r = w.restrict(nodes)?;
                        let isl = island_count(&r);
                        islands.push(isl);
                        row_normalize(&r, opts.island_policy)
                    })
                    .collect()
            };
            let w_train = restrict(&train)?;
            let w_test = restrict(&test)?;
            let counts: Vec<(usize, usize)> = (0..candidates.len())
                .map(|k| (islands[k], islands[candidates.len() + k]))
                .collect();

            let fits = w_train
                .par_iter()
                .enumerate()
                .map(|(k, w)| fit(&train_data, w, &opts.fit).map(|f| f.with_index(k)))
                .collect::<Result<Vec<_>>>()?;
            let omega = omega_from_fits(&fits, &w_train, opts.omega_source)?;
            let report = evaluate_with(&train_data, &w_train, fits, omega)?;
            let preds = report
                .fits
                .iter()
                .zip(&w_test)
                .map(|(f, w)| predict(f, w, &test_data.x))
                .collect::<Result<Vec<_>>>()?;

            let (ytr, yte) = (train_data.y_vec(), test_data.y_vec());
            let (ntr, nte) = (train_data.n(), test_data.n());
            let mut rows = Vec::new();
            for (k, f) in report.fits.iter().enumerate() {
                rows.push(SplitRow {
                    split: s,
                    method: format!("W{}", k + 1),
                    train_mse: residual_mse(ytr, f.mu_tilde.as_slice(), ntr),
                    test_mse: residual_mse(yte, &preds[k], nte),
                    selected: None,
                    weights: None,
                });
            }
            let k = report.selected;
            rows.push(SplitRow {
                split: s,
                method: "MS".into(),
                train_mse: rows[k].train_mse.clone(),
                test_mse: rows[k].test_mse.clone(),
                selected: Some(k),
                weights: None,
            });
            let (wv, mu_tr, _) = average_report(&report, &train_data, &w_train, DEFAULT_QP_TOL)?;
            let mut mu_te = vec![0.0; nte * q];
            for (pk, &wk) in preds.iter().zip(&wv.w) {
                for (a, b) in mu_te.iter_mut().zip(pk) {
                    *a += wk * b;
                }
            }
            rows.push(SplitRow {
                split: s,
                method: "MA".into(),
                train_mse: residual_mse(ytr, mu_tr.as_slice(), ntr),
                test_mse: residual_mse(yte, &mu_te, nte),
                selected: None,
                weights: Some(wv.w),
            });
            Ok((rows, counts))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = SplitReport {
        rows: Vec::new(),
        islands: Vec::new(),
    };
    for (rows, counts) in results {
        if counts.iter().any(|&(a, b)| a + b > 0) {
            info!("split {}: island rows per candidate {counts:?}", rows[0].split);
        }
        report.rows.extend(rows);
        report.islands.push(counts);
    }
    Ok(report)
}
