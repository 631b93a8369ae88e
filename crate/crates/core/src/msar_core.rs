//! The multivariate spatial autoregressive model `Y = WYD + XB + E`:
//! parameters, data, simulation, the least-squares objective and estimation.

use std::path::Path;
use std::sync::Arc;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MsarError, Result};
use crate::profile::{s_apply, xtilde_apply, Profile, ProfilePoint};
use crate::solver::SpatialSolver;
use crate::tensor_ops::{kron, DenseMatrix, DenseVector};
use crate::weights::SpatialWeights;

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(d: &DenseMatrix) -> f64 {
    if d.nrows() == 1 {
        return d[(0, 0)].abs();
    }
    match d.clone().try_schur(f64::EPSILON, 10_000) {
        Some(schur) => schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max),
        None => gelfand_radius(d),
    }
}

/// `lim ‖Dᵏ‖^{1/k}` by repeated normalized squaring, for matrices where the
/// QR iteration stalls (e.g. permutations).
fn gelfand_radius(d: &DenseMatrix) -> f64 {
    let mut m = d.clone();
    let mut log_scale = 0.0;
    let mut k = 1.0;
    for _ in 0..40 {
        let norm = m.norm();
        if norm == 0.0 {
            return 0.0;
        }
        m /= norm;
        log_scale += norm.ln() / k;
        m = &m * &m;
        k *= 2.0;
    }
    log_scale.exp()
}

fn rows_of(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DenseMatrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(MsarError::Parse(format!("{name} must be a non-empty rectangular array")));
    }
    Ok(DenseMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// `(D, B, Σe)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsJson", into = "ParamsJson")]
pub struct MsarParams {
    pub d: DenseMatrix,
    pub b: DenseMatrix,
    pub sigma_e: DenseMatrix,
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "Sigma_e")]
    sigma_e: Vec<Vec<f64>>,
}

impl TryFrom<ParamsJson> for MsarParams {
    type Error = MsarError;

    fn try_from(j: ParamsJson) -> Result<Self> {
        Ok(Self {
            d: from_rows("D", &j.d)?,
            b: from_rows("B", &j.b)?,
            sigma_e: from_rows("Sigma_e", &j.sigma_e)?,
        })
    }
}

impl From<MsarParams> for ParamsJson {
    fn from(p: MsarParams) -> Self {
        Self {
            d: rows_of(&p.d),
            b: rows_of(&p.b),
            sigma_e: rows_of(&p.sigma_e),
        }
    }
}

impl MsarParams {
    pub fn new(d: DenseMatrix, b: DenseMatrix, sigma_e: DenseMatrix) -> Result<Self> {
        let p = Self { d, b, sigma_e };
        p.validate()?;
        Ok(p)
    }

    pub fn q(&self) -> usize {
        self.d.nrows()
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    /// `β = vec(B)`.
    pub fn beta(&self) -> Vec<f64> {
        self.b.as_slice().to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.d.nrows();
        if self.d.ncols() != q || self.b.ncols() != q || self.sigma_e.shape() != (q, q) {
            return Err(MsarError::DimensionMismatch(format!(
                "D is {:?}, B is {:?}, Sigma_e is {:?}",
                self.d.shape(),
                self.b.shape(),
                self.sigma_e.shape()
            )));
        }
        let all = self.d.iter().chain(self.b.iter()).chain(self.sigma_e.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(MsarError::InvalidParameter("non-finite parameter entry".into()));
        }
        let rho = spectral_radius(&self.d);
        if rho >= 1.0 {
            return Err(MsarError::UnstableD(rho));
        }
        check_spd("Sigma_e", &self.sigma_e)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

pub(crate) fn check_spd(name: &str, m: &DenseMatrix) -> Result<()> {
    if !m.is_square() || (m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
        return Err(MsarError::NotPositiveDefinite(format!("{name} is not symmetric")));
    }
    if m.clone().cholesky().is_none() {
        return Err(MsarError::NotPositiveDefinite(name.to_string()));
    }
    Ok(())
}

/// Distribution family of the error rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorKind {
    Gaussian,
    StudentT { df: f64 },
}

/// Error rows are i.i.d. with the given family and scale matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorLaw {
    pub kind: ErrorKind,
    pub sigma_e: DenseMatrix,
}

impl ErrorLaw {
    pub fn new(kind: ErrorKind, sigma_e: DenseMatrix) -> Result<Self> {
        if let ErrorKind::StudentT { df } = kind {
            if !(df > 2.0) {
                return Err(MsarError::InvalidParameter(format!(
                    "student-t degrees of freedom must exceed 2, got {df}"
                )));
            }
        }
        check_spd("error scale matrix", &sigma_e)?;
        Ok(Self { kind, sigma_e })
    }

    pub fn gaussian(sigma_e: DenseMatrix) -> Result<Self> {
        Self::new(ErrorKind::Gaussian, sigma_e)
    }

    pub fn student_t(sigma_e: DenseMatrix, df: f64) -> Result<Self> {
        Self::new(ErrorKind::StudentT { df }, sigma_e)
    }

    /// Draws an `n×q` error matrix, one row at a time.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DenseMatrix {
        let q = self.sigma_e.nrows();
        let l = self
            .sigma_e
            .clone()
            .cholesky()
            .expect("validated in ErrorLaw::new")
            .l();
        let chi = match self.kind {
            ErrorKind::StudentT { df } => Some((df, ChiSquared::new(df).expect("df > 2"))),
            ErrorKind::Gaussian => None,
        };
        let mut e = DenseMatrix::zeros(n, q);
        let mut z = DenseVector::zeros(q);
        for u in 0..n {
            for v in z.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let mut row = &l * &z;
            if let Some((df, chi)) = &chi {
                let s: f64 = chi.sample(rng);
                row /= (s / df).sqrt();
            }
            e.row_mut(u).copy_from(&row.transpose());
        }
        e
    }
}

/// Responses `Y` (`n×q`) and covariates `X` (`n×p`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DenseMatrix,
    pub x: DenseMatrix,
}

impl Dataset {
    pub fn new(y: DenseMatrix, x: DenseMatrix) -> Result<Self> {
        if y.nrows() != x.nrows() {
            return Err(MsarError::DimensionMismatch(format!(
                "Y has {} rows but X has {}",
                y.nrows(),
                x.nrows()
            )));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(MsarError::InvalidParameter("non-finite data entry".into()));
        }
        Ok(Self { y, x })
    }

    pub fn n(&self) -> usize {
        self.y.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// `vec(Y)`.
    pub fn y_vec(&self) -> &[f64] {
        self.y.as_slice()
    }

    /// Keeps only the listed rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            y: self.y.select_rows(rows),
            x: self.x.select_rows(rows),
        }
    }

    /// Single-response dataset for column `j` of `Y`.
    pub fn response(&self, j: usize) -> Self {
        Self {
            y: self.y.columns(j, 1).into_owned(),
            x: self.x.clone(),
        }
    }

    pub fn write_csv(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header: Vec<String> = (1..=self.q())
            .map(|j| format!("y{j}"))
            .chain((1..=self.p()).map(|a| format!("x{a}")))
            .collect();
        w.write_record(&header)?;
        for u in 0..self.n() {
            let rec: Vec<String> = self
                .y
                .row(u)
                .iter()
                .chain(self.x.row(u).iter())
                .map(|v| format!("{v:?}"))
                .collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv(input: impl std::io::Read) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let mut ycols = Vec::new();
        let mut xcols = Vec::new();
        for (k, name) in header.iter().enumerate() {
            let name = name.trim();
            let idx = |prefix: char| -> Option<usize> {
                name.strip_prefix(prefix)?.parse::<usize>().ok().filter(|&i| i >= 1)
            };
            if let Some(i) = idx('y') {
                ycols.push((i, k));
            } else if let Some(i) = idx('x') {
                xcols.push((i, k));
            } else {
                return Err(MsarError::Parse(format!("unexpected column '{name}'")));
            }
        }
        ycols.sort_unstable();
        xcols.sort_unstable();
        let contiguous = |c: &[(usize, usize)]| c.iter().enumerate().all(|(t, &(i, _))| i == t + 1);
        if ycols.is_empty() || xcols.is_empty() || !contiguous(&ycols) || !contiguous(&xcols) {
            return Err(MsarError::Parse(
                "header must name y1..yq and x1..xp".into(),
            ));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(crate::weights::parse_f64)
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != header.len() {
                return Err(MsarError::Parse("ragged CSV row".into()));
            }
            rows.push(vals);
        }
        let n = rows.len();
        let y = DenseMatrix::from_fn(n, ycols.len(), |u, j| rows[u][ycols[j].1]);
        let x = DenseMatrix::from_fn(n, xcols.len(), |u, a| rows[u][xcols[a].1]);
        Self::new(y, x)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Numeric table with a header row, e.g. covariates `x1..xp`.
pub fn load_matrix_csv(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let path = path.as_ref();
    let rows = crate::weights::read_numeric_csv(path)?;
    let cols = rows.first().map_or(0, Vec::len);
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(MsarError::Parse(format!("{}: empty or ragged table", path.display())));
    }
    Ok(DenseMatrix::from_row_slice(rows.len(), cols, &rows.concat()))
}

fn check_d(d: &DenseMatrix) -> Result<()> {
    let rho = spectral_radius(d);
    if !(rho < 1.0) {
        return Err(MsarError::UnstableD(rho));
    }
    Ok(())
}

/// Dense `S = I_{nq} − Dᵀ⊗W`.
pub fn build_s(d: &DenseMatrix, w: &SpatialWeights) -> Result<DenseMatrix> {
    check_d(d)?;
    let nq = w.n() * d.nrows();
    Ok(DenseMatrix::identity(nq, nq) - kron(&d.transpose(), &w.to_dense())?)
}

/// Mean `S⁻¹X̃β` and covariance `S⁻¹(Σe⊗I)S⁻ᵀ` of `vec(Y)`.
pub fn mean_and_cov(
    params: &MsarParams,
    w: &SpatialWeights,
    x: &DenseMatrix,
) -> Result<(DenseVector, DenseMatrix)> {
    params.validate()?;
    check_dims(params, w, x)?;
    let n = w.n();
    let solver = SpatialSolver::new(&params.d, w)?;
    let mu = solver.solve(&xtilde_apply(x, params.q(), &params.beta()))?;
    let g = kron(&params.sigma_e, &DenseMatrix::identity(n, n))?;
    let t = solver.solve_matrix(&g)?;
    let omega = solver.solve_matrix(&t.transpose())?;
    let omega = (&omega + omega.transpose()) * 0.5;
    Ok((DenseVector::from_vec(mu), omega))
}

fn check_dims(params: &MsarParams, w: &SpatialWeights, x: &DenseMatrix) -> Result<()> {
    if x.nrows() != w.n() || x.ncols() != params.p() {
        return Err(MsarError::DimensionMismatch(format!(
            "W is {0}x{0}, X is {1}x{2}, B has {3} rows",
            w.n(),
            x.nrows(),
            x.ncols(),
            params.p()
        )));
    }
    Ok(())
}

/// `Y = unvec(S⁻¹(X̃β + vec(E)))` for a given error matrix.
pub fn simulate_from_errors(
    params: &MsarParams,
    w: &SpatialWeights,
    x: &DenseMatrix,
    errors: &DenseMatrix,
) -> Result<Dataset> {
    params.validate()?;
    check_dims(params, w, x)?;
    if errors.shape() != (w.n(), params.q()) {
        return Err(MsarError::DimensionMismatch("error matrix must be n x q".into()));
    }
    let solver = SpatialSolver::new(&params.d, w)?;
    simulate_with_solver(params, &solver, x, errors)
}

pub(crate) fn simulate_with_solver(
    params: &MsarParams,
    solver: &SpatialSolver,
    x: &DenseMatrix,
    errors: &DenseMatrix,
) -> Result<Dataset> {
    let mut rhs = xtilde_apply(x, params.q(), &params.beta());
    for (r, e) in rhs.iter_mut().zip(errors.as_slice()) {
        *r += e;
    }
    let y = solver.solve(&rhs)?;
    Dataset::new(DenseMatrix::from_vec(x.nrows(), params.q(), y), x.clone())
}

/// Simulates one dataset with a generator seeded from `seed`.
pub fn simulate(
    params: &MsarParams,
    w: &SpatialWeights,
    x: &DenseMatrix,
    law: &ErrorLaw,
    seed: u64,
) -> Result<Dataset> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    simulate_with_rng(params, w, x, law, &mut rng)
}

pub fn simulate_with_rng<R: Rng + ?Sized>(
    params: &MsarParams,
    w: &SpatialWeights,
    x: &DenseMatrix,
    law: &ErrorLaw,
    rng: &mut R,
) -> Result<Dataset> {
    if law.sigma_e.nrows() != params.q() {
        return Err(MsarError::DimensionMismatch("error law dimension differs from q".into()));
    }
    let e = law.draw(w.n(), rng);
    simulate_from_errors(params, w, x, &e)
}

/// `Q = ‖M Sᵀ(Σe⁻¹⊗I)(Sy − X̃β)‖²` at the given parameters.
pub fn objective_q(params: &MsarParams, w: &SpatialWeights, data: &Dataset) -> Result<f64> {
    params.validate()?;
    check_dims(params, w, &data.x)?;
    if data.q() != params.q() {
        return Err(MsarError::DimensionMismatch("data and parameters disagree on q".into()));
    }
    let prof = Profile::new(w, &data.x, data.y_vec(), &params.sigma_e)?;
    let m = prof.m_at(&params.d);
    let sy = s_apply(&params.d, w, data.y_vec());
    let xb = xtilde_apply(&data.x, params.q(), &params.beta());
    let r: Vec<f64> = sy.iter().zip(&xb).map(|(a, b)| a - b).collect();
    let f = prof.a_apply_with(&params.d, &m, &r);
    Ok(f.iter().map(|v| v * v).sum())
}

/// Estimation controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Stop when successive `D̂` differ by less than this (max-abs).
    pub tol: f64,
    pub max_iter: usize,
    /// Required max-abs gradient of the objective in `vec(D)` at the returned point.
    pub grad_tol: f64,
    /// Iteration cap for each inner quasi-Newton solve.
    pub max_inner_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            grad_tol: 1e-6,
            max_inner_iter: 500,
        }
    }
}

/// Per-candidate estimation output.
#[derive(Debug, Clone, Serialize)]
pub struct CandidateFit {
    pub candidate_index: usize,
    pub d_hat: DenseMatrix,
    pub sigma_hat: DenseMatrix,
    pub beta_gls: DenseVector,
    pub beta_tilde: DenseVector,
    pub mu_tilde: DenseVector,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub(crate) solver: Option<Arc<SpatialSolver>>,
}

impl CandidateFit {
    pub fn with_index(mut self, k: usize) -> Self {
        self.candidate_index = k;
        self
    }

    /// The cached factorization of `Ŝ`, rebuilt if this fit was deserialized or cloned without it.
    /// Replaces `D̂` and drops the cached factorization of `S`.
    pub fn set_d_hat(&mut self, d: DenseMatrix) {
        self.d_hat = d;
        self.solver = None;
    }

    pub fn solver(&self, w: &SpatialWeights) -> Result<Arc<SpatialSolver>> {
        match &self.solver {
            Some(s) => Ok(Arc::clone(s)),
            None => Ok(Arc::new(SpatialSolver::new(&self.d_hat, w)?)),
        }
    }

    /// `B̂` from the profiled least-squares coefficients.
    pub fn b_gls(&self, p: usize) -> DenseMatrix {
        DenseMatrix::from_column_slice(p, self.d_hat.nrows(), self.beta_gls.as_slice())
    }

    pub fn b_tilde(&self, p: usize) -> DenseMatrix {
        DenseMatrix::from_column_slice(p, self.d_hat.nrows(), self.beta_tilde.as_slice())
    }
}

/// Blockwise projection onto the column space of `X̃ = I_q⊗X`.
pub(crate) struct Projector {
    x: DenseMatrix,
    xtx: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Projector {
    pub fn new(x: &DenseMatrix) -> Result<Self> {
        let xtx = (x.transpose() * x)
            .cholesky()
            .ok_or_else(|| MsarError::Singular("X^T X".into()))?;
        Ok(Self { x: x.clone(), xtx })
    }

    /// `(X̃ᵀX̃)⁻¹X̃ᵀ v`.
    pub fn coef(&self, v: &[f64]) -> Vec<f64> {
        let n = self.x.nrows();
        let q = v.len() / n;
        let mut out = Vec::with_capacity(self.x.ncols() * q);
        for j in 0..q {
            let block = DenseVector::from_column_slice(&v[j * n..(j + 1) * n]);
            out.extend(self.xtx.solve(&(self.x.transpose() * block)).iter());
        }
        out
    }

    /// `P v` with `P = X̃(X̃ᵀX̃)⁻¹X̃ᵀ`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let q = v.len() / self.x.nrows();
        xtilde_apply(&self.x, q, &self.coef(v))
    }
}

/// `μ̃ = S⁻¹ P S y` given an already-factorized `S`.
pub(crate) fn mu_tilde_with(
    d: &DenseMatrix,
    w: &SpatialWeights,
    proj: &Projector,
    solver: &SpatialSolver,
    y: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sy = s_apply(d, w, y);
    let beta_tilde = proj.coef(&sy);
    let q = d.nrows();
    let mu = solver.solve(&xtilde_apply(&proj.x, q, &beta_tilde))?;
    Ok((mu, beta_tilde))
}

/// `μ̃ = S⁻¹ P S y` for the given `D̂`.
pub fn mu_tilde_of(d_hat: &DenseMatrix, w: &SpatialWeights, data: &Dataset) -> Result<DenseVector> {
    check_d(d_hat)?;
    if w.n() != data.n() || d_hat.nrows() != data.q() {
        return Err(MsarError::DimensionMismatch("D, W and data disagree".into()));
    }
    let proj = Projector::new(&data.x)?;
    let solver = SpatialSolver::new(d_hat, w)?;
    let (mu, _) = mu_tilde_with(d_hat, w, &proj, &solver, data.y_vec())?;
    Ok(DenseVector::from_vec(mu))
}

/// Largest spectral radius a fitted `D` may reach.
pub const RHO_CAP: f64 = 0.99;

/// `D ← D·0.99/ρ(D)` when `ρ(D) > 0.99`.
fn stabilize(d: &mut DenseMatrix) {
    let rho = spectral_radius(d);
    if rho > RHO_CAP {
        *d *= RHO_CAP / rho;
    }
}

pub(crate) struct InnerResult {
    pub point: ProfilePoint,
    pub grad: DenseVector,
    pub iterations: usize,
}

/// Quasi-Newton minimization of the profiled objective over `vec(D)`.
pub(crate) fn minimize_d(prof: &Profile<'_>, d0: &DenseMatrix, gtol: f64, max_iter: usize) -> Result<InnerResult> {
    let q = prof.q;
    let nd = q * q;
    let mut pt = prof.eval(d0)?;
    let mut g = prof.gradient(&pt);
    let mut hinv = DenseMatrix::identity(nd, nd);
    let mut fresh = true;
    let mut it = 0;
    while it < max_iter {
        if g.amax() <= gtol {
            break;
        }
        it += 1;
        let mut dir = -(&hinv * &g);
        if dir.dot(&g) >= 0.0 {
            hinv = DenseMatrix::identity(nd, nd);
            fresh = true;
            dir = -g.clone();
        }
        if fresh {
            // keep the first trial step inside a modest box
            let scale = dir.amax();
            if scale > 0.25 {
                dir *= 0.25 / scale;
            }
        }
        let x = DenseVector::from_column_slice(pt.d.as_slice());
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut trial = DenseMatrix::from_column_slice(q, q, (&x + &dir * alpha).as_slice());
            stabilize(&mut trial);
            let step = DenseVector::from_column_slice(trial.as_slice()) - &x;
            if step.amax() == 0.0 {
                break;
            }
            if let Ok(tp) = prof.eval(&trial) {
                if tp.value <= pt.value + 1e-4 * g.dot(&step) {
                    let gt = prof.gradient(&tp);
                    accepted = Some((tp, step, gt));
                    break;
                }
                // near the optimum the decrease drowns in rounding; fall back to the gradient
                if tp.value - pt.value <= 1e-13 * pt.value.abs().max(1.0) {
                    let gt = prof.gradient(&tp);
                    if gt.amax() < g.amax() {
                        accepted = Some((tp, step, gt));
                        break;
                    }
                }
            }
            alpha *= 0.5;
        }
        let Some((tp, s, g_new)) = accepted else {
            if fresh {
                break;
            }
            hinv = DenseMatrix::identity(nd, nd);
            fresh = true;
            continue;
        };
        let yv = &g_new - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            if fresh {
                hinv *= sy / yv.dot(&yv);
            }
            let rho = 1.0 / sy;
            let i = DenseMatrix::identity(nd, nd);
            let left = &i - &s * yv.transpose() * rho;
            let right = &i - &yv * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
            fresh = false;
        }
        let small = s.amax() < 1e-15;
        pt = tp;
        g = g_new;
        if small {
            break;
        }
    }
    Ok(InnerResult {
        point: pt,
        grad: g,
        iterations: it,
    })
}

fn residual_covariance(r: &[f64], n: usize, q: usize) -> DenseMatrix {
    let e = DenseMatrix::from_column_slice(n, q, r);
    let s = e.transpose() * &e / n as f64;
    (&s + s.transpose()) * 0.5
}

struct Alternation {
    d: DenseMatrix,
    sigma: DenseMatrix,
    last: InnerResult,
    converged: bool,
    iterations: usize,
}

/// Alternates the `D` solve and the `Σ̂e` update from `d0`, with `Σ̂e` initialized
/// from the profiled residuals at `d0`.
fn alternate(
    data: &Dataset,
    w: &SpatialWeights,
    proj: &Projector,
    d0: DenseMatrix,
    opts: &FitOptions,
) -> Result<Alternation> {
    let (n, q) = (data.n(), data.q());
    let y = data.y_vec();
    let sy = s_apply(&d0, w, y);
    let fitted = proj.project(&sy);
    let resid: Vec<f64> = sy.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    let mut sigma = residual_covariance(&resid, n, q);
    let mut d = d0;

    let inner_gtol = opts.grad_tol * 1e-2;
    let mut converged = false;
    let mut iterations = 0;
    let mut last = None;
    let mut pinned = 0;
    for outer in 1..=opts.max_iter {
        iterations = outer;
        check_spd("residual covariance", &sigma)?;
        let prof = Profile::new(w, &data.x, y, &sigma)?;
        let res = minimize_d(&prof, &d, inner_gtol, opts.max_inner_iter)?;
        let change = (&res.point.d - &d).amax();
        d = res.point.d.clone();
        debug!(
            "outer {outer}: Q = {:.6e}, |grad| = {:.3e}, inner its = {}, change = {change:.3e}",
            res.point.value,
            res.grad.amax(),
            res.iterations
        );
        let next_sigma = residual_covariance(&res.point.r, n, q);
        last = Some(res);
        if change < opts.tol {
            converged = true;
            break;
        }
        // a minimizer sitting on the stability cap only cycles with Σ̂e
        if spectral_radius(&d) >= RHO_CAP * (1.0 - 1e-9) {
            pinned += 1;
            if pinned >= 3 {
                break;
            }
        } else {
            pinned = 0;
        }
        sigma = next_sigma;
    }
    let last = last.expect("at least one outer iteration");
    converged &= last.grad.amax() < opts.grad_tol;
    Ok(Alternation {
        d,
        sigma,
        last,
        converged,
        iterations,
    })
}

/// Least-squares estimation of `(D, B, Σe)` for one candidate `W`.
///
/// Alternates a quasi-Newton solve over `vec(D)` (with `β` profiled out and `Σe`
/// frozen) and the update `Σ̂e = ÊᵀÊ/n`. The returned `Σ̂e` is the one the final
/// `D̂` solve used.
pub fn fit(data: &Dataset, w: &SpatialWeights, opts: &FitOptions) -> Result<CandidateFit> {
    let (n, p, q) = (data.n(), data.p(), data.q());
    if w.n() != n {
        return Err(MsarError::DimensionMismatch(format!(
            "W is {0}x{0} but data has {n} rows",
            w.n()
        )));
    }
    if n <= p * q {
        return Err(MsarError::InvalidParameter(format!(
            "need n > pq, got n = {n}, p = {p}, q = {q}"
        )));
    }
    if !(opts.tol > 0.0 && opts.grad_tol > 0.0 && opts.max_iter >= 1) {
        return Err(MsarError::InvalidParameter("fit tolerances must be positive".into()));
    }
    let proj = Projector::new(&data.x)?;
    let y = data.y_vec();

    let Alternation {
        d,
        sigma,
        last: res,
        converged,
        iterations,
    } = alternate(data, w, &proj, DenseMatrix::zeros(q, q), opts)?;
    let grad_norm = res.grad.amax();

    check_d(&d)?;
    let solver = SpatialSolver::new(&d, w)?;
    let (mu, beta_tilde) = mu_tilde_with(&d, w, &proj, &solver, y)?;
    Ok(CandidateFit {
        candidate_index: 0,
        d_hat: d,
        sigma_hat: sigma,
        beta_gls: DenseVector::from_vec(res.point.beta),
        beta_tilde: DenseVector::from_vec(beta_tilde),
        mu_tilde: DenseVector::from_vec(mu),
        converged,
        iterations,
        objective: res.point.value,
        grad_norm,
        solver: Some(Arc::new(solver)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::xtilde_dense;
    use crate::weights::{lattice_weights, row_normalize, IslandPolicy, LatticeScheme, LatticeSpec};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_radius_of_scaled_cycles() {
        for n in [2, 3, 5, 8, 30] {
            let shift = DenseMatrix::from_fn(n, n, |i, j| if j == (i + 1) % n { 0.7 } else { 0.0 });
            assert!((spectral_radius(&shift) - 0.7).abs() < 1e-9, "n = {n}");
        }
        let rot = DenseMatrix::from_row_slice(2, 2, &[0.0, -0.5, 0.5, 0.0]);
        assert!((spectral_radius(&rot) - 0.5).abs() < 1e-12);
        assert_eq!(spectral_radius(&DenseMatrix::zeros(3, 3)), 0.0);
        assert!((gelfand_radius(&DenseMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5])) - 0.5).abs() < 1e-6);
    }

    fn lattice(rows: usize, cols: usize, scheme: LatticeScheme) -> SpatialWeights {
        row_normalize(
            &lattice_weights(&LatticeSpec::new(rows, cols, scheme)).unwrap(),
            IslandPolicy::Error,
        )
        .unwrap()
    }

    fn case1() -> MsarParams {
        MsarParams::new(
            DenseMatrix::from_row_slice(2, 2, &[0.3, -0.3, 0.5, 0.4]),
            DenseMatrix::from_row_slice(2, 2, &[-0.5, 1.0, 1.3, 0.3]),
            DenseMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.8]),
        )
        .unwrap()
    }

    fn covariates(n: usize, p: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(n, p, |_, _| rng.random_range(-1.5..1.5))
    }

    #[test]
    fn params_validation() {
        let p = case1();
        let mut bad = p.clone();
        bad.d = DenseMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 0.1]);
        assert!(matches!(bad.validate(), Err(MsarError::UnstableD(_))));
        let mut bad = p.clone();
        bad.sigma_e = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(bad.validate(), Err(MsarError::NotPositiveDefinite(_))));
        assert!((spectral_radius(&p.d) - (0.12f64 + 0.15 + 0.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn params_json_round_trip_is_row_major() {
        let p = case1();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"D\":[[0.3,-0.3],[0.5,0.4]]"));
        assert!(s.contains("\"Sigma_e\""));
        assert_eq!(MsarParams::from_json_str(&s).unwrap(), p);
        assert!(MsarParams::from_json_str(r#"{"D":[[2]],"B":[[1]],"Sigma_e":[[1]]}"#).is_err());
    }

    #[test]
    fn dataset_csv_round_trip() {
        let x = covariates(5, 2, 1);
        let y = covariates(5, 2, 2);
        let data = Dataset::new(y, x).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("y1,y2,x1,x2\n"));
        assert_eq!(Dataset::read_csv(buf.as_slice()).unwrap(), data);
        assert!(Dataset::read_csv("y1,z1\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn build_s_cases() {
        let w = lattice(2, 3, LatticeScheme::Rook);
        let s = build_s(&DenseMatrix::zeros(2, 2), &w).unwrap();
        assert_eq!(s, DenseMatrix::identity(12, 12));
        let s1 = build_s(&DenseMatrix::from_element(1, 1, 0.4), &w).unwrap();
        assert!((s1 - (DenseMatrix::identity(6, 6) - w.to_dense() * 0.4)).amax() < 1e-15);
        assert!(build_s(&DenseMatrix::from_element(1, 1, 1.0), &w).is_err());
    }

    #[test]
    fn build_s_hand_expansion_n2() {
        let w = SpatialWeights::from_triplets(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let d = DenseMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        let s = build_s(&d, &w).unwrap();
        // Dᵀ = [[0.1, 0.3], [0.2, 0.4]]
        let expected = DenseMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, -0.1, 0.0, -0.3, //
                -0.1, 1.0, -0.3, 0.0, //
                0.0, -0.2, 1.0, -0.4, //
                -0.2, 0.0, -0.4, 1.0,
            ],
        );
        assert!((s - expected).amax() < 1e-15);
    }

    #[test]
    fn mean_and_cov_trivial_cases() {
        let w = lattice(2, 2, LatticeScheme::Queen);
        let x = covariates(4, 2, 3);
        let mut p = case1();
        p.d = DenseMatrix::zeros(2, 2);
        let (mu, omega) = mean_and_cov(&p, &w, &x).unwrap();
        let xt = xtilde_dense(&x, 2);
        assert!((mu - &xt * DenseVector::from_column_slice(p.b.as_slice())).amax() < 1e-14);
        let g = kron(&p.sigma_e, &DenseMatrix::identity(4, 4)).unwrap();
        assert!((omega - g).amax() < 1e-14);
        let mut p = case1();
        p.b = DenseMatrix::zeros(2, 2);
        let (mu, _) = mean_and_cov(&p, &w, &x).unwrap();
        assert_eq!(mu.amax(), 0.0);
    }

    #[test]
    fn omega_symmetric_psd() {
        let w = lattice(3, 3, LatticeScheme::Queen);
        let x = covariates(9, 2, 4);
        let (_, omega) = mean_and_cov(&case1(), &w, &x).unwrap();
        assert!((&omega - omega.transpose()).amax() < 1e-10);
        let min = omega.symmetric_eigenvalues().min();
        assert!(min >= -1e-8);
    }

    #[test]
    fn omega_matches_monte_carlo_covariance() {
        let n = 4;
        let w = lattice(2, 2, LatticeScheme::Rook);
        let x = covariates(n, 2, 5);
        let params = case1();
        let (mu, omega) = mean_and_cov(&params, &w, &x).unwrap();
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let solver = SpatialSolver::new(&params.d, &w).unwrap();
        let reps = 1_000_000;
        let nq = 2 * n;
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        let mut acc = DenseMatrix::zeros(nq, nq);
        let mut acc2 = DenseMatrix::zeros(nq, nq);
        for _ in 0..reps {
            let e = law.draw(n, &mut rng);
            let y = DenseVector::from_vec(solver.solve(e.as_slice()).unwrap());
            let outer = &y * y.transpose();
            acc2 += outer.component_mul(&outer);
            acc += outer;
        }
        let r = reps as f64;
        let mean = &acc / r;
        let var = &acc2 / r - mean.component_mul(&mean);
        for a in 0..nq {
            for b in 0..nq {
                let se = (var[(a, b)] / r).sqrt();
                assert!(
                    (mean[(a, b)] - omega[(a, b)]).abs() < 3.0 * se,
                    "({a},{b}): {} vs {} (se {se})",
                    mean[(a, b)],
                    omega[(a, b)]
                );
            }
        }
        assert_eq!(mu.len(), nq);
    }

    #[test]
    fn simulate_zero_noise_and_determinism() {
        let w = lattice(3, 3, LatticeScheme::Queen);
        let x = covariates(9, 2, 6);
        let params = case1();
        let data = simulate_from_errors(&params, &w, &x, &DenseMatrix::zeros(9, 2)).unwrap();
        let (mu, _) = mean_and_cov(&params, &w, &x).unwrap();
        assert!((DenseVector::from_column_slice(data.y_vec()) - mu).amax() < 1e-12);
        assert!(objective_q(&params, &w, &data).unwrap() < 1e-24);

        let law = ErrorLaw::student_t(params.sigma_e.clone(), 5.0).unwrap();
        let a = simulate(&params, &w, &x, &law, 99).unwrap();
        let b = simulate(&params, &w, &x, &law, 99).unwrap();
        assert_eq!(a, b);
        assert!(ErrorLaw::student_t(params.sigma_e.clone(), 2.0).is_err());
    }

    #[test]
    fn gaussian_rows_have_scale_covariance() {
        let n = 500;
        let w = lattice(20, 25, LatticeScheme::Rook);
        let x = covariates(n, 2, 7);
        let mut params = case1();
        params.d = DenseMatrix::zeros(2, 2);
        params.b = DenseMatrix::zeros(2, 2);
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let data = simulate(&params, &w, &x, &law, 5).unwrap();
        let s = data.y.transpose() * &data.y / n as f64;
        for a in 0..2 {
            for b in 0..2 {
                let sd = ((params.sigma_e[(a, a)] * params.sigma_e[(b, b)]
                    + params.sigma_e[(a, b)].powi(2))
                    / n as f64)
                    .sqrt();
                assert!((s[(a, b)] - params.sigma_e[(a, b)]).abs() < 3.0 * sd);
            }
        }
    }

    #[test]
    fn objective_q1_reduces_to_ols_residual() {
        let w = lattice(3, 4, LatticeScheme::Rook);
        let x = covariates(12, 2, 8);
        let y = covariates(12, 1, 9);
        let data = Dataset::new(y.clone(), x.clone()).unwrap();
        let b = DenseMatrix::from_column_slice(2, 1, &[0.7, -0.2]);
        let params = MsarParams::new(
            DenseMatrix::zeros(1, 1),
            b.clone(),
            DenseMatrix::identity(1, 1),
        )
        .unwrap();
        let q = objective_q(&params, &w, &data).unwrap();
        assert!((q - (y - x * b).norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn objective_permutation_invariant() {
        let n = 5;
        let w = SpatialWeights::from_triplets(
            n,
            &[(0, 1, 0.5), (0, 4, 0.5), (1, 2, 1.0), (2, 0, 0.3), (2, 3, 0.7), (3, 4, 1.0), (4, 0, 1.0)],
        )
        .unwrap();
        let x = covariates(n, 2, 10);
        let y = covariates(n, 2, 11);
        let params = case1();
        let data = Dataset::new(y, x).unwrap();
        let q0 = objective_q(&params, &w, &data).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut inv = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let trip: Vec<_> = w.triplets().into_iter().map(|(a, b, v)| (inv[a], inv[b], v)).collect();
        let wp = SpatialWeights::from_triplets(n, &trip).unwrap();
        let q1 = objective_q(&params, &wp, &data.subset(&perm)).unwrap();
        assert!((q0 - q1).abs() < 1e-12 * q0.max(1.0));
    }

    #[test]
    fn mu_tilde_cases() {
        let n = 6;
        let w = lattice(2, 3, LatticeScheme::Queen);
        let x = covariates(n, 2, 12);
        let y = covariates(n, 2, 13);
        let data = Dataset::new(y, x.clone()).unwrap();
        let xt = xtilde_dense(&x, 2);
        let p = &xt * (xt.transpose() * &xt).try_inverse().unwrap() * xt.transpose();
        let yv = DenseVector::from_column_slice(data.y_vec());
        let mu0 = mu_tilde_of(&DenseMatrix::zeros(2, 2), &w, &data).unwrap();
        assert!((mu0 - &p * &yv).amax() < 1e-12);

        let d = DenseMatrix::from_row_slice(2, 2, &[0.3, -0.3, 0.5, 0.4]);
        let s = build_s(&d, &w).unwrap();
        let sinv = s.clone().try_inverse().unwrap();
        let ptilde = &sinv * &p * &s;
        let mu = mu_tilde_of(&d, &w, &data).unwrap();
        assert!((&mu - &ptilde * &yv).amax() < 1e-12);

        // idempotence and the fixed point
        let again = Dataset::new(DenseMatrix::from_column_slice(n, 2, mu.as_slice()), x.clone()).unwrap();
        let mu2 = mu_tilde_of(&d, &w, &again).unwrap();
        assert!((&mu2 - &mu).amax() < 1e-8);
        let inside = &sinv * &xt * DenseVector::from_column_slice(&[0.2, -1.0, 0.4, 0.9]);
        let fixed = Dataset::new(DenseMatrix::from_column_slice(n, 2, inside.as_slice()), x).unwrap();
        assert!((mu_tilde_of(&d, &w, &fixed).unwrap() - inside).amax() < 1e-12);
    }

    fn fd_gradient(params: &MsarParams, w: &SpatialWeights, data: &Dataset, beta: &[f64]) -> Vec<f64> {
        let q = params.q();
        (0..q * q)
            .map(|c| {
                let h = 1e-6;
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.d[(c % q, c / q)] += delta;
                    p.b = DenseMatrix::from_column_slice(params.p(), q, beta);
                    objective_q(&p, w, data).unwrap()
                };
                (eval(h) - eval(-h)) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn fit_satisfies_first_order_condition() {
        let n = 100;
        let w = lattice(10, 10, LatticeScheme::Rook);
        let x = covariates(n, 2, 14);
        let params = case1();
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let data = simulate(&params, &w, &x, &law, 3).unwrap();
        let f = fit(&data, &w, &FitOptions::default()).unwrap();
        assert!(f.converged, "iterations {} grad {}", f.iterations, f.grad_norm);
        assert!(spectral_radius(&f.d_hat) < 1.0);
        // Gradient of Q at (D̂, β̂, Σ̂), with β held at its profiled value, by finite differences.
        let at = MsarParams {
            d: f.d_hat.clone(),
            b: f.b_gls(2),
            sigma_e: f.sigma_hat.clone(),
        };
        let g = fd_gradient(&at, &w, &data, f.beta_gls.as_slice());
        for gc in g {
            assert!(gc.abs() < 1e-5, "finite-difference gradient {gc}");
        }
        assert!((&f.d_hat - &params.d).norm() < 0.6);
        let again = fit(&data, &w, &FitOptions::default()).unwrap();
        assert_eq!(again.d_hat, f.d_hat);
        let mu = mu_tilde_of(&f.d_hat, &w, &data).unwrap();
        assert!((mu - &f.mu_tilde).amax() < 1e-12);
    }

    #[test]
    fn fit_recovers_ols_when_no_spatial_lag() {
        let n = 400;
        let w = lattice(20, 20, LatticeScheme::Queen);
        let x = covariates(n, 2, 15);
        let mut params = case1();
        params.d = DenseMatrix::zeros(2, 2);
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let data = simulate(&params, &w, &x, &law, 8).unwrap();
        let f = fit(&data, &w, &FitOptions::default()).unwrap();
        assert!(f.converged, "iterations {} grad {} d {}", f.iterations, f.grad_norm, f.d_hat);
        let ols = Projector::new(&x).unwrap().coef(data.y_vec());
        // sampling error of OLS at n = 400 is about 0.05 per coefficient
        for (est, truth) in f.beta_gls.iter().zip(params.b.as_slice()) {
            assert!((est - truth).abs() < 0.25);
        }
        for (est, truth) in ols.iter().zip(params.b.as_slice()) {
            assert!((est - truth).abs() < 0.2);
        }
        assert!(f.d_hat.amax() < 0.35);
    }

    #[test]
    fn univariate_fit_matches_direct_minimization() {
        let n = 100;
        let w = lattice(10, 10, LatticeScheme::Queen);
        let x = covariates(n, 2, 16);
        let params = MsarParams::new(
            DenseMatrix::from_element(1, 1, 0.5),
            DenseMatrix::from_column_slice(2, 1, &[1.0, -0.5]),
            DenseMatrix::identity(1, 1),
        )
        .unwrap();
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let data = simulate(&params, &w, &x, &law, 17).unwrap();
        let f = fit(&data, &w, &FitOptions::default()).unwrap();
        assert!(f.converged);
        // scalar SAR least squares: brute-force ρ on a fine grid with Σ frozen at Σ̂
        let prof = Profile::new(&w, &x, data.y_vec(), &f.sigma_hat).unwrap();
        let mut best = (f64::INFINITY, 0.0);
        for k in -990..990 {
            let rho = k as f64 / 1000.0;
            let v = prof.eval(&DenseMatrix::from_element(1, 1, rho)).unwrap().value;
            if v < best.0 {
                best = (v, rho);
            }
        }
        assert!((f.d_hat[(0, 0)] - best.1).abs() < 1.5e-3);
    }
}
