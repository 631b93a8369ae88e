//! The feasible Mallows-type criterion `Ĉ_k` and the selection rule.
//!
//! `Ĉ_k = ‖P̃_k y − y‖² + 2{tr(P̃_k Ω̂) + Σ_c J_c Ω̂ (∂P̃_k/∂d_c) y}` where `J_c`
//! is row `c` of `∂vec(D̂_k)/∂yᵀ` with `Σ̂_k` frozen. Every term is evaluated
//! through solves with cached factorizations of `S`.

use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{MsarError, Result};
use crate::msar_core::{check_spd, fit, CandidateFit, Dataset, FitOptions, Projector};
use crate::profile::{
    axpy, dot, s_apply, sc_apply, sct_apply, st_apply, xtilde_apply, xtilde_t_apply, Profile,
    ProfilePoint,
};
use crate::solver::SpatialSolver;
use crate::tensor_ops::{kron, vec_position, DenseMatrix, DenseVector, UnitIndicatorMatrix};
use crate::weights::SpatialWeights;

/// Largest accepted condition number of the `q²×q²` Hessian before falling back.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Dense `P̃ = S⁻¹ P S`.
pub fn ptilde_dense(d: &DenseMatrix, w: &SpatialWeights, x: &DenseMatrix) -> Result<DenseMatrix> {
    let (sinv, p, s) = dense_pieces(d, w, x)?;
    Ok(sinv * p * s)
}

fn dense_pieces(
    d: &DenseMatrix,
    w: &SpatialWeights,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let s = crate::msar_core::build_s(d, w)?;
    let nq = s.nrows();
    let solver = SpatialSolver::new(d, w)?;
    let sinv = solver.solve_matrix(&DenseMatrix::identity(nq, nq))?;
    let xt = crate::profile::xtilde_dense(x, d.nrows());
    let xtx_inv = (xt.transpose() * &xt)
        .try_inverse()
        .ok_or_else(|| MsarError::Singular("X^T X".into()))?;
    let p = &xt * xtx_inv * xt.transpose();
    Ok((sinv, p, s))
}

/// `∂P̃/∂d_c` for every `c = i + q·j`, as dense `nq×nq` blocks.
#[derive(Debug, Clone)]
pub struct DPtildeDd {
    pub q: usize,
    pub blocks: Vec<DenseMatrix>,
}

impl DPtildeDd {
    pub fn block(&self, i: usize, j: usize) -> &DenseMatrix {
        &self.blocks[i + self.q * j]
    }
}

/// `∂P̃/∂d_ij = S⁻¹(I_ji⊗W)S⁻¹PS − S⁻¹P(I_ji⊗W)` for all `(i, j)`.
pub fn d_ptilde_d_d(d_hat: &DenseMatrix, w: &SpatialWeights, x: &DenseMatrix) -> Result<DPtildeDd> {
    let q = d_hat.nrows();
    let (sinv, p, s) = dense_pieces(d_hat, w, x)?;
    let ptilde = &sinv * &p * &s;
    let wd = w.to_dense();
    let blocks = (0..q * q)
        .map(|c| {
            let (i, j) = vec_position(c, q);
            let k = kron(&UnitIndicatorMatrix::new(q, j, i)?.to_dense(), &wd)?;
            Ok(&sinv * &k * &ptilde - &sinv * &p * &k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DPtildeDd { q, blocks })
}

/// `∂vec(D̂)/∂yᵀ` with `Σ̂` held fixed.
#[derive(Debug, Clone, Serialize)]
pub struct ImplicitJacobian {
    pub j: DenseMatrix,
    pub condition_number: f64,
    /// Set when the Hessian was too ill-conditioned and a pseudo-inverse was used.
    pub regularized: bool,
}

/// What to do when the Hessian condition number exceeds [`CONDITION_LIMIT`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IllConditioned {
    Fail,
    PseudoInverse,
}

/// Exact derivatives of the profiled objective at a stationary point.
pub(crate) struct StationaryDerivatives {
    /// `∂²Q/∂d∂dᵀ` (`q²×q²`).
    pub hessian: DenseMatrix,
    /// `∂(∂Q/∂d_c)/∂yᵀ`, one row per `c` (`q²×nq`).
    pub cross: DenseMatrix,
}

pub(crate) fn hessian(prof: &Profile<'_>, pt: &ProfilePoint) -> DenseMatrix {
    derivatives(prof, pt, false).hessian
}

pub(crate) fn derivatives(prof: &Profile<'_>, pt: &ProfilePoint, with_cross: bool) -> StationaryDerivatives {
    let (n, q) = (prof.n, prof.q);
    let nd = q * q;
    let nq = n * q;
    let mcs: Vec<Vec<f64>> = (0..nd).map(|c| prof.m_c(pt, c)).collect();
    let fcs: Vec<Vec<f64>> = (0..nd).map(|c| prof.f_c(pt, &mcs[c], c)).collect();
    let betas: Vec<Vec<f64>> = (0..nd)
        .map(|e| prof.beta_e(pt, &mcs[e], e, &fcs[e]))
        .collect();
    let scy: Vec<Vec<f64>> = (0..nd).map(|c| sc_apply(c, q, prof.w, prof.y)).collect();
    let total_f: Vec<Vec<f64>> = (0..nd)
        .map(|e| {
            let zb = &pt.z * DenseVector::from_column_slice(&betas[e]);
            fcs[e].iter().zip(zb.iter()).map(|(a, b)| a - b).collect()
        })
        .collect();
    let r_e: Vec<Vec<f64>> = (0..nd)
        .map(|e| {
            let xb = xtilde_apply(prof.x, q, &betas[e]);
            scy[e].iter().zip(&xb).map(|(a, b)| a - b).collect()
        })
        .collect();

    let mut h = DenseMatrix::zeros(nd, nd);
    for c in 0..nd {
        for e in 0..nd {
            let mce = prof.m_ce(pt, c, e);
            let mut dfc = prof.ace_apply(pt, &mce, &mcs[c], &mcs[e], c, e, &pt.r);
            axpy(1.0, &prof.ac_apply(pt, &mcs[c], c, &r_e[e]), &mut dfc);
            axpy(1.0, &prof.ac_apply(pt, &mcs[e], e, &scy[c]), &mut dfc);
            h[(c, e)] = 2.0 * dot(&total_f[e], &fcs[c]) + 2.0 * dot(&pt.f, &dfc);
        }
    }

    let mut cross = DenseMatrix::zeros(if with_cross { nd } else { 0 }, nq);
    if with_cross {
        let zt = pt.z.transpose();
        let proj_z = |v: &[f64]| -> Vec<f64> {
            let coef = pt.ztz.solve(&(&zt * DenseVector::from_column_slice(v)));
            (&pt.z * coef).as_slice().to_vec()
        };
        // Lᵀv = SᵀAᵀ(I − P_Z)v
        let lt = |v: &[f64]| -> Vec<f64> {
            let pz = proj_z(v);
            let resid: Vec<f64> = v.iter().zip(&pz).map(|(a, b)| a - b).collect();
            st_apply(&pt.d, prof.w, &prof.at_apply(pt, &resid))
        };
        // (S − X̃K)ᵀv with K = (ZᵀZ)⁻¹ZᵀAS
        let smxk_t = |v: &[f64]| -> Vec<f64> {
            let xtv = DenseVector::from_vec(xtilde_t_apply(prof.x, q, v));
            let zc = &pt.z * pt.ztz.solve(&xtv);
            let kt = st_apply(&pt.d, prof.w, &prof.at_apply(pt, zc.as_slice()));
            let mut out = st_apply(&pt.d, prof.w, v);
            axpy(-1.0, &kt, &mut out);
            out
        };
        let atf = prof.at_apply(pt, &pt.f);
        for c in 0..nd {
            let mut row = lt(&fcs[c]);
            axpy(1.0, &smxk_t(&prof.act_apply(pt, &mcs[c], c, &pt.f)), &mut row);
            axpy(1.0, &sct_apply(c, q, prof.w, &atf), &mut row);
            for (t, v) in row.iter().enumerate() {
                cross[(c, t)] = 2.0 * v;
            }
        }
    }
    StationaryDerivatives { hessian: h, cross }
}

fn condition_number(h: &DenseMatrix) -> f64 {
    let sv = h.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `H J = −G` under the conditioning policy.
fn solve_jacobian(h: &DenseMatrix, g: &DenseMatrix, policy: IllConditioned) -> Result<ImplicitJacobian> {
    let condition = condition_number(h);
    if condition.is_finite() && condition <= CONDITION_LIMIT {
        if let Some(sol) = h.clone().lu().solve(g) {
            return Ok(ImplicitJacobian {
                j: -sol,
                condition_number: condition,
                regularized: false,
            });
        }
    }
    match policy {
        IllConditioned::Fail => Err(MsarError::IllConditioned { condition }),
        IllConditioned::PseudoInverse => {
            let eps = h.amax().max(f64::MIN_POSITIVE) / CONDITION_LIMIT;
            let pinv = h
                .clone()
                .pseudo_inverse(eps)
                .map_err(|e| MsarError::Singular(e.to_string()))?;
            Ok(ImplicitJacobian {
                j: -(pinv * g),
                condition_number: condition,
                regularized: true,
            })
        }
    }
}

/// `∂vec(D̂)/∂yᵀ = −H⁻¹ ∂(∂Q/∂d)/∂yᵀ` at the fitted `D̂` with `Σ̂` frozen.
///
/// Fails with [`MsarError::IllConditioned`] when the Hessian condition number
/// exceeds [`CONDITION_LIMIT`].
pub fn implicit_jacobian(fit: &CandidateFit, w: &SpatialWeights, data: &Dataset) -> Result<ImplicitJacobian> {
    implicit_jacobian_with(fit, w, data, IllConditioned::Fail)
}

pub fn implicit_jacobian_with(
    fit: &CandidateFit,
    w: &SpatialWeights,
    data: &Dataset,
    policy: IllConditioned,
) -> Result<ImplicitJacobian> {
    let prof = Profile::new(w, &data.x, data.y_vec(), &fit.sigma_hat)?;
    let pt = prof.eval(&fit.d_hat)?;
    let der = derivatives(&prof, &pt, true);
    solve_jacobian(&der.hessian, &der.cross, policy)
}

/// Minimizes the least-squares objective over `D` with `Σe` held fixed, starting
/// from `d_start`, and polishes the result with Newton steps on the exact Hessian.
pub fn stationary_d(
    data: &Dataset,
    w: &SpatialWeights,
    sigma_e: &DenseMatrix,
    d_start: &DenseMatrix,
    grad_tol: f64,
) -> Result<DenseMatrix> {
    let prof = Profile::new(w, &data.x, data.y_vec(), sigma_e)?;
    let mut d = crate::msar_core::minimize_d(&prof, d_start, grad_tol, 500)?.point.d;
    for _ in 0..20 {
        let pt = prof.eval(&d)?;
        let g = prof.gradient(&pt);
        if g.amax() <= grad_tol * 1e-3 {
            break;
        }
        let h = hessian(&prof, &pt);
        let Some(step) = h.lu().solve(&g) else { break };
        let next = &d - DenseMatrix::from_column_slice(d.nrows(), d.ncols(), step.as_slice());
        let gn = prof.gradient(&prof.eval(&next)?);
        if gn.amax() >= g.amax() {
            break;
        }
        d = next;
    }
    Ok(d)
}

#[derive(Debug, Clone)]
enum OmegaKind {
    /// `Ŝ⁻¹(Σ̂⊗I)Ŝ⁻ᵀ` applied through the factorization of `Ŝ`.
    Structured {
        solver: Arc<SpatialSolver>,
        sigma: DenseMatrix,
        n: usize,
    },
    Dense(DenseMatrix),
}

/// `Ω̂`, the covariance estimate of `vec(Y)` used by the penalty.
#[derive(Debug, Clone)]
pub struct OmegaEstimate {
    kind: OmegaKind,
    pub source_candidate: Option<usize>,
}

impl OmegaEstimate {
    /// `Ω̂` built from the fit on candidate `fit.candidate_index`.
    pub fn from_fit(fit: &CandidateFit, w: &SpatialWeights) -> Result<Self> {
        check_spd("Sigma_hat", &fit.sigma_hat)?;
        Ok(Self {
            kind: OmegaKind::Structured {
                solver: fit.solver(w)?,
                sigma: fit.sigma_hat.clone(),
                n: w.n(),
            },
            source_candidate: Some(fit.candidate_index),
        })
    }

    /// A caller-supplied covariance (for example the true `Ω`).
    pub fn from_dense(omega: DenseMatrix) -> Result<Self> {
        if !omega.is_square() || (&omega - omega.transpose()).amax() > 1e-10 * omega.amax().max(1.0) {
            return Err(MsarError::NotPositiveDefinite("Omega is not symmetric".into()));
        }
        Ok(Self {
            kind: OmegaKind::Dense(omega),
            source_candidate: None,
        })
    }

    /// `Ω̂ = 0`, which reduces the criterion to the residual sum of squares.
    pub fn zero(nq: usize) -> Self {
        Self {
            kind: OmegaKind::Dense(DenseMatrix::zeros(nq, nq)),
            source_candidate: None,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            OmegaKind::Structured { solver, .. } => solver.dim(),
            OmegaKind::Dense(m) => m.nrows(),
        }
    }

    /// `Ω̂ v`.
    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        match &self.kind {
            OmegaKind::Structured { solver, sigma, n } => {
                let t = solver.solve_transpose(v)?;
                solver.solve(&crate::profile::kron_left_apply(sigma, *n, &t))
            }
            OmegaKind::Dense(m) => Ok((m * DenseVector::from_column_slice(v)).as_slice().to_vec()),
        }
    }

    pub fn to_dense(&self) -> Result<DenseMatrix> {
        match &self.kind {
            OmegaKind::Dense(m) => Ok(m.clone()),
            OmegaKind::Structured { solver, sigma, n } => {
                let g = kron(sigma, &DenseMatrix::identity(*n, *n))?;
                let t = solver.solve_matrix(&g)?;
                let o = solver.solve_matrix(&t.transpose())?;
                Ok((&o + o.transpose()) * 0.5)
            }
        }
    }
}

/// Fits the given candidate and builds `Ω̂` from it.
pub fn omega_hat(data: &Dataset, dense_candidate: &SpatialWeights, opts: &FitOptions) -> Result<OmegaEstimate> {
    let f = fit(data, dense_candidate, opts)?;
    OmegaEstimate::from_fit(&f, dense_candidate)
}

/// Candidate indices ordered by decreasing number of nonzeros, ties by index.
pub fn densest_order(candidates: &[SpatialWeights]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by_key(|&k| (std::cmp::Reverse(candidates[k].nnz()), k));
    idx
}

/// Picks the `Ω̂` source among already-fitted candidates: `preferred` (or the
/// densest) when its fit converged, otherwise the next-densest converged one.
pub fn omega_from_fits(
    fits: &[CandidateFit],
    candidates: &[SpatialWeights],
    preferred: Option<usize>,
) -> Result<OmegaEstimate> {
    if fits.len() != candidates.len() || fits.is_empty() {
        return Err(MsarError::DimensionMismatch("one fit per candidate required".into()));
    }
    let mut order = densest_order(candidates);
    if let Some(p) = preferred {
        if p >= candidates.len() {
            return Err(MsarError::InvalidParameter(format!("omega source {p} out of range")));
        }
        order.retain(|&k| k != p);
        order.insert(0, p);
    }
    let first = order[0];
    for &k in &order {
        if fits[k].converged {
            if k != first {
                warn!("omega source candidate {first} did not converge; using candidate {k}");
            }
            return OmegaEstimate::from_fit(&fits[k], &candidates[k]);
        }
    }
    warn!("no candidate fit converged; building omega from candidate {first} anyway");
    OmegaEstimate::from_fit(&fits[first], &candidates[first])
}

/// One candidate's criterion value and its parts.
#[derive(Debug, Clone, Serialize)]
pub struct CriterionValue {
    pub k: usize,
    pub sse: f64,
    pub trace_term: f64,
    pub stein_term: f64,
    pub c_hat: f64,
    pub condition_number: f64,
    /// The Jacobian solve fell back to a pseudo-inverse.
    pub warning: bool,
}

/// `tr(P̃ Ω̂)` computed as `tr((X̃ᵀX̃)⁻¹X̃ᵀ S Ω̂ S⁻¹ X̃)`.
fn trace_term(
    d: &DenseMatrix,
    w: &SpatialWeights,
    x: &DenseMatrix,
    solver: &SpatialSolver,
    proj: &Projector,
    omega: &OmegaEstimate,
) -> Result<f64> {
    let q = d.nrows();
    let pq = x.ncols() * q;
    let mut acc = 0.0;
    let mut e = vec![0.0; pq];
    for col in 0..pq {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[col] = 1.0;
        let v = solver.solve(&xtilde_apply(x, q, &e))?;
        let sov = s_apply(d, w, &omega.apply(&v)?);
        acc += proj.coef(&sov)[col];
    }
    Ok(acc)
}

/// `(∂P̃/∂d_c) y = S⁻¹(I_ji⊗W)P̃y − S⁻¹P(I_ji⊗W)y`.
pub(crate) fn dptilde_y(
    c: usize,
    q: usize,
    w: &SpatialWeights,
    solver: &SpatialSolver,
    proj: &Projector,
    mu: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    // sc_apply gives −(I_ji⊗W)v
    let mut rhs: Vec<f64> = sc_apply(c, q, w, mu).iter().map(|v| -v).collect();
    let pky = proj.project(&sc_apply(c, q, w, y));
    axpy(1.0, &pky, &mut rhs);
    solver.solve(&rhs)
}

/// Penalty parts `(tr(P̃Ω̂), Σ_c J_c Ω̂ (∂P̃/∂d_c) y)` for a fitted candidate.
pub fn penalty_terms(
    fit: &CandidateFit,
    w: &SpatialWeights,
    data: &Dataset,
    omega: &OmegaEstimate,
    jac: &ImplicitJacobian,
) -> Result<(f64, f64)> {
    let q = data.q();
    if omega.dim() != data.n() * q {
        return Err(MsarError::DimensionMismatch("Omega dimension differs from nq".into()));
    }
    let proj = Projector::new(&data.x)?;
    let solver = fit.solver(w)?;
    let tr = trace_term(&fit.d_hat, w, &data.x, &solver, &proj, omega)?;
    let mut stein = 0.0;
    for c in 0..q * q {
        let dy = dptilde_y(c, q, w, &solver, &proj, fit.mu_tilde.as_slice(), data.y_vec())?;
        let od = omega.apply(&dy)?;
        stein += jac.j.row(c).iter().zip(&od).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok((tr, stein))
}

/// `Ĉ_k` for one fitted candidate.
pub fn criterion(
    fit: &CandidateFit,
    w: &SpatialWeights,
    data: &Dataset,
    omega: &OmegaEstimate,
) -> Result<CriterionValue> {
    let y = data.y_vec();
    let sse: f64 = fit.mu_tilde.iter().zip(y).map(|(m, v)| (m - v).powi(2)).sum();
    let jac = implicit_jacobian_with(fit, w, data, IllConditioned::PseudoInverse)?;
    if jac.regularized {
        warn!(
            "candidate {}: Hessian condition number {:.3e}, using pseudo-inverse",
            fit.candidate_index, jac.condition_number
        );
    }
    let (trace_term, stein_term) = penalty_terms(fit, w, data, omega, &jac)?;
    Ok(CriterionValue {
        k: fit.candidate_index,
        sse,
        trace_term,
        stein_term,
        c_hat: sse + 2.0 * (trace_term + stein_term),
        condition_number: jac.condition_number,
        warning: jac.regularized,
    })
}

/// Position of the smallest `c_hat`; ties go to the earliest entry.
pub fn select(criteria: &[CriterionValue]) -> Result<usize> {
    if criteria.is_empty() {
        return Err(MsarError::InvalidParameter("no criteria to select from".into()));
    }
    let mut best = 0;
    for (k, c) in criteria.iter().enumerate().skip(1) {
        if c.c_hat < criteria[best].c_hat {
            best = k;
        }
    }
    Ok(best)
}

/// Position of the smallest `c_hat` among the eligible entries.
pub fn select_among(criteria: &[CriterionValue], eligible: &[bool]) -> Result<usize> {
    if eligible.len() != criteria.len() {
        return Err(MsarError::DimensionMismatch("one eligibility flag per criterion required".into()));
    }
    let mut best: Option<usize> = None;
    for (k, c) in criteria.iter().enumerate() {
        if eligible[k] && best.is_none_or(|b| c.c_hat < criteria[b].c_hat) {
            best = Some(k);
        }
    }
    best.ok_or_else(|| MsarError::InvalidParameter("no eligible candidate".into()))
}

/// Fits, criteria and the selected candidate for one dataset.
///
/// Candidates whose fit did not converge are left out of selection and
/// averaging unless every fit failed to converge.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub fits: Vec<CandidateFit>,
    pub criteria: Vec<CriterionValue>,
    pub omega: OmegaEstimate,
    pub selected: usize,
    pub eligible: Vec<bool>,
}

impl SelectionReport {
    pub fn all_converged(&self) -> bool {
        self.fits.iter().all(|f| f.converged)
    }

    /// Recomputes eligibility and the selected candidate.
    pub fn reselect(&mut self, include_nonconverged: bool) -> Result<()> {
        let converged: Vec<bool> = self.fits.iter().map(|f| f.converged).collect();
        self.eligible = if include_nonconverged || !converged.iter().any(|&c| c) {
            if !include_nonconverged {
                warn!("no candidate fit converged; criteria of all candidates are used");
            }
            vec![true; self.fits.len()]
        } else {
            for f in self.fits.iter().filter(|f| !f.converged) {
                warn!(
                    "candidate {} did not converge (gradient {:.3e}); excluded from selection",
                    f.candidate_index, f.grad_norm
                );
            }
            converged
        };
        self.selected = select_among(&self.criteria, &self.eligible)?;
        Ok(())
    }
}

/// Fits every candidate, builds `Ω̂` and evaluates the criterion for each.
pub fn evaluate_candidates(
    data: &Dataset,
    candidates: &[SpatialWeights],
    opts: &FitOptions,
    omega_from: Option<usize>,
) -> Result<SelectionReport> {
    if candidates.is_empty() {
        return Err(MsarError::InvalidParameter("empty candidate set".into()));
    }
    let fits = candidates
        .par_iter()
        .enumerate()
        .map(|(k, w)| fit(data, w, opts).map(|f| f.with_index(k)))
        .collect::<Result<Vec<_>>>()?;
    let omega = omega_from_fits(&fits, candidates, omega_from)?;
    evaluate_with(data, candidates, fits, omega)
}

/// As [`evaluate_candidates`] with fits and `Ω̂` already available.
pub fn evaluate_with(
    data: &Dataset,
    candidates: &[SpatialWeights],
    fits: Vec<CandidateFit>,
    omega: OmegaEstimate,
) -> Result<SelectionReport> {
    let criteria = fits
        .par_iter()
        .zip(candidates.par_iter())
        .map(|(f, w)| criterion(f, w, data, &omega))
        .collect::<Result<Vec<_>>>()?;
    let mut report = SelectionReport {
        fits,
        criteria,
        omega,
        selected: 0,
        eligible: Vec::new(),
    };
    report.reselect(false)?;
    Ok(report)
}
