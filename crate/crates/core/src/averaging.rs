//! Model averaging over candidate weights matrices: the quadratic criterion
//! `wᵀAw + 2wᵀh` minimized over the probability simplex.

use log::warn;
use serde::Serialize;

use crate::error::{MsarError, Result};
use crate::msar_core::{CandidateFit, Dataset};
use crate::selection::{CriterionValue, SelectionReport};
use crate::tensor_ops::{DenseMatrix, DenseVector};
use crate::weights::{combine, SpatialWeights};

/// Most negative eigenvalue of `A` still treated as zero.
pub const PSD_TOLERANCE: f64 = -1e-8;
/// Weights below this are reported as exactly zero.
pub const WEIGHT_FLOOR: f64 = 1e-12;
pub const DEFAULT_QP_TOL: f64 = 1e-9;
pub const MAX_QP_ITER: usize = 10_000;

/// `H` holds `P̃_k y − y` in column `k`, `A = HᵀH`, and `h_k` is the penalty of candidate `k`.
#[derive(Debug, Clone)]
pub struct AveragingProblem {
    pub h_mat: DenseMatrix,
    pub h: DenseVector,
    pub a: DenseMatrix,
}

impl AveragingProblem {
    /// Builds a problem straight from `A` and `h`, with no residual matrix behind it.
    pub fn from_parts(a: DenseMatrix, h: DenseVector) -> Result<Self> {
        let k = h.len();
        if a.nrows() != k || a.ncols() != k {
            return Err(MsarError::DimensionMismatch(format!(
                "A is {}x{} but h has {k} entries",
                a.nrows(),
                a.ncols()
            )));
        }
        if (&a - a.transpose()).amax() > 1e-10 * a.amax().max(1.0) {
            return Err(MsarError::InvalidParameter("A must be symmetric".into()));
        }
        Ok(Self {
            h_mat: DenseMatrix::zeros(0, k),
            h,
            a,
        })
    }

    pub fn k(&self) -> usize {
        self.h.len()
    }

    /// `wᵀAw + 2wᵀh`.
    pub fn objective(&self, w: &[f64]) -> f64 {
        let w = DenseVector::from_column_slice(w);
        w.dot(&(&self.a * &w)) + 2.0 * w.dot(&self.h)
    }
}

/// Assembles `H`, `A = HᵀH` and `h` from fitted candidates and their criterion values.
pub fn build_problem(
    fits: &[CandidateFit],
    data: &Dataset,
    criteria: &[CriterionValue],
) -> Result<AveragingProblem> {
    let k = fits.len();
    if k == 0 {
        return Err(MsarError::InvalidParameter("no candidates to average".into()));
    }
    if criteria.len() != k {
        return Err(MsarError::DimensionMismatch(format!(
            "{k} fits but {} criterion values",
            criteria.len()
        )));
    }
    let y = data.y_vec();
    let nq = y.len();
    let mut h_mat = DenseMatrix::zeros(nq, k);
    for (col, f) in fits.iter().enumerate() {
        if f.mu_tilde.len() != nq {
            return Err(MsarError::DimensionMismatch(format!(
                "candidate {col} has {} fitted means, data has {nq}",
                f.mu_tilde.len()
            )));
        }
        for (r, (m, v)) in f.mu_tilde.iter().zip(y).enumerate() {
            h_mat[(r, col)] = m - v;
        }
    }
    let a = h_mat.transpose() * &h_mat;
    let a = (&a + a.transpose()) * 0.5;
    let h = DenseVector::from_iterator(k, criteria.iter().map(|c| c.trace_term + c.stein_term));
    Ok(AveragingProblem { h_mat, h, a })
}

/// Averaging weights together with solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
}

impl WeightVector {
    /// Indicator of candidate `k` among `len`.
    pub fn vertex(len: usize, k: usize) -> Self {
        let mut w = vec![0.0; len];
        w[k] = 1.0;
        Self {
            w,
            objective: f64::NAN,
            kkt_residual: f64::NAN,
            iterations: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.w.iter().sum();
        if self.w.iter().any(|&v| !(v >= -WEIGHT_FLOOR)) || (sum - 1.0).abs() > 1e-10 {
            return Err(MsarError::InvalidParameter(format!(
                "weights must lie on the simplex (sum {sum})"
            )));
        }
        Ok(())
    }

    /// Index of the largest weight.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.w.iter().enumerate() {
            if v > self.w[best] {
                best = k;
            }
        }
        best
    }
}

/// Euclidean projection onto `{w ≥ 0, Σw = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Unit-step projected-gradient residual `‖w − Π(w − ∇f)‖∞`.
fn kkt_residual(a: &DenseMatrix, h: &DenseVector, w: &[f64]) -> f64 {
    let g = gradient(a, h, w);
    let trial: Vec<f64> = w.iter().zip(g.iter()).map(|(x, gi)| x - gi).collect();
    let p = project_simplex(&trial);
    w.iter().zip(&p).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn gradient(a: &DenseMatrix, h: &DenseVector, w: &[f64]) -> DenseVector {
    (a * DenseVector::from_column_slice(w) + h) * 2.0
}

fn objective(a: &DenseMatrix, h: &DenseVector, w: &[f64]) -> f64 {
    let w = DenseVector::from_column_slice(w);
    w.dot(&(a * &w)) + 2.0 * w.dot(h)
}

/// Exact minimizer on the face spanned by `support`, if it stays feasible.
fn face_minimizer(a: &DenseMatrix, h: &DenseVector, support: &[usize]) -> Option<Vec<f64>> {
    let m = support.len();
    let mut kkt = DenseMatrix::zeros(m + 1, m + 1);
    let mut rhs = DenseVector::zeros(m + 1);
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            kkt[(r, c)] = 2.0 * a[(i, j)];
        }
        kkt[(r, m)] = 1.0;
        kkt[(m, r)] = 1.0;
        rhs[r] = -2.0 * h[i];
    }
    rhs[m] = 1.0;
    let sol = kkt.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut w = vec![0.0; a.nrows()];
    for (r, &i) in support.iter().enumerate() {
        if sol[r] < -1e-14 {
            return None;
        }
        w[i] = sol[r].max(0.0);
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Some(w)
}

/// Minimizes `wᵀAw + 2wᵀh` over the probability simplex.
///
/// Accelerated projected gradient with adaptive restart, followed by an exact
/// solve on the detected support.
pub fn solve_simplex_qp(prob: &AveragingProblem, tol: f64) -> Result<WeightVector> {
    let k = prob.k();
    if k == 0 {
        return Err(MsarError::InvalidParameter("empty averaging problem".into()));
    }
    if !(tol > 0.0) {
        return Err(MsarError::InvalidParameter("QP tolerance must be positive".into()));
    }
    if prob.a.iter().chain(prob.h.iter()).any(|v| !v.is_finite()) {
        return Err(MsarError::InvalidParameter("averaging problem has non-finite entries".into()));
    }
    // the argmin is scale free, so work with unit-sized numbers
    let scale = prob.a.amax().max(prob.h.amax()).max(f64::MIN_POSITIVE);
    let a = &prob.a / scale;
    let h = &prob.h / scale;
    let eig = a.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    if min_eig < PSD_TOLERANCE {
        return Err(MsarError::NotPositiveDefinite(format!(
            "averaging matrix has eigenvalue {:.3e}",
            min_eig * scale
        )));
    }
    let lip = 2.0 * eig.eigenvalues.max().max(1e-300);
    let step = 1.0 / lip;

    let mut w = vec![1.0 / k as f64; k];
    let mut v = w.clone();
    let mut t = 1.0f64;
    let mut f_w = objective(&a, &h, &w);
    let mut iterations = 0;
    let mut res = kkt_residual(&a, &h, &w);
    while iterations < MAX_QP_ITER && res > tol {
        iterations += 1;
        let g = gradient(&a, &h, &v);
        let trial: Vec<f64> = v.iter().zip(g.iter()).map(|(x, gi)| x - step * gi).collect();
        let w_next = project_simplex(&trial);
        let f_next = objective(&a, &h, &w_next);
        if f_next > f_w {
            // restart momentum from the last iterate
            t = 1.0;
            v = w.clone();
            continue;
        }
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let mom = (t - 1.0) / t_next;
        v = w_next
            .iter()
            .zip(&w)
            .map(|(a1, a0)| a1 + mom * (a1 - a0))
            .collect();
        w = w_next;
        f_w = f_next;
        t = t_next;
        res = kkt_residual(&a, &h, &w);
    }

    let support: Vec<usize> = (0..k).filter(|&i| w[i] > 1e-9).collect();
    if let Some(wp) = face_minimizer(&a, &h, &support) {
        let rp = kkt_residual(&a, &h, &wp);
        if rp <= res || objective(&a, &h, &wp) <= f_w {
            w = wp;
            res = rp;
        }
    }
    if res > tol {
        warn!("simplex QP stopped with KKT residual {res:.3e} after {iterations} iterations");
    }

    for v in w.iter_mut() {
        if *v < WEIGHT_FLOOR {
            *v = 0.0;
        }
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    Ok(WeightVector {
        objective: prob.objective(&w),
        kkt_residual: kkt_residual(&a, &h, &w),
        w,
        iterations,
    })
}

/// `Σ w_k μ̃_k` and `Σ w_k W_k`.
pub fn averaged_estimates(
    w: &WeightVector,
    fits: &[CandidateFit],
    candidates: &[SpatialWeights],
) -> Result<(DenseVector, SpatialWeights)> {
    w.validate()?;
    if fits.len() != w.w.len() || candidates.len() != w.w.len() {
        return Err(MsarError::DimensionMismatch(format!(
            "{} weights, {} fits, {} candidates",
            w.w.len(),
            fits.len(),
            candidates.len()
        )));
    }
    let nq = fits[0].mu_tilde.len();
    let mut mu = DenseVector::zeros(nq);
    for (f, &wk) in fits.iter().zip(&w.w) {
        if f.mu_tilde.len() != nq {
            return Err(MsarError::DimensionMismatch("fitted means differ in length".into()));
        }
        if wk != 0.0 {
            mu.axpy(wk, &f.mu_tilde, 1.0);
        }
    }
    let refs: Vec<&SpatialWeights> = candidates.iter().collect();
    let w_avg = combine(&refs, &w.w)?;
    Ok((mu, w_avg))
}

/// Averages the eligible candidates of a selection report; excluded
/// candidates get weight zero.
pub fn average_report(
    report: &SelectionReport,
    data: &Dataset,
    candidates: &[SpatialWeights],
    tol: f64,
) -> Result<(WeightVector, DenseVector, SpatialWeights)> {
    let keep: Vec<usize> = (0..report.fits.len()).filter(|&k| report.eligible[k]).collect();
    let fits: Vec<CandidateFit> = keep.iter().map(|&k| report.fits[k].clone()).collect();
    let crit: Vec<CriterionValue> = keep.iter().map(|&k| report.criteria[k].clone()).collect();
    let sub = solve_simplex_qp(&build_problem(&fits, data, &crit)?, tol)?;
    let mut w = vec![0.0; report.fits.len()];
    for (&k, &v) in keep.iter().zip(&sub.w) {
        w[k] = v;
    }
    let full = WeightVector { w, ..sub };
    let (mu, w_avg) = averaged_estimates(&full, &report.fits, candidates)?;
    Ok((full, mu, w_avg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::msar_core::{simulate, ErrorLaw, FitOptions, MsarParams};
    use crate::selection::evaluate_candidates;
    use crate::weights::{lattice_weights, row_normalize, IslandPolicy, LatticeScheme, LatticeSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn problem(a: DenseMatrix, h: &[f64]) -> AveragingProblem {
        AveragingProblem::from_parts(a, DenseVector::from_column_slice(h)).unwrap()
    }

    fn random_psd(k: usize, rng: &mut ChaCha8Rng) -> AveragingProblem {
        let g = DenseMatrix::from_fn(k + 2, k, |_, _| rng.sample(StandardNormal));
        let h: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        problem(g.transpose() * g, &h)
    }

    fn grid_min(prob: &AveragingProblem, step: f64) -> f64 {
        let m = (1.0 / step).round() as usize;
        let mut best = f64::INFINITY;
        for i in 0..=m {
            for j in 0..=(m - i) {
                let w1 = i as f64 / m as f64;
                let w2 = j as f64 / m as f64;
                best = best.min(prob.objective(&[w1, w2, 1.0 - w1 - w2]));
            }
        }
        best
    }

    #[test]
    fn projection_lands_on_simplex() {
        let p = project_simplex(&[0.2, 0.2, 0.2]);
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(project_simplex(&[5.0, -1.0]), vec![1.0, 0.0]);
        let p = project_simplex(&[0.5, 0.3, -0.2, 0.9]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn identity_gives_uniform_weights() {
        let w = solve_simplex_qp(&problem(DenseMatrix::identity(3, 3), &[0.0; 3]), 1e-9).unwrap();
        for v in &w.w {
            assert!((v - 1.0 / 3.0).abs() < 1e-10);
        }
    }

    #[test]
    fn two_candidates_match_closed_form() {
        let w = solve_simplex_qp(
            &problem(DenseMatrix::from_diagonal(&DenseVector::from_column_slice(&[1.0, 100.0])), &[0.0, 0.0]),
            1e-9,
        )
        .unwrap();
        assert!((w.w[0] - 100.0 / 101.0).abs() < 1e-10);
        assert!((w.w[1] - 1.0 / 101.0).abs() < 1e-10);

        // general K=2: minimize over t in [0, 1] for w = (t, 1 − t)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let prob = random_psd(2, &mut rng);
            let (a, h) = (&prob.a, &prob.h);
            let curv = a[(0, 0)] - 2.0 * a[(0, 1)] + a[(1, 1)];
            let slope = a[(0, 1)] - a[(1, 1)] + h[0] - h[1];
            let t = if curv > 0.0 { (-slope / curv).clamp(0.0, 1.0) } else if slope < 0.0 { 1.0 } else { 0.0 };
            let w = solve_simplex_qp(&prob, 1e-9).unwrap();
            assert!((w.w[0] - t).abs() < 1e-10, "{} vs {t}", w.w[0]);
        }
    }

    #[test]
    fn matches_simplex_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let prob = random_psd(3, &mut rng);
            let w = solve_simplex_qp(&prob, 1e-9).unwrap();
            assert!(w.objective <= grid_min(&prob, 0.005) + 1e-6);
            assert!(w.kkt_residual <= 1e-9);
        }
    }

    #[test]
    fn rejects_indefinite_matrix() {
        let a = DenseMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(
            solve_simplex_qp(&problem(a, &[0.0, 0.0]), 1e-9),
            Err(MsarError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn tiny_weights_are_zeroed() {
        let w = solve_simplex_qp(&problem(DenseMatrix::identity(2, 2), &[0.0, 10.0]), 1e-9).unwrap();
        assert_eq!(w.w, vec![1.0, 0.0]);
    }

    fn lattice(rows: usize, cols: usize, scheme: LatticeScheme) -> SpatialWeights {
        row_normalize(
            &lattice_weights(&LatticeSpec::new(rows, cols, scheme)).unwrap(),
            IslandPolicy::Error,
        )
        .unwrap()
    }

    fn small_report() -> (Dataset, Vec<SpatialWeights>, crate::selection::SelectionReport) {
        let (rows, cols) = (5, 6);
        let n = rows * cols;
        let cands: Vec<SpatialWeights> = [LatticeScheme::Left, LatticeScheme::Rook, LatticeScheme::Queen]
            .iter()
            .map(|&s| lattice(rows, cols, s))
            .collect();
        let params = MsarParams::new(
            DenseMatrix::from_row_slice(2, 2, &[0.3, -0.3, 0.5, 0.4]),
            DenseMatrix::from_row_slice(2, 2, &[-0.5, 1.0, 1.3, 0.3]),
            DenseMatrix::from_row_slice(2, 2, &[0.5, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = DenseMatrix::from_fn(n, 2, |_, _| rng.sample(StandardNormal));
        let law = ErrorLaw::gaussian(params.sigma_e.clone()).unwrap();
        let data = simulate(&params, &cands[0], &x, &law, 3).unwrap();
        let report = evaluate_candidates(&data, &cands, &FitOptions::default(), Some(2)).unwrap();
        (data, cands, report)
    }

    #[test]
    fn vertices_reproduce_candidate_criteria() {
        let (data, cands, report) = small_report();
        let prob = build_problem(&report.fits, &data, &report.criteria).unwrap();
        for (k, c) in report.criteria.iter().enumerate() {
            let at_vertex = prob.objective(&WeightVector::vertex(cands.len(), k).w);
            assert!((at_vertex - c.c_hat).abs() < 1e-9 * c.c_hat.abs().max(1.0));
        }
        let w = solve_simplex_qp(&prob, 1e-9).unwrap();
        for c in &report.criteria {
            assert!(w.objective <= c.c_hat + 1e-9 * c.c_hat.abs());
        }
        let (mu, w_avg) = averaged_estimates(&w, &report.fits, &cands).unwrap();
        assert_eq!(mu.len(), data.n() * data.q());
        assert!(w_avg.is_normalized());
    }

    #[test]
    fn single_candidate_problem() {
        let (data, _, report) = small_report();
        let prob = build_problem(&report.fits[..1], &data, &report.criteria[..1]).unwrap();
        let c = &report.criteria[0];
        assert!((prob.a[(0, 0)] - c.sse).abs() < 1e-9 * c.sse);
        assert!((prob.h[0] - (c.trace_term + c.stein_term)).abs() < 1e-12);
        assert_eq!(solve_simplex_qp(&prob, 1e-9).unwrap().w, vec![1.0]);
    }

    #[test]
    fn duplicate_candidates_share_columns() {
        let (data, cands, report) = small_report();
        let fits = vec![report.fits[1].clone(), report.fits[1].clone()];
        let crit = vec![report.criteria[1].clone(), report.criteria[1].clone()];
        let prob = build_problem(&fits, &data, &crit).unwrap();
        assert_eq!(prob.h_mat.column(0), prob.h_mat.column(1));
        let w = WeightVector { w: vec![0.5, 0.5], ..WeightVector::vertex(2, 0) };
        let (mu, w_avg) = averaged_estimates(&w, &fits, &[cands[1].clone(), cands[1].clone()]).unwrap();
        assert!((mu - &fits[0].mu_tilde).amax() < 1e-12);
        assert!(w_avg.frobenius_distance(&cands[1]).unwrap() < 1e-12);
    }

    #[test]
    fn vertex_weights_return_that_candidate() {
        let (_, cands, report) = small_report();
        let (mu, w_avg) = averaged_estimates(&WeightVector::vertex(3, 2), &report.fits, &cands).unwrap();
        assert_eq!(mu, report.fits[2].mu_tilde);
        assert!(w_avg.frobenius_distance(&cands[2]).unwrap() == 0.0);
    }

    fn psd_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|k| {
            (
                prop::collection::vec(-3.0f64..3.0, (k + 1) * k),
                prop::collection::vec(-3.0f64..3.0, k),
            )
        })
    }

    fn to_problem(g: &[f64], h: &[f64]) -> AveragingProblem {
        let k = h.len();
        let g = DenseMatrix::from_column_slice(k + 1, k, g);
        problem(g.transpose() * g, h)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn solution_is_feasible_and_beats_vertices((g, h) in psd_strategy()) {
            let prob = to_problem(&g, &h);
            let w = solve_simplex_qp(&prob, 1e-9).unwrap();
            prop_assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            for k in 0..h.len() {
                let vert = prob.objective(&WeightVector::vertex(h.len(), k).w);
                prop_assert!(w.objective <= vert + 1e-9 * vert.abs().max(1.0));
            }
        }

        #[test]
        fn constant_shift_keeps_argmin((g, h) in psd_strategy(), c in 0.0f64..5.0) {
            let prob = to_problem(&g, &h);
            let k = h.len();
            let shifted = problem(
                &prob.a + DenseMatrix::from_element(k, k, c),
                &h.iter().map(|v| v + c).collect::<Vec<_>>(),
            );
            let w0 = solve_simplex_qp(&prob, 1e-9).unwrap();
            let w1 = solve_simplex_qp(&shifted, 1e-9).unwrap();
            // the two objectives differ by exactly 3c on the simplex
            prop_assert!((shifted.objective(&w0.w) - prob.objective(&w0.w) - 3.0 * c).abs() < 1e-9 * (1.0 + c));
            let scale = prob.a.amax().max(1.0) + c;
            prop_assert!((w1.objective - w0.objective - 3.0 * c).abs() < 1e-7 * scale);
        }
    }
}
