//! Matrix-free algebra for the least-squares objective with `β` profiled out.
//!
//! All vectors of length `nq` are `vec` of an `n×q` matrix: block `j`
//! (entries `j·n .. (j+1)·n`) is response `j`. With `Λ = Σe⁻¹`,
//!
//! ```text
//! S   = I − Dᵀ⊗W            G = Λ⊗I_n
//! M   = diag(1/den),        den_{r,u} = Λ_rr + (DΛDᵀ)_rr · (WᵀW)_uu
//! A   = M Sᵀ G              Z = A X̃
//! β(D, y) = argmin ‖A(Sy − X̃β)‖²,   F = A(Sy − X̃β)
//! ```
//!
//! `d_c` with `c = i + q·j` is the `(i, j)` entry of `D`; `∂S/∂d_c = −I_ji⊗W`.
//! Nothing here forms an `nq×nq` matrix.

use nalgebra::Cholesky;

use crate::error::{MsarError, Result};
use crate::tensor_ops::{vec_position, DenseMatrix, DenseVector};
use crate::weights::SpatialWeights;

/// `out = S v` with `S = I − Dᵀ⊗W`.
pub(crate) fn s_apply(d: &DenseMatrix, w: &SpatialWeights, v: &[f64]) -> Vec<f64> {
    let q = d.nrows();
    let n = w.n();
    let mut out = v.to_vec();
    let mut wv = vec![0.0; n];
    for i in 0..q {
        w.mul_into(&v[i * n..(i + 1) * n], &mut wv);
        for j in 0..q {
            let dij = d[(i, j)];
            if dij != 0.0 {
                for (o, x) in out[j * n..(j + 1) * n].iter_mut().zip(&wv) {
                    *o -= dij * x;
                }
            }
        }
    }
    out
}

/// `out = Sᵀ v` with `Sᵀ = I − D⊗Wᵀ`.
pub(crate) fn st_apply(d: &DenseMatrix, w: &SpatialWeights, v: &[f64]) -> Vec<f64> {
    let q = d.nrows();
    let n = w.n();
    let mut out = v.to_vec();
    let mut wtv = vec![0.0; n];
    for i in 0..q {
        wtv.iter_mut().for_each(|x| *x = 0.0);
        w.tmul_add_into(1.0, &v[i * n..(i + 1) * n], &mut wtv);
        for j in 0..q {
            // block j of (D⊗Wᵀ)v is Σ_i D_ji Wᵀ v_i
            let dji = d[(j, i)];
            if dji != 0.0 {
                for (o, x) in out[j * n..(j + 1) * n].iter_mut().zip(&wtv) {
                    *o -= dji * x;
                }
            }
        }
    }
    out
}

/// `(L⊗I_n) v` for a symmetric `q×q` matrix `L`.
pub(crate) fn kron_left_apply(l: &DenseMatrix, n: usize, v: &[f64]) -> Vec<f64> {
    let q = l.nrows();
    let mut out = vec![0.0; n * q];
    for j in 0..q {
        for i in 0..q {
            let lji = l[(j, i)];
            if lji != 0.0 {
                let (src, dst) = (i * n, j * n);
                for u in 0..n {
                    out[dst + u] += lji * v[src + u];
                }
            }
        }
    }
    out
}

/// `(∂S/∂d_c) v = −(I_ji⊗W) v`: block `j` receives `−W v_i`.
pub(crate) fn sc_apply(c: usize, q: usize, w: &SpatialWeights, v: &[f64]) -> Vec<f64> {
    let n = w.n();
    let (i, j) = vec_position(c, q);
    let mut out = vec![0.0; n * q];
    w.mul_add_into(-1.0, &v[i * n..(i + 1) * n], &mut out[j * n..(j + 1) * n]);
    out
}

/// `(∂S/∂d_c)ᵀ v = −(I_ij⊗Wᵀ) v`: block `i` receives `−Wᵀ v_j`.
pub(crate) fn sct_apply(c: usize, q: usize, w: &SpatialWeights, v: &[f64]) -> Vec<f64> {
    let n = w.n();
    let (i, j) = vec_position(c, q);
    let mut out = vec![0.0; n * q];
    w.tmul_add_into(-1.0, &v[j * n..(j + 1) * n], &mut out[i * n..(i + 1) * n]);
    out
}

/// `X̃β = vec(XB)` with `β = vec(B)`.
pub(crate) fn xtilde_apply(x: &DenseMatrix, q: usize, beta: &[f64]) -> Vec<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = vec![0.0; n * q];
    for j in 0..q {
        for a in 0..p {
            let b = beta[a + p * j];
            if b != 0.0 {
                for u in 0..n {
                    out[j * n + u] += x[(u, a)] * b;
                }
            }
        }
    }
    out
}

/// `X̃ᵀ v`.
pub(crate) fn xtilde_t_apply(x: &DenseMatrix, q: usize, v: &[f64]) -> Vec<f64> {
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = vec![0.0; p * q];
    for j in 0..q {
        for a in 0..p {
            out[a + p * j] = (0..n).map(|u| x[(u, a)] * v[j * n + u]).sum();
        }
    }
    out
}

/// Dense `X̃ = I_q ⊗ X`.
pub(crate) fn xtilde_dense(x: &DenseMatrix, q: usize) -> DenseMatrix {
    let (n, p) = (x.nrows(), x.ncols());
    let mut out = DenseMatrix::zeros(n * q, p * q);
    for j in 0..q {
        out.view_mut((j * n, j * p), (n, p)).copy_from(x);
    }
    out
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Everything that does not change while `D` moves: data, `W`, and the frozen `Σe`.
pub(crate) struct Profile<'a> {
    pub w: &'a SpatialWeights,
    pub x: &'a DenseMatrix,
    pub y: &'a [f64],
    pub lambda: DenseMatrix,
    pub colsq: Vec<f64>,
    pub n: usize,
    pub p: usize,
    pub q: usize,
}

/// The profiled objective evaluated at one `D`.
pub(crate) struct ProfilePoint {
    pub d: DenseMatrix,
    pub m: Vec<f64>,
    pub z: DenseMatrix,
    pub ztz: Cholesky<f64, nalgebra::Dyn>,
    pub beta: Vec<f64>,
    pub r: Vec<f64>,
    pub f: Vec<f64>,
    pub value: f64,
}

impl<'a> Profile<'a> {
    pub fn new(
        w: &'a SpatialWeights,
        x: &'a DenseMatrix,
        y: &'a [f64],
        sigma_e: &DenseMatrix,
    ) -> Result<Self> {
        let n = w.n();
        let q = sigma_e.nrows();
        if x.nrows() != n || y.len() != n * q {
            return Err(MsarError::DimensionMismatch(format!(
                "W is {n}x{n}, X has {} rows, y has length {} (q = {q})",
                x.nrows(),
                y.len()
            )));
        }
        let lambda = sigma_e
            .clone()
            .cholesky()
            .ok_or_else(|| MsarError::NotPositiveDefinite("Sigma_e".into()))?
            .inverse();
        let lambda = (&lambda + lambda.transpose()) * 0.5;
        Ok(Self {
            w,
            x,
            y,
            lambda,
            colsq: w.col_sq_sums(),
            n,
            p: x.ncols(),
            q,
        })
    }

    pub fn nd(&self) -> usize {
        self.q * self.q
    }

    fn den(&self, d: &DenseMatrix) -> Vec<f64> {
        let dld = d * &self.lambda * d.transpose();
        let mut den = vec![0.0; self.n * self.q];
        for r in 0..self.q {
            for u in 0..self.n {
                den[r * self.n + u] = self.lambda[(r, r)] + dld[(r, r)] * self.colsq[u];
            }
        }
        den
    }

    /// Diagonal of `M` at `D`.
    pub fn m_at(&self, d: &DenseMatrix) -> Vec<f64> {
        self.den(d).iter().map(|v| 1.0 / v).collect()
    }

    /// `∂den/∂d_c`, nonzero only in block `i`.
    fn den_c(&self, d: &DenseMatrix, c: usize) -> Vec<f64> {
        let (i, j) = vec_position(c, self.q);
        let dl = (d * &self.lambda)[(i, j)];
        let mut out = vec![0.0; self.n * self.q];
        for u in 0..self.n {
            out[i * self.n + u] = 2.0 * dl * self.colsq[u];
        }
        out
    }

    /// `∂²den/∂d_c∂d_e`, nonzero only when both index the same row of `D`.
    fn den_ce(&self, c: usize, e: usize) -> Vec<f64> {
        let (i, j) = vec_position(c, self.q);
        let (s, t) = vec_position(e, self.q);
        let mut out = vec![0.0; self.n * self.q];
        if i == s {
            for u in 0..self.n {
                out[i * self.n + u] = 2.0 * self.lambda[(j, t)] * self.colsq[u];
            }
        }
        out
    }

    /// Diagonal of `∂M/∂d_c`.
    pub fn m_c(&self, pt: &ProfilePoint, c: usize) -> Vec<f64> {
        let dc = self.den_c(&pt.d, c);
        pt.m.iter().zip(&dc).map(|(m, g)| -m * m * g).collect()
    }

    /// Diagonal of `∂²M/∂d_c∂d_e`.
    pub fn m_ce(&self, pt: &ProfilePoint, c: usize, e: usize) -> Vec<f64> {
        let dc = self.den_c(&pt.d, c);
        let de = self.den_c(&pt.d, e);
        let dce = self.den_ce(c, e);
        (0..pt.m.len())
            .map(|k| {
                let m = pt.m[k];
                2.0 * m * m * m * dc[k] * de[k] - m * m * dce[k]
            })
            .collect()
    }

    /// `A v = M Sᵀ G v` for an arbitrary diagonal `M`.
    pub fn a_apply_with(&self, d: &DenseMatrix, m: &[f64], v: &[f64]) -> Vec<f64> {
        let gv = kron_left_apply(&self.lambda, self.n, v);
        hadamard(m, &st_apply(d, self.w, &gv))
    }

    /// `Aᵀ v = G S M v`.
    pub fn at_apply(&self, pt: &ProfilePoint, v: &[f64]) -> Vec<f64> {
        let mv = hadamard(&pt.m, v);
        kron_left_apply(&self.lambda, self.n, &s_apply(&pt.d, self.w, &mv))
    }

    /// `A_c v = M_c Sᵀ G v + M S_cᵀ G v`.
    pub fn ac_apply(&self, pt: &ProfilePoint, mc: &[f64], c: usize, v: &[f64]) -> Vec<f64> {
        let gv = kron_left_apply(&self.lambda, self.n, v);
        let mut out = hadamard(mc, &st_apply(&pt.d, self.w, &gv));
        let t = hadamard(&pt.m, &sct_apply(c, self.q, self.w, &gv));
        axpy(1.0, &t, &mut out);
        out
    }

    /// `A_cᵀ v = G S M_c v + G S_c M v`.
    pub fn act_apply(&self, pt: &ProfilePoint, mc: &[f64], c: usize, v: &[f64]) -> Vec<f64> {
        let mut inner = s_apply(&pt.d, self.w, &hadamard(mc, v));
        let t = sc_apply(c, self.q, self.w, &hadamard(&pt.m, v));
        axpy(1.0, &t, &mut inner);
        kron_left_apply(&self.lambda, self.n, &inner)
    }

    /// `A_ce v = M_ce Sᵀ G v + M_c S_eᵀ G v + M_e S_cᵀ G v`.
    #[allow(clippy::too_many_arguments)]
    pub fn ace_apply(
        &self,
        pt: &ProfilePoint,
        mce: &[f64],
        mc: &[f64],
        me: &[f64],
        c: usize,
        e: usize,
        v: &[f64],
    ) -> Vec<f64> {
        let gv = kron_left_apply(&self.lambda, self.n, v);
        let mut out = hadamard(mce, &st_apply(&pt.d, self.w, &gv));
        axpy(1.0, &hadamard(mc, &sct_apply(e, self.q, self.w, &gv)), &mut out);
        axpy(1.0, &hadamard(me, &sct_apply(c, self.q, self.w, &gv)), &mut out);
        out
    }

    /// `A X̃` as a dense `nq×pq` matrix for the given diagonal.
    fn a_xtilde(&self, d: &DenseMatrix, m: &[f64]) -> DenseMatrix {
        let (n, p, q) = (self.n, self.p, self.q);
        let mut z = DenseMatrix::zeros(n * q, p * q);
        let mut col = vec![0.0; n * q];
        for j in 0..q {
            for a in 0..p {
                col.iter_mut().for_each(|v| *v = 0.0);
                for u in 0..n {
                    col[j * n + u] = self.x[(u, a)];
                }
                let zc = self.a_apply_with(d, m, &col);
                z.column_mut(a + p * j).copy_from_slice(&zc);
            }
        }
        z
    }

    /// `(∂A/∂d_c) X̃`.
    pub fn ac_xtilde(&self, pt: &ProfilePoint, mc: &[f64], c: usize) -> DenseMatrix {
        let (n, p, q) = (self.n, self.p, self.q);
        let mut z = DenseMatrix::zeros(n * q, p * q);
        let mut col = vec![0.0; n * q];
        for j in 0..q {
            for a in 0..p {
                col.iter_mut().for_each(|v| *v = 0.0);
                for u in 0..n {
                    col[j * n + u] = self.x[(u, a)];
                }
                let zc = self.ac_apply(pt, mc, c, &col);
                z.column_mut(a + p * j).copy_from_slice(&zc);
            }
        }
        z
    }

    /// Evaluates the profiled objective at `D`.
    pub fn eval(&self, d: &DenseMatrix) -> Result<ProfilePoint> {
        let m = self.m_at(d);
        let sy = s_apply(d, self.w, self.y);
        let u = self.a_apply_with(d, &m, &sy);
        let z = self.a_xtilde(d, &m);
        let ztz = (z.transpose() * &z)
            .cholesky()
            .ok_or_else(|| MsarError::Singular("profiled design (AX̃)ᵀ(AX̃)".into()))?;
        let ztu = z.transpose() * DenseVector::from_column_slice(&u);
        let beta = ztz.solve(&ztu);
        let xb = xtilde_apply(self.x, self.q, beta.as_slice());
        let r: Vec<f64> = sy.iter().zip(&xb).map(|(a, b)| a - b).collect();
        let f = self.a_apply_with(d, &m, &r);
        let value = dot(&f, &f);
        Ok(ProfilePoint {
            d: d.clone(),
            m,
            z,
            ztz,
            beta: beta.as_slice().to_vec(),
            r,
            f,
            value,
        })
    }

    /// `F_c = A_c r + A S_c y`, the partial of `F` in `d_c` with `β` held fixed.
    pub fn f_c(&self, pt: &ProfilePoint, mc: &[f64], c: usize) -> Vec<f64> {
        let mut out = self.ac_apply(pt, mc, c, &pt.r);
        let scy = sc_apply(c, self.q, self.w, self.y);
        axpy(1.0, &self.a_apply_with(&pt.d, &pt.m, &scy), &mut out);
        out
    }

    /// Gradient of the profiled objective, `2 Fᵀ F_c` for every `c`.
    pub fn gradient(&self, pt: &ProfilePoint) -> DenseVector {
        DenseVector::from_iterator(
            self.nd(),
            (0..self.nd()).map(|c| {
                let mc = self.m_c(pt, c);
                2.0 * dot(&pt.f, &self.f_c(pt, &mc, c))
            }),
        )
    }

    /// `∂β/∂d_e = (ZᵀZ)⁻¹ [Z_eᵀ F + Zᵀ F_e]`.
    pub fn beta_e(&self, pt: &ProfilePoint, me: &[f64], e: usize, fe: &[f64]) -> Vec<f64> {
        let ze = self.ac_xtilde(pt, me, e);
        let rhs = ze.transpose() * DenseVector::from_column_slice(&pt.f)
            + pt.z.transpose() * DenseVector::from_column_slice(fe);
        pt.ztz.solve(&rhs).as_slice().to_vec()
    }
}
