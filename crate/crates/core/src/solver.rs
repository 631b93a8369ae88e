//! Dense LU of `S = I − Dᵀ⊗W`, used wherever `S⁻¹` has to be applied.

use std::fmt;

use faer::linalg::solvers::{PartialPivLu, Solve};
use faer::{Mat, MatMut};

use crate::error::{MsarError, Result};
use crate::tensor_ops::{DenseMatrix, DenseVector};
use crate::weights::SpatialWeights;

/// Factorized `S` for one `(D, W)` pair.
pub struct SpatialSolver {
    lu: PartialPivLu<f64>,
    dim: usize,
}

impl fmt::Debug for SpatialSolver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpatialSolver").field("dim", &self.dim).finish()
    }
}

impl SpatialSolver {
    pub fn new(d: &DenseMatrix, w: &SpatialWeights) -> Result<Self> {
        let q = d.nrows();
        let n = w.n();
        let dim = n * q;
        let mut s = Mat::<f64>::identity(dim, dim);
        // block (row j, col i) of Dᵀ⊗W is D_ij W
        for j in 0..q {
            for i in 0..q {
                let dij = d[(i, j)];
                if dij == 0.0 {
                    continue;
                }
                for (a, b, v) in w.triplets() {
                    s[(j * n + a, i * n + b)] -= dij * v;
                }
            }
        }
        let lu = s.partial_piv_lu();
        Ok(Self { lu, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn check(&self, data: &[f64]) -> Result<()> {
        if data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(MsarError::Singular("S = I - D^T (x) W".into()))
        }
    }

    /// `S⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut out = b.to_vec();
        self.lu
            .solve_in_place(MatMut::from_column_major_slice_mut(&mut out, self.dim, 1));
        self.check(&out)?;
        Ok(out)
    }

    /// `S⁻ᵀ b`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut out = b.to_vec();
        self.lu
            .solve_transpose_in_place(MatMut::from_column_major_slice_mut(&mut out, self.dim, 1));
        self.check(&out)?;
        Ok(out)
    }

    /// `S⁻¹ B` for a dense right-hand side.
    pub fn solve_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = b.clone();
        let cols = out.ncols();
        self.lu
            .solve_in_place(MatMut::from_column_major_slice_mut(out.as_mut_slice(), self.dim, cols));
        self.check(out.as_slice())?;
        Ok(out)
    }

    /// `S⁻ᵀ B` for a dense right-hand side.
    pub fn solve_transpose_matrix(&self, b: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = b.clone();
        let cols = out.ncols();
        self.lu.solve_transpose_in_place(MatMut::from_column_major_slice_mut(
            out.as_mut_slice(),
            self.dim,
            cols,
        ));
        self.check(out.as_slice())?;
        Ok(out)
    }

    pub fn solve_vector(&self, b: &DenseVector) -> Result<DenseVector> {
        Ok(DenseVector::from_vec(self.solve(b.as_slice())?))
    }
}
