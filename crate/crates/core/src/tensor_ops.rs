//! Kronecker-product and vectorization primitives.
//!
//! `vec` is column-stacking everywhere in this crate: for an `n×q` response
//! matrix `Y`, `vec(Y) = (y_1ᵀ, …, y_qᵀ)ᵀ`. Every Jacobian layout downstream
//! (the `q²` rows of `∂vec(D̂)/∂yᵀ`, the blocks of `∂vec(P̃)/∂vec(D)ᵀ`) follows
//! this convention, so the index of `d_ij` in `vec(D)` is `i + q·j`.
//!
//! Explicit Kronecker products are only materialized below a memory cap; the
//! criterion code relies on the identity `(yᵀ ⊗ A)·vec(M) = A·M·y` instead.

use nalgebra::{DMatrix, DVector};

use crate::error::{MsarError, Result};

pub type DenseMatrix = DMatrix<f64>;
pub type DenseVector = DVector<f64>;

/// Default cap on explicit Kronecker materialization (2 GiB).
pub const DEFAULT_KRON_CAP_BYTES: u128 = 2 * 1024 * 1024 * 1024;

/// `A ⊗ B` under the default memory cap.
pub fn kron(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    kron_capped(a, b, DEFAULT_KRON_CAP_BYTES)
}

/// `A ⊗ B`, refusing to allocate more than `cap_bytes`.
pub fn kron_capped(a: &DenseMatrix, b: &DenseMatrix, cap_bytes: u128) -> Result<DenseMatrix> {
    let rows = a.nrows() as u128 * b.nrows() as u128;
    let cols = a.ncols() as u128 * b.ncols() as u128;
    let bytes = rows * cols * std::mem::size_of::<f64>() as u128;
    if bytes > cap_bytes {
        return Err(MsarError::KronTooLarge {
            rows: rows as usize,
            cols: cols as usize,
            bytes,
            cap: cap_bytes,
        });
    }
    let (br, bc) = (b.nrows(), b.ncols());
    let mut out = DenseMatrix::zeros(rows as usize, cols as usize);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let mut block = out.view_mut((i * br, j * bc), (br, bc));
            block.zip_apply(b, |o, bv| *o = aij * bv);
        }
    }
    Ok(out)
}

/// Column-stacking vectorization.
pub fn vec(m: &DenseMatrix) -> DenseVector {
    // nalgebra storage is already column-major.
    DenseVector::from_column_slice(m.as_slice())
}

/// Inverse of [`vec`].
pub fn unvec(v: &DenseVector, rows: usize, cols: usize) -> Result<DenseMatrix> {
    if rows * cols != v.len() {
        return Err(MsarError::DimensionMismatch(format!(
            "cannot reshape vector of length {} into {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DenseMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Computes `(yᵀ ⊗ A)·vec(M)` as `A·M·y` without forming the Kronecker product.
pub fn kron_vec_apply(a: &DenseMatrix, y: &DenseVector, m: &DenseMatrix) -> Result<DenseVector> {
    if m.ncols() != y.len() || a.ncols() != m.nrows() {
        return Err(MsarError::DimensionMismatch(format!(
            "kron_vec_apply: A is {}x{}, M is {}x{}, y has length {}",
            a.nrows(),
            a.ncols(),
            m.nrows(),
            m.ncols(),
            y.len()
        )));
    }
    Ok(a * (m * y))
}

/// `I_{ji}`: the `dim×dim` zero matrix with a single one at `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitIndicatorMatrix {
    pub dim: usize,
    pub row: usize,
    pub col: usize,
}

impl UnitIndicatorMatrix {
    pub fn new(dim: usize, row: usize, col: usize) -> Result<Self> {
        if row >= dim || col >= dim {
            return Err(MsarError::DimensionMismatch(format!(
                "unit indicator ({row},{col}) outside {dim}x{dim}"
            )));
        }
        Ok(Self { dim, row, col })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.dim, self.dim);
        m[(self.row, self.col)] = 1.0;
        m
    }

    pub fn transpose(&self) -> Self {
        Self {
            dim: self.dim,
            row: self.col,
            col: self.row,
        }
    }
}

/// Position of `d_ij` in `vec(D)` for a `q×q` matrix.
#[inline]
pub fn vec_index(i: usize, j: usize, q: usize) -> usize {
    i + q * j
}

/// Inverse of [`vec_index`].
#[inline]
pub fn vec_position(c: usize, q: usize) -> (usize, usize) {
    (c % q, c / q)
}
