//! Candidate spatial weights matrices: construction, validation, row
//! normalization, convex combination, and Matrix Market / CSV I/O.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MsarError, Result};
use crate::tensor_ops::{DenseMatrix, DenseVector};

/// Tolerance on row sums for a matrix to count as row-stochastic.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Sparse `n×n` nonnegative weights with a zero diagonal, stored row-compressed.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialWeights {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
    normalized: bool,
}

impl SpatialWeights {
    /// Builds a matrix from `(row, col, weight)` triplets. Duplicates are summed;
    /// explicit zeros are dropped.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(i, j, w) in triplets {
            if i >= n || j >= n {
                return Err(MsarError::InvalidWeights(format!(
                    "entry ({i},{j}) outside {n}x{n}"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(MsarError::InvalidWeights(format!(
                    "entry ({i},{j}) = {w} is negative or not finite"
                )));
            }
            if i == j && w != 0.0 {
                return Err(MsarError::InvalidWeights(format!(
                    "diagonal entry ({i},{i}) must be zero"
                )));
            }
            *rows[i].entry(j).or_insert(0.0) += w;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (j, w) in row {
                if w != 0.0 {
                    col_idx.push(j);
                    values.push(w);
                }
            }
            row_ptr.push(col_idx.len());
        }
        let mut out = Self {
            n,
            row_ptr,
            col_idx,
            values,
            normalized: false,
        };
        out.normalized = out.is_row_stochastic();
        Ok(out)
    }

    /// Builds from a dense matrix, ignoring exact zeros.
    pub fn from_dense(m: &DenseMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(MsarError::DimensionMismatch(format!(
                "weights matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut trip = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    trip.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), &trip)
    }

    /// The all-zero matrix. Useful for degenerate checks.
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            row_ptr: vec![0; n + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
            normalized: false,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Nonzeros of row `i` as `(col, weight)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, w)| w)
    }

    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        (0..self.n)
            .flat_map(|i| self.row(i).map(move |(j, w)| (i, j, w)))
            .collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.n, self.n);
        for (i, j, w) in self.triplets() {
            m[(i, j)] = w;
        }
        m
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(_, w)| w).sum()).collect()
    }

    fn is_row_stochastic(&self) -> bool {
        let sums = self.row_sums();
        sums.iter().any(|&s| s != 0.0)
            && sums
                .iter()
                .all(|&s| s == 0.0 || (s - 1.0).abs() <= ROW_SUM_TOL)
    }

    /// `out = W·x` for a length-`n` slice.
    pub fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            *o = self.row(i).map(|(j, w)| w * x[j]).sum();
        }
    }

    /// `out += alpha·W·x`.
    pub fn mul_add_into(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.n) {
            let s: f64 = self.row(i).map(|(j, w)| w * x[j]).sum();
            *o += alpha * s;
        }
    }

    /// `out += alpha·Wᵀ·x`.
    pub fn tmul_add_into(&self, alpha: f64, x: &[f64], out: &mut [f64]) {
        for i in 0..self.n {
            let xi = alpha * x[i];
            if xi == 0.0 {
                continue;
            }
            for (j, w) in self.row(i) {
                out[j] += w * xi;
            }
        }
    }

    pub fn mul_vec(&self, x: &DenseVector) -> DenseVector {
        let mut out = DenseVector::zeros(self.n);
        self.mul_into(x.as_slice(), out.as_mut_slice());
        out
    }

    /// Diagonal of `WᵀW`, i.e. column sums of squared weights.
    pub fn col_sq_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (_, j, w) in self.triplets() {
            out[j] += w * w;
        }
        out
    }

    /// Principal submatrix on `nodes` (in the given order). The result is not
    /// renormalized.
    pub fn restrict(&self, nodes: &[usize]) -> Result<Self> {
        let mut pos = vec![usize::MAX; self.n];
        for (k, &v) in nodes.iter().enumerate() {
            if v >= self.n {
                return Err(MsarError::InvalidWeights(format!("node {v} out of range")));
            }
            pos[v] = k;
        }
        let mut trip = Vec::new();
        for (k, &i) in nodes.iter().enumerate() {
            for (j, w) in self.row(i) {
                if pos[j] != usize::MAX {
                    trip.push((k, pos[j], w));
                }
            }
        }
        Self::from_triplets(nodes.len(), &trip)
    }

    /// Frobenius distance to another matrix of the same size.
    pub fn frobenius_distance(&self, other: &SpatialWeights) -> Result<f64> {
        check_same_n(&[self, other])?;
        let mut acc = 0.0;
        for i in 0..self.n {
            let mut merged: BTreeMap<usize, f64> = BTreeMap::new();
            for (j, w) in self.row(i) {
                *merged.entry(j).or_insert(0.0) += w;
            }
            for (j, w) in other.row(i) {
                *merged.entry(j).or_insert(0.0) -= w;
            }
            acc += merged.values().map(|d| d * d).sum::<f64>();
        }
        Ok(acc.sqrt())
    }

    fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Result<Self> {
        let trip: Vec<_> = self
            .triplets()
            .into_iter()
            .map(|(i, j, w)| (i, j, f(i, j, w)))
            .collect();
        Self::from_triplets(self.n, &trip)
    }
}

fn check_same_n(ws: &[&SpatialWeights]) -> Result<()> {
    if let Some(first) = ws.first() {
        if let Some(bad) = ws.iter().find(|w| w.n != first.n) {
            return Err(MsarError::DimensionMismatch(format!(
                "weights matrices of size {} and {}",
                first.n, bad.n
            )));
        }
    }
    Ok(())
}

/// Neighbourhood scheme on a regular grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeScheme {
    /// Each unit's only neighbour is the unit to its left.
    Left,
    /// Left and right neighbours.
    LeftRight,
    /// Up, down, left, right.
    Rook,
    /// The surrounding eight cells.
    Queen,
}

impl LatticeScheme {
    fn default_wrap(self) -> bool {
        matches!(self, LatticeScheme::Left | LatticeScheme::LeftRight)
    }

    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            LatticeScheme::Left => &[(0, -1)],
            LatticeScheme::LeftRight => &[(0, -1), (0, 1)],
            LatticeScheme::Rook => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            LatticeScheme::Queen => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// A `rows×cols` grid, units numbered row-major (`u = r·cols + c`).
///
/// The left and left-right schemes wrap horizontally by default (the leftmost
/// unit's left neighbour is the rightmost unit of the same row); rook and
/// queen are non-wrapping contiguity unless `wrap` is set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub rows: usize,
    pub cols: usize,
    pub scheme: LatticeScheme,
    #[serde(default)]
    pub wrap: Option<bool>,
}

impl LatticeSpec {
    pub fn new(rows: usize, cols: usize, scheme: LatticeScheme) -> Self {
        Self {
            rows,
            cols,
            scheme,
            wrap: None,
        }
    }

    pub fn with_wrap(mut self, wrap: bool) -> Self {
        self.wrap = Some(wrap);
        self
    }

    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    pub fn wraps(&self) -> bool {
        self.wrap.unwrap_or_else(|| self.scheme.default_wrap())
    }
}

/// Near-square factorization `rows×cols = n` with `rows ≤ cols` as large as possible.
pub fn near_square_grid(n: usize) -> (usize, usize) {
    let mut rows = (n as f64).sqrt().floor() as usize;
    while rows > 1 && n % rows != 0 {
        rows -= 1;
    }
    let rows = rows.max(1);
    (rows, n / rows)
}

/// Unnormalized 0/1 contiguity matrix for a lattice.
pub fn lattice_weights(spec: &LatticeSpec) -> Result<SpatialWeights> {
    let n = spec.n();
    if n < 2 {
        return Err(MsarError::InvalidWeights(format!(
            "lattice {}x{} has fewer than 2 units",
            spec.rows, spec.cols
        )));
    }
    let wrap = spec.wraps();
    if matches!(spec.scheme, LatticeScheme::Left | LatticeScheme::LeftRight) && spec.cols < 2 {
        return Err(MsarError::InvalidWeights(format!(
            "{:?} scheme needs at least 2 columns",
            spec.scheme
        )));
    }
    let (rows, cols) = (spec.rows as isize, spec.cols as isize);
    let mut trip = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let u = (r * cols + c) as usize;
            let mut seen = Vec::new();
            for &(dr, dc) in spec.scheme.offsets() {
                let (mut rr, mut cc) = (r + dr, c + dc);
                if wrap {
                    rr = rr.rem_euclid(rows);
                    cc = cc.rem_euclid(cols);
                } else if rr < 0 || rr >= rows || cc < 0 || cc >= cols {
                    continue;
                }
                let v = (rr * cols + cc) as usize;
                if v != u && !seen.contains(&v) {
                    seen.push(v);
                    trip.push((u, v, 1.0));
                }
            }
        }
    }
    SpatialWeights::from_triplets(n, &trip)
}

/// Symmetric nonnegative pairwise distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    dis: DenseMatrix,
}

impl DistanceMatrix {
    pub fn new(dis: DenseMatrix) -> Result<Self> {
        let n = dis.nrows();
        if dis.ncols() != n {
            return Err(MsarError::DimensionMismatch(format!(
                "distance matrix must be square, got {}x{}",
                n,
                dis.ncols()
            )));
        }
        for i in 0..n {
            if dis[(i, i)] != 0.0 {
                return Err(MsarError::InvalidWeights(format!(
                    "distance diagonal ({i},{i}) must be zero"
                )));
            }
            for j in 0..n {
                let d = dis[(i, j)];
                if !d.is_finite() || d < 0.0 {
                    return Err(MsarError::InvalidWeights(format!(
                        "distance ({i},{j}) = {d} is negative or not finite"
                    )));
                }
                if (d - dis[(j, i)]).abs() > 1e-9 * d.abs().max(1.0) {
                    return Err(MsarError::InvalidWeights(format!(
                        "distance matrix not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self { dis })
    }

    pub fn n(&self) -> usize {
        self.dis.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.dis[(i, j)]
    }

    /// Reads an `n×n` CSV with a header row.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let rows = read_numeric_csv(path.as_ref())?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(MsarError::Parse(format!(
                "distance CSV must be square; got {n} rows of differing width"
            )));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(DenseMatrix::from_row_slice(n, n, &flat))
    }
}

/// Two-window distance band: `inner_w` when `dis ≤ t1`, `outer_w` when
/// `t1 < dis ≤ t2`, zero beyond.
pub fn two_window_band(
    d: &DistanceMatrix,
    t1: f64,
    t2: f64,
    inner_w: f64,
    outer_w: f64,
) -> Result<SpatialWeights> {
    if !(t1 > 0.0 && t1 < t2) {
        return Err(MsarError::InvalidParameter(format!(
            "band thresholds must satisfy 0 < t1 < t2, got t1={t1}, t2={t2}"
        )));
    }
    if inner_w <= 0.0 || outer_w <= 0.0 {
        return Err(MsarError::InvalidParameter(
            "band weights must be positive".into(),
        ));
    }
    band(d, |dis| {
        if dis <= t1 {
            inner_w
        } else if dis <= t2 {
            outer_w
        } else {
            0.0
        }
    })
}

/// One-window band: neighbours when `dis ≤ threshold`.
pub fn distance_band(d: &DistanceMatrix, threshold: f64) -> Result<SpatialWeights> {
    if threshold <= 0.0 {
        return Err(MsarError::InvalidParameter(format!(
            "band threshold must be positive, got {threshold}"
        )));
    }
    band(d, |dis| if dis <= threshold { 1.0 } else { 0.0 })
}

fn band(d: &DistanceMatrix, f: impl Fn(f64) -> f64) -> Result<SpatialWeights> {
    let n = d.n();
    let mut trip = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let w = f(d.get(i, j));
                if w != 0.0 {
                    trip.push((i, j, w));
                }
            }
        }
    }
    SpatialWeights::from_triplets(n, &trip)
}

/// Exponential distance decay `w_ij = exp(theta_d · dis_ij / scale)`.
pub fn exp_kernel(d: &DistanceMatrix, theta_d: f64, scale: f64) -> Result<SpatialWeights> {
    if scale <= 0.0 {
        return Err(MsarError::InvalidParameter(format!(
            "kernel scale must be positive, got {scale}"
        )));
    }
    band(d, |dis| (theta_d * dis / scale).exp())
}

/// How a node attribute enters the weight of each existing edge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AttributeTransform {
    Linear,
    Exponential { c: f64 },
}

/// Replaces each edge `(i, j)` of a 0/1 adjacency by a function of `attr[j]`.
pub fn attribute_weighted(
    adj: &SpatialWeights,
    attr: &[f64],
    transform: AttributeTransform,
) -> Result<SpatialWeights> {
    if attr.len() != adj.n() {
        return Err(MsarError::DimensionMismatch(format!(
            "attribute length {} for {} nodes",
            attr.len(),
            adj.n()
        )));
    }
    if let Some((i, j, w)) = adj.triplets().into_iter().find(|&(_, _, w)| w != 1.0) {
        return Err(MsarError::InvalidWeights(format!(
            "adjacency entry ({i},{j}) = {w} is not 0/1"
        )));
    }
    if transform == AttributeTransform::Linear {
        if let Some(j) = attr.iter().position(|&a| a < 0.0) {
            return Err(MsarError::InvalidParameter(format!(
                "negative attribute {} at node {j} under linear transform",
                attr[j]
            )));
        }
    }
    adj.map_values(|_, j, _| match transform {
        AttributeTransform::Linear => attr[j],
        AttributeTransform::Exponential { c } => (c * attr[j]).exp(),
    })
}

/// What to do with a row that has no neighbours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IslandPolicy {
    #[default]
    Error,
    DropToZero,
}

/// Divides every nonempty row by its sum.
pub fn row_normalize(w: &SpatialWeights, island_policy: IslandPolicy) -> Result<SpatialWeights> {
    let sums = w.row_sums();
    if island_policy == IslandPolicy::Error {
        if let Some(i) = sums.iter().position(|&s| s == 0.0) {
            return Err(MsarError::IslandRow(i));
        }
    }
    let mut out = w.map_values(|i, _, v| v / sums[i])?;
    out.normalized = out.nnz() > 0;
    Ok(out)
}

/// Number of empty rows.
pub fn island_count(w: &SpatialWeights) -> usize {
    w.row_sums().iter().filter(|&&s| s == 0.0).count()
}

/// Entrywise `Σ coeffs[k]·W_k`.
pub fn combine(ws: &[&SpatialWeights], coeffs: &[f64]) -> Result<SpatialWeights> {
    if ws.is_empty() || ws.len() != coeffs.len() {
        return Err(MsarError::DimensionMismatch(format!(
            "{} matrices with {} coefficients",
            ws.len(),
            coeffs.len()
        )));
    }
    check_same_n(ws)?;
    if coeffs.iter().any(|&c| !(c >= 0.0)) {
        return Err(MsarError::InvalidParameter(
            "combination coefficients must be nonnegative".into(),
        ));
    }
    let mut trip = Vec::new();
    for (w, &c) in ws.iter().zip(coeffs) {
        if c != 0.0 {
            trip.extend(w.triplets().into_iter().map(|(i, j, v)| (i, j, c * v)));
        }
    }
    let mut out = SpatialWeights::from_triplets(ws[0].n(), &trip)?;
    let convex = (coeffs.iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOL;
    out.normalized = convex && ws.iter().all(|w| w.is_normalized()) && out.nnz() > 0;
    Ok(out)
}

/// Writes `%%MatrixMarket matrix coordinate real general` with 1-based indices.
pub fn write_matrix_market(w: &SpatialWeights, mut out: impl Write) -> Result<()> {
    writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(out, "{} {} {}", w.n(), w.n(), w.nnz())?;
    for (i, j, v) in w.triplets() {
        writeln!(out, "{} {} {:e}", i + 1, j + 1, v)?;
    }
    Ok(())
}

pub fn save_matrix_market(w: &SpatialWeights, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_matrix_market(w, std::io::BufWriter::new(file))
}

/// Reads a real general (or symmetric) coordinate Matrix Market stream.
pub fn read_matrix_market(input: impl BufRead) -> Result<SpatialWeights> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| MsarError::Parse("empty Matrix Market input".into()))??;
    let lower = header.to_ascii_lowercase();
    let tokens: Vec<&str> = lower.split_whitespace().collect();
    if tokens.len() < 5 || tokens[0] != "%%matrixmarket" || tokens[1] != "matrix" {
        return Err(MsarError::Parse(format!("bad Matrix Market header: {header}")));
    }
    if tokens[2] != "coordinate" || !(tokens[3] == "real" || tokens[3] == "integer") {
        return Err(MsarError::Parse(format!(
            "only coordinate real matrices are supported, got {header}"
        )));
    }
    let symmetric = match tokens[4] {
        "general" => false,
        "symmetric" => true,
        other => return Err(MsarError::Parse(format!("unsupported symmetry {other}"))),
    };
    let mut size: Option<(usize, usize, usize)> = None;
    let mut trip = Vec::new();
    for line in lines {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = t.split_whitespace().collect();
        if size.is_none() {
            if parts.len() != 3 {
                return Err(MsarError::Parse(format!("bad size line: {t}")));
            }
            let p = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| MsarError::Parse(format!("{s}: {e}")))
            };
            size = Some((p(parts[0])?, p(parts[1])?, p(parts[2])?));
            continue;
        }
        if parts.len() != 3 {
            return Err(MsarError::Parse(format!("bad entry line: {t}")));
        }
        let idx = |s: &str| {
            s.parse::<usize>()
                .ok()
                .filter(|&v| v >= 1)
                .ok_or_else(|| MsarError::Parse(format!("bad index {s}")))
        };
        let (i, j) = (idx(parts[0])? - 1, idx(parts[1])? - 1);
        let v: f64 = parts[2]
            .parse()
            .map_err(|e| MsarError::Parse(format!("{}: {e}", parts[2])))?;
        trip.push((i, j, v));
        if symmetric && i != j {
            trip.push((j, i, v));
        }
    }
    let (r, c, nnz) = size.ok_or_else(|| MsarError::Parse("missing size line".into()))?;
    if r != c {
        return Err(MsarError::DimensionMismatch(format!(
            "weights matrix must be square, got {r}x{c}"
        )));
    }
    let expected = if symmetric {
        trip.len() - trip.iter().filter(|t| t.0 != t.1).count() / 2
    } else {
        trip.len()
    };
    if expected != nnz {
        return Err(MsarError::Parse(format!(
            "size line declares {nnz} entries, found {expected}"
        )));
    }
    SpatialWeights::from_triplets(r, &trip)
}

pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<SpatialWeights> {
    let file = std::fs::File::open(path)?;
    read_matrix_market(std::io::BufReader::new(file))
}

/// Reads one numeric column (by header name, or the first column) from a CSV.
pub fn load_attribute_csv(path: impl AsRef<Path>, column: Option<&str>) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let idx = match column {
        Some(name) => rdr
            .headers()?
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| MsarError::Parse(format!("column {name} not found")))?,
        None => 0,
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = rec
            .get(idx)
            .ok_or_else(|| MsarError::Parse("short CSV record".into()))?;
        out.push(parse_f64(field)?);
    }
    Ok(out)
}

pub(crate) fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(rec.iter().map(parse_f64).collect::<Result<Vec<_>>>()?);
    }
    Ok(rows)
}

pub(crate) fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| MsarError::Parse(format!("'{s}': {e}")))
}
