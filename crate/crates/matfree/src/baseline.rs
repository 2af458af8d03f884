//! Assembled sparse comparator: CSR, incomplete Cholesky, serial PCG.
//!
//! This is the correctness oracle for the matrix-free strategies and the
//! conventional CPU method they are measured against. Assembly is the
//! classic element loop scattering scaled 4x4 matrices into triplets, then
//! compressing to CSR. The incomplete Cholesky factor drops entries small
//! relative to their column norm and retries with a growing diagonal shift
//! if a pivot goes nonpositive. Everything here is serial f64 on purpose;
//! it shares the PCG loop with the matrix-free path so iterate trajectories
//! are comparable one for one.

use crate::error::{BaselineError, SolverError};
use crate::mesh::GridSpec;
use crate::operator::{Mode, SystemOperator};
use crate::solver::{dimvm, PcgConfig, PcgIterate, PcgOperator, PcgStats};

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Sorts, merges duplicates, and compresses. Consumes the triplet order;
    /// the result has sorted unique columns per row.
    pub fn from_triplets(n: usize, triplets: &mut [(usize, usize, f64)]) -> Self {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut vals: Vec<f64> = Vec::new();
        let mut prev = None;
        for &(r, c, v) in triplets.iter() {
            if prev == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                prev = Some((r, c));
            }
            row_ptr[r + 1] = cols.len();
        }
        // Rows the triplets skipped inherit the running offset.
        for r in 1..=n {
            row_ptr[r] = row_ptr[r].max(row_ptr[r - 1]);
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        (&self.cols[span.clone()], &self.vals[span])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        match cols.binary_search(&c) {
            Ok(i) => vals[i],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    /// out = A x.
    pub fn spmv(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(out.len(), self.n);
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            out[r] = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    /// out = c * A x + b.
    pub fn spmv_fused(&self, c: f64, b: &[f64], x: &[f64], out: &mut [f64]) {
        self.spmv(x, out);
        for i in 0..self.n {
            out[i] = c * out[i] + b[i];
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.n]; self.n];
        for r in 0..self.n {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                dense[r][c] = v;
            }
        }
        dense
    }
}

/// Assembles the operator's implied matrix by the standard element loop:
/// for every element, scatter-add its scaled 4x4 matrix.
pub fn assemble_csr(op: &SystemOperator<f64>) -> CsrMatrix {
    let spec = op.spec();
    let n = spec.vertex_count();
    let mut triplets = Vec::with_capacity(16 * spec.element_count());
    for e in 0..spec.element_count() {
        let verts = spec.element_vertices(e);
        let mat = op.element_matrix(e);
        for a in 0..4 {
            for b in 0..4 {
                triplets.push((verts[a], verts[b], mat[a][b]));
            }
        }
    }
    CsrMatrix::from_triplets(n, &mut triplets)
}

/// Lower-triangular incomplete Cholesky factor stored by column.
#[derive(Clone, Debug)]
pub struct IncompleteCholesky {
    n: usize,
    /// Per column: (row, value) strictly below the diagonal, rows ascending.
    cols: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
    /// Diagonal shift that finally succeeded (0 on the first try).
    pub shift: f64,
    /// Restarts it took to get there.
    pub retries: usize,
}

/// Column-wise incomplete Cholesky with threshold dropping: working values
/// with magnitude at most droptol times the 2-norm of the matrix column are
/// discarded. A nonpositive pivot restarts the whole factorization on
/// A + shift I with the shift starting at 1e-12 * trace / n and doubling,
/// at most 5 times.
pub fn icholt(a: &CsrMatrix, droptol: f64) -> Result<IncompleteCholesky, BaselineError> {
    let n = a.n();
    let trace: f64 = a.diagonal().iter().sum();
    let base_shift = 1e-12 * trace / n.max(1) as f64;
    let mut shift = 0.0;
    let mut last_row = 0;
    for retry in 0..=5 {
        match try_icholt(a, droptol, shift) {
            Ok(mut fac) => {
                fac.shift = shift;
                fac.retries = retry;
                return Ok(fac);
            }
            Err(row) => {
                last_row = row;
                shift = if shift == 0.0 { base_shift } else { shift * 2.0 };
            }
        }
    }
    Err(BaselineError::IndefinitePivot { row: last_row, retries: 5, shift })
}

fn try_icholt(a: &CsrMatrix, droptol: f64, shift: f64) -> Result<IncompleteCholesky, usize> {
    let n = a.n();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut diag = vec![0.0f64; n];
    // Dense working column, cleared after every j via the touched list.
    let mut work = vec![0.0f64; n];
    let mut in_pattern = vec![false; n];
    let mut touched: Vec<usize> = Vec::new();
    // Left-looking bookkeeping: pending[j] holds (k, idx) pairs meaning
    // cols[k][idx] is column k's first entry at or below row j, so column k
    // updates column j and then re-queues at its next stored row.
    let mut pending: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];

    for j in 0..n {
        // Load the lower part of A's column j (read row j by symmetry).
        let (acols, avals) = a.row(j);
        let mut ajj = shift;
        let mut col_norm_sq = 0.0;
        for (&c, &v) in acols.iter().zip(avals) {
            col_norm_sq += v * v;
            if c == j {
                ajj += v;
            } else if c > j {
                work[c] = v;
                in_pattern[c] = true;
                touched.push(c);
            }
        }
        // Apply every previous column that reaches row j.
        let links = std::mem::take(&mut pending[j]);
        for (k, idx) in links {
            let ljk = cols[k][idx].1;
            ajj -= ljk * ljk;
            for &(i, lik) in &cols[k][idx + 1..] {
                if !in_pattern[i] {
                    in_pattern[i] = true;
                    touched.push(i);
                    work[i] = 0.0;
                }
                work[i] -= ljk * lik;
            }
            if idx + 1 < cols[k].len() {
                pending[cols[k][idx + 1].0].push((k, idx + 1));
            }
        }
        if ajj <= 0.0 {
            return Err(j);
        }
        let ljj = ajj.sqrt();
        diag[j] = ljj;

        let cutoff = droptol * col_norm_sq.sqrt();
        touched.sort_unstable();
        let mut col = Vec::with_capacity(touched.len());
        for &i in &touched {
            let v = work[i];
            work[i] = 0.0;
            in_pattern[i] = false;
            if v.abs() > cutoff {
                col.push((i, v / ljj));
            }
        }
        touched.clear();
        if let Some(&(first_row, _)) = col.first() {
            pending[first_row].push((j, 0));
        }
        cols[j] = col;
    }
    Ok(IncompleteCholesky { n, cols, diag, shift: 0.0, retries: 0 })
}

impl IncompleteCholesky {
    /// Solves L L' z = r by a forward then a backward column sweep.
    pub fn solve(&self, r: &[f64], z: &mut [f64]) {
        assert_eq!(r.len(), self.n);
        assert_eq!(z.len(), self.n);
        z.copy_from_slice(r);
        for j in 0..self.n {
            z[j] /= self.diag[j];
            let yj = z[j];
            for &(i, lij) in &self.cols[j] {
                z[i] -= lij * yj;
            }
        }
        for j in (0..self.n).rev() {
            let mut acc = z[j];
            for &(i, lij) in &self.cols[j] {
                acc -= lij * z[i];
            }
            z[j] = acc / self.diag[j];
        }
    }

    /// Frobenius norm of A - L L' over the full dense pattern. Small
    /// instances only; this is the droptol-monotonicity check.
    pub fn residual_fro(&self, a: &CsrMatrix) -> f64 {
        let n = self.n;
        let mut l = vec![vec![0.0f64; n]; n];
        for j in 0..n {
            l[j][j] = self.diag[j];
            for &(i, v) in &self.cols[j] {
                l[i][j] = v;
            }
        }
        let mut acc = 0.0f64;
        for r in 0..n {
            for c in 0..n {
                let mut llt = 0.0;
                for k in 0..n {
                    llt += l[r][k] * l[c][k];
                }
                let d = a.get(r, c) - llt;
                acc += d * d;
            }
        }
        acc.sqrt()
    }

    pub fn nnz(&self) -> usize {
        self.n + self.cols.iter().map(Vec::len).sum::<usize>()
    }
}

pub enum SparsePreconditioner {
    Jacobi(Vec<f64>),
    Ic(IncompleteCholesky),
}

/// CSR system plugged into the shared PCG loop.
pub struct SparseSystem<'a> {
    pub a: &'a CsrMatrix,
    pub precond: &'a SparsePreconditioner,
}

impl PcgOperator<f64> for SparseSystem<'_> {
    fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        self.a.spmv(x, out);
    }

    fn residual(&mut self, b: &[f64], x: &[f64], out: &mut [f64]) {
        self.a.spmv_fused(-1.0, b, x, out);
    }

    fn precondition(&mut self, r: &[f64], out: &mut [f64]) {
        match self.precond {
            SparsePreconditioner::Jacobi(diag) => dimvm(diag, r, out),
            SparsePreconditioner::Ic(fac) => fac.solve(r, out),
        }
    }
}

/// Serial PCG on the assembled matrix; same loop and stopping rule as the
/// matrix-free path, so iterates line up one for one.
pub fn pcg_sparse(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    precond: &SparsePreconditioner,
    cfg: &PcgConfig,
) -> Result<PcgStats, SolverError> {
    let mut sys = SparseSystem { a, precond };
    crate::solver::pcg(&mut sys, b, x, cfg)
}

pub fn pcg_sparse_with(
    a: &CsrMatrix,
    b: &[f64],
    x: &mut [f64],
    precond: &SparsePreconditioner,
    cfg: &PcgConfig,
    observe: impl FnMut(&PcgIterate<f64>),
) -> Result<PcgStats, SolverError> {
    let mut sys = SparseSystem { a, precond };
    crate::solver::pcg_with(&mut sys, b, x, cfg, observe)
}

/// Dense assembly for tiny instances, independent of the CSR code paths.
pub fn assemble_dense(op: &SystemOperator<f64>) -> Result<Vec<Vec<f64>>, BaselineError> {
    let spec = op.spec();
    let n = spec.vertex_count();
    if n > 1000 {
        return Err(BaselineError::TooLargeForDense(n));
    }
    let mut a = vec![vec![0.0f64; n]; n];
    for e in 0..spec.element_count() {
        let verts = spec.element_vertices(e);
        let mat = op.element_matrix(e);
        for i in 0..4 {
            for j in 0..4 {
                a[verts[i]][verts[j]] += mat[i][j];
            }
        }
    }
    Ok(a)
}

/// Dense Cholesky solve, the reference for solver-correctness tests.
pub fn dense_cholesky_solve(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>, BaselineError> {
    let n = b.len();
    let mut l = vec![vec![0.0f64; n]; n];
    for j in 0..n {
        let mut d = a[j][j];
        for k in 0..j {
            d -= l[j][k] * l[j][k];
        }
        if d <= 0.0 {
            return Err(BaselineError::DenseNotSpd(j));
        }
        l[j][j] = d.sqrt();
        for i in j + 1..n {
            let mut v = a[i][j];
            for k in 0..j {
                v -= l[i][k] * l[j][k];
            }
            l[i][j] = v / l[j][j];
        }
    }
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i][k] * y[k];
        }
        y[i] /= l[i][i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k][i] * y[k];
        }
        y[i] /= l[i][i];
    }
    Ok(y)
}

/// Assembles one mode's matrix without holding the operator; test and
/// verify-suite convenience.
pub fn assemble_mode(
    spec: &GridSpec,
    field: &crate::materials::MaterialField,
    theta: f64,
    dt: f64,
    mode: Mode,
) -> CsrMatrix {
    use crate::operator::Strategy;
    let op: SystemOperator<f64> =
        SystemOperator::new(spec, field, theta, dt, mode, Strategy::Flexible);
    assemble_csr(&op)
}
