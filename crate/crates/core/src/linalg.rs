//! Dense linear algebra used throughout the crate: row-major matrices,
//! covariance accumulation, symmetric eigendecomposition and PCA.
//!
//! Everything is computed in `f64`. The eigensolver returns eigenpairs in
//! descending eigenvalue order with a fixed sign convention (the first
//! component whose magnitude exceeds [`SIGN_TOLERANCE`] is positive), so
//! fitted kernels are reproducible bit-for-bit for identical input.

use faer::diag::Diag;
use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt;
use faer::linalg::evd::{self, ComputeEigenvectors};
use faer::linalg::triangular_solve;
use faer::reborrow::{Reborrow, ReborrowMut};
use faer::{Mat, MatMut, MatRef, Par};

use crate::error::{Error, Result};

/// Components with magnitude at or below this are skipped when fixing an
/// eigenvector's sign.
pub const SIGN_TOLERANCE: f64 = 1e-10;

/// Relative tolerance for the symmetry check in [`SymMatrix::new`].
pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Matrices up to this order are diagonalized with cyclic Jacobi rotations,
/// larger ones with a blocked tridiagonal solver.
pub const JACOBI_MAX_DIM: usize = 256;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_OFF_DIAGONAL_THRESHOLD: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_dim(rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equally sized vectors as rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("no rows"))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            Error::check_dim(cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Returns a new matrix keeping only the listed rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// `self · otherᵀ`, i.e. every row of `self` dotted with every row of `other`.
    pub fn mul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.cols, other.cols)?;
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm_nt(
            self.rows,
            self.cols,
            other.rows,
            &self.data,
            &other.data,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `self · other`.
    pub fn mul(&self, other: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm_nn(
            self.rows,
            self.cols,
            other.cols,
            &self.data,
            &other.data,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }
}

/// `c (m×n) = a (m×k) · b (n×k)ᵀ + beta·c`, all row-major and contiguous.
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserted lengths cover every element addressed by the
    // strides below.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all row-major and contiguous.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as in `gemm_nt`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        for l in 0..4 {
            let d = a[i + l] - b[i + l];
            acc[l] += d * d;
        }
    }
    let mut sum = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        let d = a[i] - b[i];
        sum += d * d;
    }
    sum
}

/// Square symmetric matrix stored densely in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Validates symmetry to [`SYMMETRY_TOLERANCE`] relative to the largest
    /// entry.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("zero-dimensional matrix"));
        }
        Error::check_dim(dim * dim, data.len())?;
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let diff = (data[i * dim + j] - data[j * dim + i]).abs();
                if diff.is_nan() || diff > SYMMETRY_TOLERANCE * scale {
                    return Err(Error::NotSymmetric { row: i, col: j, diff });
                }
            }
        }
        Ok(SymMatrix { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        SymMatrix { dim, data }
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Maximum absolute row sum.
    pub fn inf_norm(&self) -> f64 {
        self.data
            .chunks_exact(self.dim)
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.data.chunks_exact(self.dim).map(|r| dot(r, v)).collect()
    }

    /// Adds `scale · u uᵀ`. The result stays exactly symmetric.
    pub fn add_outer(&mut self, u: &[f64], scale: f64) {
        let n = self.dim;
        for i in 0..n {
            for j in i..n {
                let v = self.data[i * n + j] + scale * u[i] * u[j];
                self.data[i * n + j] = v;
                self.data[j * n + i] = v;
            }
        }
    }
}

/// Eigenpairs of a symmetric matrix, descending by eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenBasis {
    dim: usize,
    eigenvalues: Vec<f64>,
    /// Row `k` is the unit eigenvector paired with `eigenvalues[k]`.
    vectors: Vec<f64>,
}

impl EigenBasis {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.vectors.chunks_exact(self.dim)
    }

    /// Eigenvalues and the row-major eigenvector matrix.
    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.eigenvalues, self.vectors)
    }

    /// Reassembles `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim;
        let mut out = SymMatrix::zeros(n);
        for (lambda, v) in self.eigenvalues.iter().zip(self.vectors()) {
            out.add_outer(v, *lambda);
        }
        out
    }
}

/// Streaming second-moment accumulator.
///
/// Batches are folded in with a GEMM; for a fixed sequence of batches the
/// result is bitwise deterministic.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    dim: usize,
    count: u64,
    sum: Vec<f64>,
    outer: Vec<f64>,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Adds every row of a row-major `rows × dim` block.
    pub fn push_batch(&mut self, block: &[f64]) -> Result<()> {
        let d = self.dim;
        if d == 0 || !block.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: block.len(),
            });
        }
        let s = block.len() / d;
        if s == 0 {
            return Ok(());
        }
        for row in block.chunks_exact(d) {
            for (acc, v) in self.sum.iter_mut().zip(row) {
                *acc += v;
            }
        }
        // outer += blockᵀ · block
        // SAFETY: `block` holds s·d elements and `outer` d·d; strides
        // address exactly those.
        unsafe {
            matrixmultiply::dgemm(
                d,
                s,
                d,
                1.0,
                block.as_ptr(),
                1,
                d as isize,
                block.as_ptr(),
                d as isize,
                1,
                1.0,
                self.outer.as_mut_ptr(),
                d as isize,
                1,
            );
        }
        self.count += s as u64;
        Ok(())
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        Error::check_dim(self.dim, x.len())?;
        self.push_batch(x)
    }

    pub fn mean(&self) -> Vec<f64> {
        let s = self.count.max(1) as f64;
        self.sum.iter().map(|v| v / s).collect()
    }

    /// `(1/S)·Σ x xᵀ`, minus `μ μᵀ` when `center` is set.
    pub fn finish(&self, center: bool) -> Result<SymMatrix> {
        if self.count == 0 {
            return Err(Error::Empty("no samples"));
        }
        let n = self.dim;
        let s = self.count as f64;
        let mean = self.mean();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let mut v = self.outer[i * n + j] / s;
                if center {
                    v -= mean[i] * mean[j];
                }
                data[i * n + j] = v;
                data[j * n + i] = v;
            }
        }
        Ok(SymMatrix { dim: n, data })
    }
}

/// Sample second-moment matrix: `(1/S)·Σ (x−μ)(x−μ)ᵀ` when `center` is set,
/// else `(1/S)·Σ x xᵀ`.
pub fn covariance<R: AsRef<[f64]>>(samples: &[R], center: bool) -> Result<SymMatrix> {
    let first = samples.first().ok_or(Error::Empty("no samples"))?;
    let dim = first.as_ref().len();
    if dim == 0 {
        return Err(Error::Empty("zero-dimensional samples"));
    }
    if center {
        // two-pass for accuracy
        let mut mean = vec![0.0; dim];
        for x in samples {
            let x = x.as_ref();
            Error::check_dim(dim, x.len())?;
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        let s = samples.len() as f64;
        mean.iter_mut().for_each(|m| *m /= s);
        let mut acc = CovarianceAccumulator::new(dim);
        let mut centered = vec![0.0; dim];
        for x in samples {
            for ((c, v), m) in centered.iter_mut().zip(x.as_ref()).zip(&mean) {
                *c = v - m;
            }
            acc.push(&centered)?;
        }
        acc.finish(false)
    } else {
        let mut acc = CovarianceAccumulator::new(dim);
        for x in samples {
            acc.push(x.as_ref())?;
        }
        acc.finish(false)
    }
}

/// Orthonormalizes the rows of `m` in place with two rounds of Cholesky QR.
/// Row `i` of the result spans the same leading subspace as rows `0..=i`.
pub fn orthonormalize_rows(m: &mut Matrix) -> Result<()> {
    let (r, n) = (m.rows(), m.cols());
    if r == 0 {
        return Ok(());
    }
    for _ in 0..2 {
        let mut gram = vec![0.0; r * r];
        gemm_nt(r, n, r, m.as_slice(), m.as_slice(), 0.0, &mut gram);
        let mut l = MatMut::from_row_major_slice_mut(&mut gram, r, r);
        let params = Default::default();
        let mut mem = MemBuffer::new(llt::factor::cholesky_in_place_scratch::<f64>(r, Par::Seq, params));
        llt::factor::cholesky_in_place(
            l.rb_mut(),
            Default::default(),
            Par::Seq,
            MemStack::new(&mut mem),
            params,
        )
        .map_err(|_| Error::Numerical("rows are linearly dependent".into()))?;
        let rhs = MatMut::from_row_major_slice_mut(m.as_mut_slice(), r, n);
        triangular_solve::solve_lower_triangular_in_place(l.rb(), rhs, Par::Seq);
    }
    if m.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("rows are linearly dependent".into()));
    }
    Ok(())
}

/// Symmetric eigendecomposition, eigenvalues descending.
pub fn eigh(m: &SymMatrix) -> Result<EigenBasis> {
    if m.dim <= JACOBI_MAX_DIM {
        eigh_jacobi(m)
    } else {
        eigh_blocked(m)
    }
}

/// Cyclic Jacobi eigensolver.
pub fn eigh_jacobi(m: &SymMatrix) -> Result<EigenBasis> {
    let n = m.dim;
    let mut a = m.data.clone();
    // rows of `v` are the accumulating eigenvectors
    let mut v = SymMatrix::identity(n).data;
    let fro = m.frobenius_norm();
    let threshold = JACOBI_OFF_DIAGONAL_THRESHOLD * fro;

    let off_diagonal = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    loop {
        let off = off_diagonal(&a);
        if off <= threshold || fro == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                residual: off,
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[r * n + p];
                    let arq = a[r * n + q];
                    let new_rp = arp - s * (arq + tau * arp);
                    let new_rq = arq + s * (arp - tau * arq);
                    a[r * n + p] = new_rp;
                    a[p * n + r] = new_rp;
                    a[r * n + q] = new_rq;
                    a[q * n + r] = new_rq;
                }
                let (vp, vq) = split_rows(&mut v, n, p, q);
                for (x, y) in vp.iter_mut().zip(vq.iter_mut()) {
                    let (xp, xq) = (*x, *y);
                    *x = xp - s * (xq + tau * xp);
                    *y = xq + s * (xp - tau * xq);
                }
            }
        }
    }
    let eigenvalues: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    Ok(finalize(n, eigenvalues, v))
}

fn split_rows(v: &mut [f64], n: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (lo, hi) = v.split_at_mut(q * n);
    (&mut lo[p * n..(p + 1) * n], &mut hi[..n])
}

/// Blocked Householder tridiagonalization with divide and conquer, run
/// sequentially so results do not depend on the thread pool.
pub fn eigh_blocked(m: &SymMatrix) -> Result<EigenBasis> {
    let n = m.dim;
    // symmetric, so row-major and column-major views coincide
    let a = MatRef::from_row_major_slice(&m.data, n, n);
    let mut s = Diag::<f64>::zeros(n);
    let mut u = Mat::<f64>::zeros(n, n);
    let params = Default::default();
    let mut mem = MemBuffer::new(evd::self_adjoint_evd_scratch::<f64>(
        n,
        ComputeEigenvectors::Yes,
        Par::Seq,
        params,
    ));
    evd::self_adjoint_evd(
        a,
        s.as_mut(),
        Some(u.as_mut()),
        Par::Seq,
        MemStack::new(&mut mem),
        params,
    )
    .map_err(|e| Error::Numerical(format!("symmetric eigensolver failed: {e:?}")))?;
    drop(mem);
    // ascending from the solver; reversed here so `finalize` need not copy
    let eigenvalues: Vec<f64> = s.column_vector().iter().rev().copied().collect();
    let mut vectors = Vec::with_capacity(n * n);
    for k in (0..n).rev() {
        vectors.extend(u.col(k).iter().copied());
    }
    drop(u);
    if eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "symmetric eigensolver produced non-finite eigenvalues".into(),
        ));
    }
    Ok(finalize(n, eigenvalues, vectors))
}

/// Sorts eigenpairs descending (stable on ties) and fixes signs.
fn finalize(n: usize, eigenvalues: Vec<f64>, mut vectors: Vec<f64>) -> EigenBasis {
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eigenvalues[j].total_cmp(&eigenvalues[i]));
    if order.iter().enumerate().any(|(i, &k)| i != k) {
        let mut sorted = Vec::with_capacity(n * n);
        for &k in &order {
            sorted.extend_from_slice(&vectors[k * n..(k + 1) * n]);
        }
        vectors = sorted;
    }
    let eigenvalues = order.iter().map(|&k| eigenvalues[k]).collect();
    for v in vectors.chunks_exact_mut(n.max(1)) {
        if v.iter().find(|x| x.abs() > SIGN_TOLERANCE).is_some_and(|x| *x < 0.0) {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
    EigenBasis {
        dim: n,
        eigenvalues,
        vectors,
    }
}

/// Truncated KLT fitted on centered data.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaReducer {
    mean: Vec<f64>,
    /// `output_dim × input_dim`, rows are leading covariance eigenvectors.
    basis: Matrix,
    eigenvalues: Vec<f64>,
}

impl PcaReducer {
    pub fn from_parts(mean: Vec<f64>, basis: Matrix, eigenvalues: Vec<f64>) -> Result<Self> {
        Error::check_dim(mean.len(), basis.cols())?;
        Error::check_dim(basis.rows(), eigenvalues.len())?;
        Ok(PcaReducer {
            mean,
            basis,
            eigenvalues,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.basis.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    /// Variances along the retained directions.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.input_dim(), x.len())?;
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        Ok(self.basis.iter_rows().map(|b| dot(b, &centered)).collect())
    }

    /// Projects every row of `samples`.
    pub fn project_rows(&self, samples: &Matrix) -> Result<Matrix> {
        Error::check_dim(self.input_dim(), samples.cols())?;
        let mut centered = samples.clone();
        for r in 0..centered.rows() {
            for (v, m) in centered.row_mut(r).iter_mut().zip(&self.mean) {
                *v -= m;
            }
        }
        centered.mul_transposed(&self.basis)
    }

    pub fn reconstruct(&self, y: &[f64]) -> Result<Vec<f64>> {
        Error::check_dim(self.output_dim(), y.len())?;
        let mut out = self.mean.clone();
        for (coef, b) in y.iter().zip(self.basis.iter_rows()) {
            for (o, v) in out.iter_mut().zip(b) {
                *o += coef * v;
            }
        }
        Ok(out)
    }
}

/// PCA from streamed samples. The covariance is formed in one pass, which
/// loses a little precision against [`pca_fit`] when the mean is large.
pub fn pca_fit_accumulated(acc: &CovarianceAccumulator, output_dim: usize) -> Result<PcaReducer> {
    let input_dim = acc.dim();
    if output_dim > input_dim {
        return Err(Error::invalid(format!(
            "PCA output dimension {output_dim} exceeds input dimension {input_dim}"
        )));
    }
    if acc.count() < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    let eig = eigh(&acc.finish(true)?)?;
    let (eigenvalues, mut vectors) = eig.into_parts();
    vectors.truncate(output_dim * input_dim);
    Ok(PcaReducer {
        mean: acc.mean(),
        basis: Matrix::from_vec(output_dim, input_dim, vectors)?,
        eigenvalues: eigenvalues[..output_dim].to_vec(),
    })
}

pub fn pca_fit(samples: &Matrix, output_dim: usize) -> Result<PcaReducer> {
    let input_dim = samples.cols();
    if output_dim > input_dim {
        return Err(Error::invalid(format!(
            "PCA output dimension {output_dim} exceeds input dimension {input_dim}"
        )));
    }
    if samples.rows() < 2 {
        return Err(Error::invalid("PCA needs at least two samples"));
    }
    let mut mean = vec![0.0; input_dim];
    for r in samples.iter_rows() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let s = samples.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= s);

    let mut acc = CovarianceAccumulator::new(input_dim);
    const BATCH: usize = 2048;
    let mut block = Vec::with_capacity(BATCH * input_dim);
    for chunk in samples.as_slice().chunks(BATCH * input_dim) {
        block.clear();
        for r in chunk.chunks_exact(input_dim) {
            block.extend(r.iter().zip(&mean).map(|(v, m)| v - m));
        }
        acc.push_batch(&block)?;
    }
    let cov = acc.finish(false)?;
    let eig = eigh(&cov)?;
    let mut basis = Vec::with_capacity(output_dim * input_dim);
    for k in 0..output_dim {
        basis.extend_from_slice(eig.vector(k));
    }
    Ok(PcaReducer {
        mean,
        basis: Matrix::from_vec(output_dim, input_dim, basis)?,
        eigenvalues: eig.eigenvalues()[..output_dim].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_psd(n: usize, rng: &mut ChaCha8Rng) -> SymMatrix {
        let rows: Vec<Vec<f64>> = (0..n + 3)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        covariance(&rows, false).unwrap()
    }

    fn residual(m: &SymMatrix, eig: &EigenBasis) -> f64 {
        let mut worst: f64 = 0.0;
        for (k, v) in eig.vectors().enumerate() {
            let mv = m.mul_vec(v);
            for (a, b) in mv.iter().zip(v) {
                worst = worst.max((a - eig.eigenvalues()[k] * b).abs());
            }
        }
        worst
    }

    #[test]
    fn covariance_of_repeated_sample_is_zero() {
        let samples = vec![vec![0.3, -1.2, 4.0]; 5];
        let c = covariance(&samples, true).unwrap();
        assert!(c.as_slice().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn uncentered_covariance_by_hand() {
        let c = covariance(&[vec![1.0, 0.0], vec![-1.0, 0.0]], false).unwrap();
        assert_eq!(c.as_slice(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn covariance_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        for center in [false, true] {
            let c = covariance(&samples, center).unwrap();
            let mut mean = [0.0; 3];
            if center {
                for x in &samples {
                    for i in 0..3 {
                        mean[i] += x[i] / 10.0;
                    }
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for x in &samples {
                        s += (x[i] - mean[i]) * (x[j] - mean[j]);
                    }
                    assert!((c.get(i, j) - s / 10.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn covariance_errors() {
        let empty: Vec<Vec<f64>> = vec![];
        assert!(matches!(covariance(&empty, true), Err(Error::Empty(_))));
        assert!(matches!(
            covariance(&[vec![1.0, 2.0], vec![1.0]], false),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn centered_covariance_annihilates_ones_for_mean_removed_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
                let m = x.iter().sum::<f64>() / 5.0;
                x.iter().map(|v| v - m).collect()
            })
            .collect();
        let c = covariance(&samples, true).unwrap();
        for v in c.mul_vec(&[1.0; 5]) {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn eigh_identity() {
        let e = eigh(&SymMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn eigh_two_by_two_by_hand() {
        let m = SymMatrix::new(2, vec![2.0, 1.0, 1.0, 2.0]).unwrap();
        for e in [eigh_jacobi(&m).unwrap(), eigh_blocked(&m).unwrap()] {
            assert!((e.eigenvalues()[0] - 3.0).abs() < 1e-14);
            assert!((e.eigenvalues()[1] - 1.0).abs() < 1e-14);
            let r = std::f64::consts::FRAC_1_SQRT_2;
            let v0 = e.vector(0);
            let v1 = e.vector(1);
            assert!((v0[0] - r).abs() < 1e-14 && (v0[1] - r).abs() < 1e-14);
            assert!((v1[0] - r).abs() < 1e-14 && (v1[1] + r).abs() < 1e-14);
        }
    }

    #[test]
    fn eigh_reconstructs_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_psd(8, &mut rng);
        let e = eigh(&m).unwrap();
        let r = e.reconstruct();
        for (a, b) in r.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn both_solvers_agree_and_satisfy_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for n in [1, 2, 5, 16, 40] {
            let m = random_psd(n, &mut rng);
            let a = eigh_jacobi(&m).unwrap();
            let b = eigh_blocked(&m).unwrap();
            let scale = 1.0 + m.inf_norm();
            for e in [&a, &b] {
                assert!(residual(&m, e) < 1e-7 * scale);
                assert!((e.eigenvalues().iter().sum::<f64>() - m.trace()).abs() < 1e-8 * m.trace());
                for w in e.eigenvalues().windows(2) {
                    assert!(w[0] >= w[1]);
                }
                for i in 0..n {
                    for j in 0..n {
                        let expected = if i == j { 1.0 } else { 0.0 };
                        assert!((dot(e.vector(i), e.vector(j)) - expected).abs() < 1e-8);
                    }
                }
            }
            for (x, y) in a.eigenvalues().iter().zip(b.eigenvalues()) {
                assert!((x - y).abs() < 1e-9 * scale);
            }
            // distinct eigenvalues: the sign convention makes vectors match
            for k in 0..n {
                let d: f64 = a
                    .vector(k)
                    .iter()
                    .zip(b.vector(k))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(d < 1e-6, "n={n} k={k} diff={d}");
            }
        }
    }

    #[test]
    fn sign_convention_first_nonzero_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let m = random_psd(12, &mut rng);
        for e in [eigh_jacobi(&m).unwrap(), eigh_blocked(&m).unwrap()] {
            for v in e.vectors() {
                let first = v.iter().find(|x| x.abs() > SIGN_TOLERANCE).unwrap();
                assert!(*first > 0.0);
            }
        }
    }

    #[test]
    fn tridiagonal_handles_degenerate_spectrum() {
        // rank-2 matrix in 300 dimensions: large zero eigenspace
        let n = 300;
        let mut m = SymMatrix::zeros(n);
        let u: Vec<f64> = (0..n).map(|i| ((i % 7) as f64) - 3.0).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 * 0.1).sin()).collect();
        m.add_outer(&u, 2.0);
        m.add_outer(&v, 0.5);
        let e = eigh(&m).unwrap();
        let r = e.reconstruct();
        for (a, b) in r.as_slice().iter().zip(m.as_slice()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + m.inf_norm()));
        }
        for i in 0..n {
            assert!((norm2(e.vector(i)) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_symmetric() {
        assert!(matches!(
            SymMatrix::new(2, vec![1.0, 2.0, 0.0, 1.0]),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn pca_rank_one_keeps_all_variance() {
        let dir = [1.0, 2.0, -2.0];
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| dir.iter().map(|d| d * (i as f64 - 10.0) / 3.0 + 0.5).collect())
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let p = pca_fit(&m, 1).unwrap();
        let total = covariance(&rows, true).unwrap().trace();
        let projected: Vec<f64> = rows.iter().map(|r| p.project(r).unwrap()[0]).collect();
        let var = projected.iter().map(|v| v * v).sum::<f64>() / rows.len() as f64;
        assert!((var - total).abs() < 1e-9);
    }

    #[test]
    fn pca_full_dim_is_lossless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p = pca_fit(&Matrix::from_rows(&rows).unwrap(), 6).unwrap();
        for r in &rows {
            let back = p.reconstruct(&p.project(r).unwrap()).unwrap();
            assert!(squared_distance(&back, r).sqrt() < 1e-8);
        }
    }

    #[test]
    fn orthonormalize_keeps_leading_spans() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let orig = Matrix::from_rows(&rows).unwrap();
        let mut q = orig.clone();
        orthonormalize_rows(&mut q).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((dot(q.row(i), q.row(j)) - e).abs() < 1e-14);
            }
        }
        // row 0 keeps its direction; row 1 lies in span(orig 0, orig 1)
        let n0 = norm2(orig.row(0));
        assert!((dot(q.row(0), orig.row(0)) - n0).abs() < 1e-12);
        let resid: Vec<f64> = {
            let a = dot(q.row(1), q.row(0));
            let b0: Vec<f64> = orig.row(0).iter().map(|v| v / n0).collect();
            let mut r = orig.row(1).to_vec();
            let c = dot(&r, &b0);
            r.iter_mut().zip(&b0).for_each(|(x, y)| *x -= c * y);
            assert!(a.abs() < 1e-14);
            r
        };
        assert!((dot(q.row(1), &resid).abs() - norm2(&resid)).abs() < 1e-12);
        let mut dependent = Matrix::from_rows(&[rows[0].clone(), rows[0].clone()]).unwrap();
        assert!(orthonormalize_rows(&mut dependent).is_err());
    }

    #[test]
    fn pca_top_direction_matches_covariance_eigenvector() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, s) = (0.6f64.cos(), 0.6f64.sin());
        let rows: Vec<Vec<f64>> = (0..2000)
            .map(|_| {
                let a: f64 = 3.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                let b: f64 = 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
                vec![c * a - s * b + 1.0, s * a + c * b - 2.0]
            })
            .collect();
        let p = pca_fit(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        let e = eigh(&covariance(&rows, true).unwrap()).unwrap();
        let d = dot(p.basis().row(0), e.vector(0)).abs();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pca_rejects_bad_arguments() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(pca_fit(&m, 3).is_err());
        let one = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert!(pca_fit(&one, 1).is_err());
    }

    #[test]
    fn gemm_helpers_match_naive() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.mul(&b).unwrap().as_slice(), &[4.0, 5.0, 10.0, 11.0]);
        assert_eq!(a.mul_transposed(&a).unwrap().as_slice(), &[14.0, 32.0, 32.0, 77.0]);
    }

    proptest::proptest! {
        #[test]
        fn pca_round_trip_is_non_expansive(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..20)
                .map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect())
                .collect();
            let p = pca_fit(&Matrix::from_rows(&rows).unwrap(), k).unwrap();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let y: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let rx = p.reconstruct(&p.project(&x).unwrap()).unwrap();
            let ry = p.reconstruct(&p.project(&y).unwrap()).unwrap();
            proptest::prop_assert!(squared_distance(&rx, &ry) <= squared_distance(&x, &y) + 1e-9);
        }
    }
}
