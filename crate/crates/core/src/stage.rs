//! One Saak stage: DC + KLT kernels fitted from local-cuboid samples, the
//! signed forward transform, sign/position format conversion and the
//! inverse.
//!
//! Kernel augmentation (`±b_k` followed by ReLU) is never materialized in
//! the transform path: it is exactly the sign-to-position conversion of the
//! signed coefficients. [`StageKernels::augmented_kernels`] builds the
//! explicit kernel set for cross-checking.

use log::warn;

use crate::error::{Error, Result};
use crate::linalg::{
    dot, eigh, gemm_nn, gemm_nt, orthonormalize_rows, CovarianceAccumulator, Matrix, SymMatrix, SIGN_TOLERANCE,
};
use crate::recos::dc_anchor;

/// Eigenvectors whose inner product with the DC kernel exceeds this are
/// treated as the constant direction and dropped.
pub const DC_ALIGNMENT_THRESHOLD: f64 = 0.99;

/// Absolute tolerance for the "both slots positive" check in
/// [`ps_convert`].
pub const POSITION_TOLERANCE: f64 = 1e-12;

/// Snapshot eigenvalues below this fraction of the largest are treated as
/// zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

/// Upper bound on the number of AC kernels kept by a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelCap {
    All,
    Max(usize),
}

impl KernelCap {
    pub fn resolve(self, available: usize) -> usize {
        match self {
            KernelCap::All => available,
            KernelCap::Max(m) => m.min(available),
        }
    }
}

impl std::fmt::Display for KernelCap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelCap::All => f.write_str("all"),
            KernelCap::Max(m) => write!(f, "{m}"),
        }
    }
}

impl std::str::FromStr for KernelCap {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            Ok(KernelCap::All)
        } else {
            s.parse()
                .map(KernelCap::Max)
                .map_err(|_| Error::invalid(format!("bad kernel cap {s:?}; expected \"all\" or a count")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoeffFormat {
    Signed,
    Position,
}

/// Coefficient vector tagged with its format and the stage it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffVector {
    pub format: CoeffFormat,
    pub stage: usize,
    pub values: Vec<f64>,
}

impl CoeffVector {
    pub fn signed(stage: usize, values: Vec<f64>) -> Self {
        CoeffVector {
            format: CoeffFormat::Signed,
            stage,
            values,
        }
    }

    pub fn position(stage: usize, values: Vec<f64>) -> Self {
        CoeffVector {
            format: CoeffFormat::Position,
            stage,
            values,
        }
    }
}

/// Outcome flag of [`fit_stage`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitStatus {
    Ok,
    /// The residual correlation matrix vanished; only the DC kernel was kept.
    NoAcEnergy,
}

/// Fitted kernels of one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageKernels {
    stage: usize,
    /// `(M+1) × N`: row 0 is the DC kernel, rows `1..=M` the AC basis.
    kernels: Matrix,
    eigenvalues: Vec<f64>,
    dc_energy: f64,
    residual_energy: f64,
    sample_count: u64,
}

impl StageKernels {
    /// Assembles kernels from stored parts, validating shapes.
    pub fn from_parts(
        stage: usize,
        input_dim: usize,
        ac_basis: Vec<f64>,
        eigenvalues: Vec<f64>,
        dc_energy: f64,
        residual_energy: f64,
        sample_count: u64,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Empty("zero-dimensional stage"));
        }
        let m = eigenvalues.len();
        if m >= input_dim {
            return Err(Error::invalid(format!(
                "{m} AC kernels exceed the {} available in dimension {input_dim}",
                input_dim - 1
            )));
        }
        Error::check_dim(m * input_dim, ac_basis.len())?;
        let mut data = dc_anchor(input_dim);
        data.extend(ac_basis);
        Ok(StageKernels {
            stage,
            kernels: Matrix::from_vec(m + 1, input_dim, data)?,
            eigenvalues,
            dc_energy,
            residual_energy,
            sample_count,
        })
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn with_stage(mut self, stage: usize) -> Self {
        self.stage = stage;
        self
    }

    /// `N`, the flattened LC length.
    pub fn input_dim(&self) -> usize {
        self.kernels.cols()
    }

    /// `M`, the number of AC kernels.
    pub fn ac_count(&self) -> usize {
        self.kernels.rows() - 1
    }

    pub fn signed_dim(&self) -> usize {
        self.kernels.rows()
    }

    pub fn position_dim(&self) -> usize {
        2 * self.kernels.rows()
    }

    pub fn is_lossless(&self) -> bool {
        self.ac_count() + 1 == self.input_dim()
    }

    pub fn dc(&self) -> &[f64] {
        self.kernels.row(0)
    }

    /// AC kernel `b_k`, `k` in `1..=M`.
    pub fn ac(&self, k: usize) -> &[f64] {
        assert!(k >= 1 && k <= self.ac_count(), "AC kernel index {k} out of range");
        self.kernels.row(k)
    }

    /// All kernels, DC first.
    pub fn kernels(&self) -> &Matrix {
        &self.kernels
    }

    /// Eigenvalues paired with the AC kernels, non-increasing.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Mean squared DC projection over the fitting samples.
    pub fn dc_energy(&self) -> f64 {
        self.dc_energy
    }

    /// Trace of the residual correlation matrix (all AC energy, kept or not).
    pub fn residual_energy(&self) -> f64 {
        self.residual_energy
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    /// Fraction of the mean input energy captured by the kept kernels.
    pub fn energy_retention(&self) -> f64 {
        let total = self.dc_energy + self.residual_energy;
        if total <= 0.0 {
            return 1.0;
        }
        let kept = self.dc_energy + self.eigenvalues.iter().sum::<f64>();
        (kept / total).min(1.0)
    }

    /// Signed coefficients `(dcᵀf, b₁ᵀf, …, b_Mᵀf)`.
    pub fn forward_signed(&self, f: &[f64]) -> Result<CoeffVector> {
        Error::check_dim(self.input_dim(), f.len())?;
        let values = self.kernels.iter_rows().map(|k| dot(k, f)).collect();
        Ok(CoeffVector::signed(self.stage, values))
    }

    /// Signed coefficients for a row-major block of LC vectors.
    pub fn forward_block(&self, block: &[f64]) -> Result<Vec<f64>> {
        let n = self.input_dim();
        if !block.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: block.len() % n,
            });
        }
        let rows = block.len() / n;
        let k = self.signed_dim();
        let mut out = vec![0.0; rows * k];
        gemm_nt(rows, n, k, block, self.kernels.as_slice(), 0.0, &mut out);
        Ok(out)
    }

    /// `f = Σ_j values[j]·kernel_j`.
    pub fn inverse_stage(&self, c: &CoeffVector) -> Result<Vec<f64>> {
        if c.format != CoeffFormat::Signed {
            return Err(Error::WrongFormat {
                expected: CoeffFormat::Signed,
            });
        }
        Error::check_dim(self.signed_dim(), c.values.len())?;
        let mut f = vec![0.0; self.input_dim()];
        for (g, k) in c.values.iter().zip(self.kernels.iter_rows()) {
            for (o, v) in f.iter_mut().zip(k) {
                *o += g * v;
            }
        }
        Ok(f)
    }

    /// Inverse for a row-major block of signed coefficient vectors.
    pub fn inverse_block(&self, signed: &[f64]) -> Result<Vec<f64>> {
        let k = self.signed_dim();
        if !signed.len().is_multiple_of(k) {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: signed.len() % k,
            });
        }
        let rows = signed.len() / k;
        let n = self.input_dim();
        let mut out = vec![0.0; rows * n];
        gemm_nn(rows, k, n, signed, self.kernels.as_slice(), 0.0, &mut out);
        Ok(out)
    }

    /// Explicit augmented kernel set `(dc, −dc, b₁, −b₁, …)`.
    pub fn augmented_kernels(&self) -> Matrix {
        let n = self.input_dim();
        let mut data = Vec::with_capacity(2 * self.signed_dim() * n);
        for k in self.kernels.iter_rows() {
            data.extend_from_slice(k);
            data.extend(k.iter().map(|v| -v));
        }
        Matrix::from_vec(2 * self.signed_dim(), n, data).expect("shape is consistent")
    }

    /// Projection on the augmented kernels followed by ReLU on every output.
    pub fn forward_augmented(&self, f: &[f64]) -> Result<CoeffVector> {
        Error::check_dim(self.input_dim(), f.len())?;
        let values = self
            .augmented_kernels()
            .iter_rows()
            .map(|k| dot(k, f).max(0.0))
            .collect();
        Ok(CoeffVector::position(self.stage, values))
    }
}

/// Streaming statistics for fitting one stage: DC energy and the
/// correlation of DC-removed residuals.
///
/// In snapshot mode the residual rows are kept instead and the fit
/// diagonalizes their `S × S` Gram matrix, which has the same nonzero
/// spectrum as the `N × N` correlation. Use it when `S < N`.
#[derive(Debug, Clone)]
pub struct StageAccumulator {
    dc: Vec<f64>,
    dc_energy_sum: f64,
    residuals: Residuals,
    scratch: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Residuals {
    Correlation(CovarianceAccumulator),
    Snapshots(Vec<f64>),
}

impl StageAccumulator {
    pub fn new(input_dim: usize) -> Self {
        StageAccumulator {
            dc: dc_anchor(input_dim),
            dc_energy_sum: 0.0,
            residuals: Residuals::Correlation(CovarianceAccumulator::new(input_dim)),
            scratch: Vec::new(),
        }
    }

    pub fn snapshots(input_dim: usize) -> Self {
        StageAccumulator {
            residuals: Residuals::Snapshots(Vec::new()),
            ..StageAccumulator::new(input_dim)
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dc.len()
    }

    pub fn is_snapshot(&self) -> bool {
        matches!(self.residuals, Residuals::Snapshots(_))
    }

    pub fn count(&self) -> u64 {
        match &self.residuals {
            Residuals::Correlation(acc) => acc.count(),
            Residuals::Snapshots(rows) => (rows.len() / self.input_dim()) as u64,
        }
    }

    /// Adds a row-major block of LC vectors.
    pub fn push_block(&mut self, block: &[f64]) -> Result<()> {
        let n = self.input_dim();
        if !block.len().is_multiple_of(n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: block.len() % n,
            });
        }
        let out = match &mut self.residuals {
            Residuals::Correlation(_) => {
                self.scratch.clear();
                &mut self.scratch
            }
            Residuals::Snapshots(rows) => rows,
        };
        out.reserve(block.len());
        for f in block.chunks_exact(n) {
            let p0 = dot(&self.dc, f);
            self.dc_energy_sum += p0 * p0;
            out.extend(f.iter().zip(&self.dc).map(|(v, d)| v - p0 * d));
        }
        if let Residuals::Correlation(acc) = &mut self.residuals {
            acc.push_batch(&self.scratch)?;
        }
        Ok(())
    }

    /// Fits the DC kernel plus up to `cap` AC kernels.
    ///
    /// A snapshot fit keeps at most as many AC kernels as the residuals have
    /// nonzero directions, so it never yields a lossless stage unless the
    /// samples span the whole AC subspace.
    pub fn fit(&self, stage: usize, cap: KernelCap) -> Result<(StageKernels, FitStatus)> {
        let n = self.input_dim();
        let count = self.count();
        if count < 2 {
            return Err(Error::invalid(format!(
                "stage fit needs at least 2 samples, got {count}"
            )));
        }
        if let KernelCap::Max(m) = cap {
            if m > n - 1 {
                return Err(Error::invalid(format!(
                    "kernel cap {m} exceeds the {} AC kernels available in dimension {n}",
                    n - 1
                )));
            }
        }
        let dc_energy = self.dc_energy_sum / count as f64;
        let keep = cap.resolve(n - 1);
        let (residual_energy, basis) = match &self.residuals {
            Residuals::Correlation(acc) => {
                let r = acc.finish(false)?;
                let energy = r.trace().max(0.0);
                let basis = if has_energy(energy, dc_energy) && keep > 0 {
                    Some(ac_basis(&r, &self.dc, keep)?)
                } else {
                    None
                };
                (energy, basis)
            }
            Residuals::Snapshots(rows) => {
                let energy = rows.iter().map(|v| v * v).sum::<f64>() / count as f64;
                let basis = if has_energy(energy, dc_energy) && keep > 0 {
                    Some(snapshot_basis(rows, count as usize, &self.dc, keep)?)
                } else {
                    None
                };
                (energy, basis)
            }
        };
        let no_energy = !has_energy(residual_energy, dc_energy);
        if no_energy {
            warn!("stage {stage}: residual correlation vanishes; keeping only the DC kernel");
        }
        let status = if no_energy {
            FitStatus::NoAcEnergy
        } else {
            FitStatus::Ok
        };
        let (basis, eigenvalues) = basis.unwrap_or_default();
        let kernels = StageKernels::from_parts(stage, n, basis, eigenvalues, dc_energy, residual_energy, count)?;
        Ok((kernels, status))
    }
}

fn has_energy(residual: f64, dc: f64) -> bool {
    residual > 1e-24 * (dc + residual) && residual > 0.0
}

/// Leading AC kernels from residual snapshots (`count` rows of length
/// `dc.len()`).
fn snapshot_basis(rows: &[f64], count: usize, dc: &[f64], keep: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = dc.len();
    let s = count as f64;
    let mut gram = vec![0.0; count * count];
    gemm_nt(count, n, count, rows, rows, 0.0, &mut gram);
    gram.iter_mut().for_each(|g| *g /= s);
    for i in 0..count {
        for j in 0..i {
            let v = 0.5 * (gram[i * count + j] + gram[j * count + i]);
            gram[i * count + j] = v;
            gram[j * count + i] = v;
        }
    }
    let eig = eigh(&SymMatrix::new(count, gram)?)?;
    let (eigenvalues, mut u) = eig.into_parts();
    let top = eigenvalues.first().copied().unwrap_or(0.0);
    let rank = eigenvalues.iter().take_while(|&&l| l > RANK_TOLERANCE * top).count();
    let keep = keep.min(rank);

    u.truncate(keep * count);
    for (row, l) in u.chunks_exact_mut(count).zip(&eigenvalues) {
        let scale = 1.0 / (s * l).sqrt();
        row.iter_mut().for_each(|x| *x *= scale);
    }
    let mut basis = vec![0.0; keep * n];
    gemm_nn(keep, count, n, &u, rows, 0.0, &mut basis);
    for b in basis.chunks_exact_mut(n) {
        let c = dot(b, dc);
        b.iter_mut().zip(dc).for_each(|(x, d)| *x -= c * d);
    }
    let mut basis = Matrix::from_vec(keep, n, basis)?;
    orthonormalize_rows(&mut basis)?;
    for k in 0..keep {
        let b = basis.row_mut(k);
        if b.iter().find(|x| x.abs() > SIGN_TOLERANCE).is_some_and(|x| *x < 0.0) {
            b.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok((basis.into_vec(), eigenvalues[..keep].to_vec()))
}

/// Leading `keep` eigenvectors of `r` orthogonal to `dc`.
///
/// `dc` spans the null direction of a residual correlation matrix. Shifting
/// it to eigenvalue `−2·trace(r)` makes it the unique smallest eigenpair, so
/// it separates cleanly even when `r` has a multi-dimensional null space.
fn ac_basis(r: &SymMatrix, dc: &[f64], keep: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = r.dim();
    let mut shifted = r.clone();
    shifted.add_outer(dc, -2.0 * r.trace());
    let eig = eigh(&shifted)?;

    let aligned: Vec<usize> = eig
        .vectors()
        .enumerate()
        .filter(|(_, v)| dot(v, dc).abs() > DC_ALIGNMENT_THRESHOLD)
        .map(|(k, _)| k)
        .collect();
    if aligned.len() != 1 {
        return Err(Error::Numerical(format!(
            "expected exactly one eigenvector aligned with the DC kernel, found {}",
            aligned.len()
        )));
    }
    let mut basis = Vec::with_capacity(keep * n);
    let mut eigenvalues = Vec::with_capacity(keep);
    for k in (0..n).filter(|k| *k != aligned[0]).take(keep) {
        let mut b = eig.vector(k).to_vec();
        let c = dot(&b, dc);
        b.iter_mut().zip(dc).for_each(|(x, d)| *x -= c * d);
        let norm = dot(&b, &b).sqrt();
        b.iter_mut().for_each(|x| *x /= norm);
        basis.extend_from_slice(&b);
        eigenvalues.push(eig.eigenvalues()[k].max(0.0));
    }
    Ok((basis, eigenvalues))
}

/// Fits one stage from flattened LC samples (one per row).
pub fn fit_stage(samples: &Matrix, cap: KernelCap) -> Result<(StageKernels, FitStatus)> {
    if samples.rows() < 2 {
        return Err(Error::invalid(format!(
            "stage fit needs at least 2 samples, got {}",
            samples.rows()
        )));
    }
    let mut acc = StageAccumulator::new(samples.cols());
    acc.push_block(samples.as_slice())?;
    acc.fit(1, cap)
}

/// Writes the position format of `signed` into `out` (twice as long).
pub fn sign_to_position(signed: &[f64], out: &mut Vec<f64>) {
    out.reserve(2 * signed.len());
    for &v in signed {
        if v > 0.0 {
            out.push(v);
            out.push(0.0);
        } else {
            out.push(0.0);
            out.push(-v);
        }
    }
}

/// Sign-to-position conversion: `v ↦ (v, 0)` if `v > 0`, else `(0, −v)`.
pub fn sp_convert(c: &CoeffVector) -> Result<CoeffVector> {
    if c.format != CoeffFormat::Signed {
        return Err(Error::WrongFormat {
            expected: CoeffFormat::Signed,
        });
    }
    let mut values = Vec::new();
    sign_to_position(&c.values, &mut values);
    Ok(CoeffVector::position(c.stage, values))
}

/// Validating position-to-sign conversion of a flat slice.
pub fn position_to_sign(position: &[f64], out: &mut Vec<f64>) -> Result<()> {
    if !position.len().is_multiple_of(2) {
        return Err(Error::invalid("position vector has odd length"));
    }
    out.reserve(position.len() / 2);
    for (pair, pn) in position.chunks_exact(2).enumerate() {
        let (p, n) = (pn[0], pn[1]);
        let malformed = p < -POSITION_TOLERANCE
            || n < -POSITION_TOLERANCE
            || (p > POSITION_TOLERANCE && n > POSITION_TOLERANCE)
            || !(p.is_finite() && n.is_finite());
        if malformed {
            return Err(Error::MalformedPosition {
                pair,
                positive: p,
                negative: n,
            });
        }
        out.push(p - n);
    }
    Ok(())
}

/// Linear position-to-sign map `(p, n) ↦ p − n` without validation. Used
/// when the position vector is an approximation (lossy stages, truncated
/// synthesis).
pub fn position_to_sign_linear(position: &[f64], out: &mut Vec<f64>) {
    out.reserve(position.len() / 2);
    out.extend(position.chunks_exact(2).map(|pn| pn[0] - pn[1]));
}

/// Least-squares position-to-sign map: each pair is replaced by the nearest
/// pair a forward pass can produce, i.e. the larger slot wins and negative
/// slots clamp to zero.
pub fn position_to_sign_nearest(position: &[f64], out: &mut Vec<f64>) {
    out.reserve(position.len() / 2);
    out.extend(position.chunks_exact(2).map(|pn| {
        if pn[0] >= pn[1] {
            pn[0].max(0.0)
        } else {
            -pn[1].max(0.0)
        }
    }));
}

/// Position-to-sign conversion; rejects vectors a forward pass cannot
/// produce.
pub fn ps_convert(c: &CoeffVector) -> Result<CoeffVector> {
    if c.format != CoeffFormat::Position {
        return Err(Error::WrongFormat {
            expected: CoeffFormat::Position,
        });
    }
    let mut values = Vec::new();
    position_to_sign(&c.values, &mut values)?;
    Ok(CoeffVector::signed(c.stage, values))
}
