//! RECOS (rectified correlations on a sphere) transform: projection onto a
//! set of unit anchor vectors with ReLU on the AC outputs, its Gram-system
//! inverse, and the split of the reconstruction loss into approximation
//! and rectification parts.

use crate::error::{Error, Result};
use crate::linalg::{dot, eigh, SymMatrix};

/// Unit-length tolerance for anchors.
pub const UNIT_TOLERANCE: f64 = 1e-10;

/// Gram systems whose condition number exceeds this are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// DC anchor `(1,…,1)/√N` followed by `K` AC anchors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    dim: usize,
    anchors: Vec<Vec<f64>>,
    gram: Vec<f64>,
}

pub fn dc_anchor(dim: usize) -> Vec<f64> {
    vec![1.0 / (dim as f64).sqrt(); dim]
}

impl AnchorSet {
    /// Builds the set from unit-length AC anchors; the DC anchor is prepended.
    pub fn new(dim: usize, ac: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("zero-dimensional anchors"));
        }
        let mut anchors = Vec::with_capacity(ac.len() + 1);
        anchors.push(dc_anchor(dim));
        for (k, a) in ac.into_iter().enumerate() {
            Error::check_dim(dim, a.len())?;
            let norm = dot(&a, &a).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::invalid(format!("AC anchor {} has norm {norm}", k + 1)));
            }
            anchors.push(a);
        }
        let n = anchors.len();
        let mut gram = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let g = dot(&anchors[i], &anchors[j]);
                gram[i * n + j] = g;
                gram[j * n + i] = g;
            }
        }
        Ok(AnchorSet { dim, anchors, gram })
    }

    /// Normalizes arbitrary nonzero directions before building the set.
    pub fn from_directions(dim: usize, directions: Vec<Vec<f64>>) -> Result<Self> {
        let unit = directions
            .into_iter()
            .map(|d| {
                let n = dot(&d, &d).sqrt();
                if n == 0.0 {
                    Err(Error::invalid("zero anchor direction"))
                } else {
                    Ok(d.into_iter().map(|v| v / n).collect())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        AnchorSet::new(dim, unit)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `K`, the number of AC anchors.
    pub fn ac_count(&self) -> usize {
        self.anchors.len() - 1
    }

    pub fn anchor(&self, k: usize) -> &[f64] {
        &self.anchors[k]
    }

    pub fn gram(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.anchors.len() + j]
    }

    /// Solves `Σ_j ⟨a_i, a_j⟩ β_j = p_i` over the anchors in `subset` and
    /// returns `Σ β_j a_j`.
    fn solve_and_combine(&self, subset: &[usize], rhs: &[f64]) -> Result<Vec<f64>> {
        let q = subset.len();
        let mut g = vec![0.0; q * q];
        for (a, &i) in subset.iter().enumerate() {
            for (b, &j) in subset.iter().enumerate() {
                g[a * q + b] = self.gram(i, j);
            }
        }
        let eig = eigh(&SymMatrix::new(q, g)?)?;
        let values = eig.eigenvalues();
        let max = values[0];
        let min = values[q - 1];
        let condition = if min > 0.0 { max / min } else { f64::INFINITY };
        if condition.is_nan() || condition > MAX_CONDITION {
            return Err(Error::Singular { condition });
        }
        // β = V Λ⁻¹ Vᵀ p
        let mut beta = vec![0.0; q];
        for (k, v) in eig.vectors().enumerate() {
            let c = dot(v, rhs) / values[k];
            for (b, x) in beta.iter_mut().zip(v) {
                *b += c * x;
            }
        }
        let mut f = vec![0.0; self.dim];
        for (b, &i) in beta.iter().zip(subset) {
            for (o, a) in f.iter_mut().zip(&self.anchors[i]) {
                *o += b * a;
            }
        }
        Ok(f)
    }
}

/// Output `g` of the forward transform: `g₀` keeps its sign, `g₁..g_K` are
/// rectified.
#[derive(Debug, Clone, PartialEq)]
pub struct RecosOutput {
    pub g: Vec<f64>,
    /// AC indices (1-based within `g`) with a positive output.
    pub active: Vec<usize>,
}

pub fn recos_forward(f: &[f64], anchors: &AnchorSet) -> Result<RecosOutput> {
    Error::check_dim(anchors.dim, f.len())?;
    let mut g = Vec::with_capacity(anchors.anchors.len());
    let mut active = Vec::new();
    for (k, a) in anchors.anchors.iter().enumerate() {
        let p = dot(a, f);
        if k == 0 {
            g.push(p);
        } else if p > 0.0 {
            g.push(p);
            active.push(k);
        } else {
            g.push(0.0);
        }
    }
    Ok(RecosOutput { g, active })
}

/// Reconstructs `f′` in the span of the DC anchor and the active AC anchors.
pub fn recos_inverse(out: &RecosOutput, anchors: &AnchorSet) -> Result<Vec<f64>> {
    Error::check_dim(anchors.anchors.len(), out.g.len())?;
    let mut subset = Vec::with_capacity(out.active.len() + 1);
    subset.push(0);
    subset.extend(out.active.iter().copied());
    let rhs: Vec<f64> = subset.iter().map(|&k| out.g[k]).collect();
    anchors.solve_and_combine(&subset, &rhs)
}

/// Least-squares approximation `f̂` of `f` in the span of all anchors.
pub fn approximate(f: &[f64], anchors: &AnchorSet) -> Result<Vec<f64>> {
    Error::check_dim(anchors.dim, f.len())?;
    let all: Vec<usize> = (0..anchors.anchors.len()).collect();
    let rhs: Vec<f64> = anchors.anchors.iter().map(|a| dot(a, f)).collect();
    anchors.solve_and_combine(&all, &rhs)
}

/// `total = approx + rect + cross` for every input. Since `f′` lies in the
/// anchor span and `f̂` is the least-squares projection onto it, `cross` is
/// zero up to rounding for any anchor set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub approx: f64,
    pub rect: f64,
    pub cross: f64,
}

pub fn loss_decompose(f: &[f64], anchors: &AnchorSet) -> Result<LossReport> {
    let f_hat = approximate(f, anchors)?;
    let f_prime = recos_inverse(&recos_forward(f, anchors)?, anchors)?;
    let mut report = LossReport {
        total: 0.0,
        approx: 0.0,
        rect: 0.0,
        cross: 0.0,
    };
    for ((x, h), p) in f.iter().zip(&f_hat).zip(&f_prime) {
        let a = x - h;
        let r = h - p;
        report.total += (x - p) * (x - p);
        report.approx += a * a;
        report.rect += r * r;
        report.cross += 2.0 * a * r;
    }
    Ok(report)
}

/// `k` random unit AC anchors. Orthonormal ones are Gram-Schmidt
/// orthogonalized against the DC anchor and each other; oblique ones are
/// independent uniform directions. At most `dim − 1` orthonormal anchors
/// exist, so `k` is clamped to that.
pub fn random_ac_anchors<R: rand::Rng + ?Sized>(dim: usize, k: usize, orthonormal: bool, rng: &mut R) -> Vec<Vec<f64>> {
    let k = if orthonormal { k.min(dim.saturating_sub(1)) } else { k };
    let mut basis = vec![dc_anchor(dim)];
    while basis.len() < k + 1 {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if orthonormal {
            for b in &basis {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    basis.remove(0);
    basis
}
