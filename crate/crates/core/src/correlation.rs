//! Working correlation structures and weighted moment estimators of the
//! dispersion and correlation parameters.
//!
//! All estimators rescale the cluster weights to average one before use, so
//! the `- p` degrees-of-freedom corrections are expressed in sampled-cluster
//! units and the estimates do not move when the weights are multiplied by a
//! common constant.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Distance kept from the positive-definiteness boundary when projecting.
pub const PD_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    #[default]
    Independence,
    Exchangeable,
    Unstructured,
}

impl FromStr for CorrelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independence" | "ind" | "wi" => Ok(Self::Independence),
            "exchangeable" | "ex" | "exch" => Ok(Self::Exchangeable),
            "unstructured" | "un" => Ok(Self::Unstructured),
            other => Err(Error::InvalidConfig(format!(
                "unknown working correlation '{other}'"
            ))),
        }
    }
}

impl fmt::Display for CorrelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Independence => "independence",
            Self::Exchangeable => "exchangeable",
            Self::Unstructured => "unstructured",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable(f64),
    /// Full `K x K` correlation matrix with unit diagonal.
    Unstructured(DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStructure {
    pub correlation: WorkingCorrelation,
    pub phi: f64,
    pub k: usize,
    /// Set when the raw moment estimate had to be moved into the
    /// positive-definite region.
    pub projected: bool,
}

impl CorrelationStructure {
    pub fn independence(k: usize) -> Self {
        Self {
            correlation: WorkingCorrelation::Independence,
            phi: 1.0,
            k,
            projected: false,
        }
    }

    pub fn exchangeable(k: usize, alpha: f64) -> Self {
        Self {
            correlation: WorkingCorrelation::Exchangeable(alpha),
            phi: 1.0,
            k,
            projected: false,
        }
    }

    pub fn kind(&self) -> CorrelationKind {
        match self.correlation {
            WorkingCorrelation::Independence => CorrelationKind::Independence,
            WorkingCorrelation::Exchangeable(_) => CorrelationKind::Exchangeable,
            WorkingCorrelation::Unstructured(_) => CorrelationKind::Unstructured,
        }
    }

    /// Scalar summary of the correlation: `alpha` for exchangeable, the mean
    /// off-diagonal for unstructured, 0 for independence.
    pub fn alpha_summary(&self) -> f64 {
        match &self.correlation {
            WorkingCorrelation::Independence => 0.0,
            WorkingCorrelation::Exchangeable(a) => *a,
            WorkingCorrelation::Unstructured(m) => {
                let k = m.nrows();
                if k < 2 {
                    return 0.0;
                }
                let mut s = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        if a != b {
                            s += m[(a, b)];
                        }
                    }
                }
                s / (k * (k - 1)) as f64
            }
        }
    }

    /// The working correlation matrix itself.
    pub fn omega(&self) -> DMatrix<f64> {
        let k = self.k;
        match &self.correlation {
            WorkingCorrelation::Independence => DMatrix::identity(k, k),
            WorkingCorrelation::Exchangeable(a) => {
                DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { *a })
            }
            WorkingCorrelation::Unstructured(m) => m.clone(),
        }
    }
}

/// `Omega^{-1}` in a form the solver can apply cheaply.
#[derive(Debug, Clone, PartialEq)]
pub enum OmegaInverse {
    Identity,
    /// `diag * I + all * 1 1'`
    Compound { diag: f64, all: f64 },
    Dense(DMatrix<f64>),
}

impl OmegaInverse {
    pub fn to_matrix(&self, k: usize) -> DMatrix<f64> {
        match self {
            Self::Identity => DMatrix::identity(k, k),
            Self::Compound { diag, all } => {
                DMatrix::from_fn(k, k, |i, j| if i == j { diag + all } else { *all })
            }
            Self::Dense(m) => m.clone(),
        }
    }
}

pub fn build_omega_inverse(structure: &CorrelationStructure) -> Result<OmegaInverse> {
    let k = structure.k;
    match &structure.correlation {
        WorkingCorrelation::Independence => Ok(OmegaInverse::Identity),
        WorkingCorrelation::Exchangeable(alpha) => {
            let a = *alpha;
            if k <= 1 {
                return Ok(OmegaInverse::Identity);
            }
            let lower = -1.0 / (k as f64 - 1.0);
            if !(a > lower && a < 1.0) {
                return Err(Error::Numeric(format!(
                    "exchangeable alpha {a} outside the positive-definite range ({lower}, 1)"
                )));
            }
            if a == 0.0 {
                return Ok(OmegaInverse::Identity);
            }
            let diag = 1.0 / (1.0 - a);
            let all = -a / ((1.0 - a) * (1.0 + (k as f64 - 1.0) * a));
            Ok(OmegaInverse::Compound { diag, all })
        }
        WorkingCorrelation::Unstructured(m) => {
            let chol = m.clone().cholesky().ok_or_else(|| {
                Error::Numeric("unstructured working correlation is not positive definite".into())
            })?;
            Ok(OmegaInverse::Dense(chol.inverse()))
        }
    }
}

/// Weights rescaled to average one over positive entries.
fn unit_mean(weights: &[f64]) -> Vec<f64> {
    let n = weights.iter().filter(|&&w| w > 0.0).count();
    let total: f64 = weights.iter().sum();
    if n == 0 || total <= 0.0 {
        return weights.to_vec();
    }
    let scale = n as f64 / total;
    weights.iter().map(|w| w * scale).collect()
}

fn check_lengths<R: AsRef<[f64]>>(residuals: &[R], weights: &[f64]) -> Result<()> {
    if residuals.len() != weights.len() {
        return Err(Error::DimensionMismatch {
            expected: residuals.len(),
            found: weights.len(),
        });
    }
    Ok(())
}

fn constant_k<R: AsRef<[f64]>>(residuals: &[R]) -> Result<usize> {
    let k = residuals.first().map_or(0, |r| r.as_ref().len());
    if residuals.iter().any(|r| r.as_ref().len() != k) {
        return Err(Error::StructureNotApplicable(
            "correlation moment estimators require a constant cluster size".into(),
        ));
    }
    Ok(k)
}

pub fn estimate_dispersion<R: AsRef<[f64]>>(residuals: &[R], weights: &[f64], p: usize) -> Result<f64> {
    check_lengths(residuals, weights)?;
    let w = unit_mean(weights);
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, wi) in residuals.iter().zip(&w) {
        let r = r.as_ref();
        num += wi * r.iter().map(|v| v * v).sum::<f64>();
        den += wi * r.len() as f64;
    }
    den -= p as f64;
    if den <= 0.0 {
        return Err(Error::InsufficientData(format!(
            "dispersion denominator {den} is not positive"
        )));
    }
    Ok(num / den)
}

/// Returns `(alpha, clamped)`.
pub fn estimate_alpha_exchangeable<R: AsRef<[f64]>>(
    residuals: &[R],
    weights: &[f64],
    _p: usize,
    phi: f64,
) -> Result<(f64, bool)> {
    check_lengths(residuals, weights)?;
    let k = constant_k(residuals)?;
    if k < 2 {
        return Err(Error::StructureNotApplicable(
            "exchangeable correlation needs clusters of size 2 or more".into(),
        ));
    }
    if phi <= 0.0 {
        return Ok((0.0, false));
    }
    let w = unit_mean(weights);
    let mut cross = 0.0;
    let mut pairs = 0.0;
    for (r, wi) in residuals.iter().zip(&w) {
        let r = r.as_ref();
        let s: f64 = r.iter().sum();
        let ss: f64 = r.iter().map(|v| v * v).sum();
        cross += wi * 0.5 * (s * s - ss);
        pairs += wi * 0.5 * (k * (k - 1)) as f64;
    }
    let raw = cross / (phi * pairs);
    Ok(clamp_exchangeable(raw, k))
}

fn clamp_exchangeable(alpha: f64, k: usize) -> (f64, bool) {
    let lo = -1.0 / (k as f64 - 1.0) + PD_MARGIN;
    let hi = 1.0 - PD_MARGIN;
    if alpha < lo {
        (lo, true)
    } else if alpha > hi {
        (hi, true)
    } else {
        (alpha, false)
    }
}

/// Returns `(matrix, projected)`; the matrix has unit diagonal and is
/// shrunk toward the identity until positive definite.
pub fn estimate_alpha_general<R: AsRef<[f64]>>(
    residuals: &[R],
    weights: &[f64],
    p: usize,
    phi: f64,
) -> Result<(DMatrix<f64>, bool)> {
    check_lengths(residuals, weights)?;
    let k = constant_k(residuals)?;
    let w = unit_mean(weights);
    let den = w.iter().sum::<f64>() - p as f64;
    if den <= 0.0 {
        return Err(Error::InsufficientData(format!(
            "correlation denominator {den} is not positive"
        )));
    }
    let mut m = DMatrix::identity(k, k);
    if phi <= 0.0 {
        return Ok((m, false));
    }
    for a in 0..k {
        for b in (a + 1)..k {
            let s: f64 = residuals
                .iter()
                .zip(&w)
                .map(|(r, wi)| wi * r.as_ref()[a] * r.as_ref()[b])
                .sum();
            let v = s / (phi * den);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
    Ok(shrink_to_pd(m))
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn shrink_to_pd(m: DMatrix<f64>) -> (DMatrix<f64>, bool) {
    let k = m.nrows();
    if k < 2 || min_eigenvalue(&m) >= PD_MARGIN {
        return (m, false);
    }
    let id = DMatrix::<f64>::identity(k, k);
    for step in 1..=20 {
        let delta = 0.05 * step as f64;
        let s = &m * (1.0 - delta) + &id * delta;
        if min_eigenvalue(&s) >= PD_MARGIN {
            return (s, true);
        }
    }
    (id, true)
}
