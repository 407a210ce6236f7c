//! Multiplier-resampling variance for the refit on the selected covariates,
//! and Wald intervals.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::CorrelationKind;
use crate::data::ClusteredDataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::solver::{FitResult, PenaltySpec, Solver, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MultiplierLaw {
    /// Standard exponential.
    #[default]
    Exponential1,
    /// 0 or 2 with probability one half each.
    TwoPoint,
    /// Always 1; only useful for testing.
    Degenerate,
}

impl MultiplierLaw {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Exponential1 => rng.sample(Exp1),
            Self::TwoPoint => {
                if rng.gen_bool(0.5) {
                    2.0
                } else {
                    0.0
                }
            }
            Self::Degenerate => 1.0,
        }
    }
}

impl FromStr for MultiplierLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exp" | "exponential" | "exponential1" => Ok(Self::Exponential1),
            "twopoint" | "two-point" => Ok(Self::TwoPoint),
            "degenerate" | "one" => Ok(Self::Degenerate),
            other => Err(Error::InvalidConfig(format!("unknown multiplier law '{other}'"))),
        }
    }
}

impl fmt::Display for MultiplierLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Exponential1 => "exp",
            Self::TwoPoint => "twopoint",
            Self::Degenerate => "degenerate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleConfig {
    pub replicates: usize,
    pub multiplier_law: MultiplierLaw,
    pub seed: u64,
    pub refit_active_only: bool,
    pub level: f64,
}

impl Default for ResampleConfig {
    fn default() -> Self {
        Self {
            replicates: 200,
            multiplier_law: MultiplierLaw::Exponential1,
            seed: 1,
            refit_active_only: true,
            level: 0.95,
        }
    }
}

impl ResampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 replicates, got {}",
                self.replicates
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidConfig(format!("level must be in (0,1), got {}", self.level)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceResult {
    /// Dataset columns covered, in order.
    pub columns: Vec<usize>,
    /// Unpenalized refit on `columns`.
    pub estimate: Vec<f64>,
    pub se: Vec<f64>,
    #[serde(skip)]
    pub covariance: DMatrix<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub b_requested: usize,
    pub b_effective: usize,
    pub unreliable: bool,
    pub note: Option<String>,
}

impl VarianceResult {
    fn empty(rconfig: &ResampleConfig, note: &str) -> Self {
        Self {
            columns: Vec::new(),
            estimate: Vec::new(),
            se: Vec::new(),
            covariance: DMatrix::zeros(0, 0),
            ci_lower: Vec::new(),
            ci_upper: Vec::new(),
            level: rconfig.level,
            b_requested: rconfig.replicates,
            b_effective: 0,
            unreliable: false,
            note: Some(note.to_string()),
        }
    }

    /// SE of dataset column `j`, if it was covered.
    pub fn se_of(&self, j: usize) -> Option<f64> {
        self.columns.iter().position(|&c| c == j).map(|k| self.se[k])
    }
}

pub fn normal_quantile(q: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(q)
}

/// `estimate ± z_{(1+level)/2} se`.
pub fn wald_ci(estimate: f64, se: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!("level must be in (0,1), got {level}")));
    }
    if !(se >= 0.0) {
        return Err(Error::InvalidConfig(format!("standard error must be >= 0, got {se}")));
    }
    if se == 0.0 {
        return Ok((estimate, estimate));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    Ok((estimate - z * se, estimate + z * se))
}

/// Per-replicate RNG: the seed picks the family, the replicate picks the stream.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Empirical covariance, accumulated relative to the first row so that
/// identical replicates give an exactly zero matrix.
fn empirical_covariance(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let q = rows[0].len();
    let b = rows.len() as f64;
    let x0 = &rows[0];
    let mut mean = vec![0.0; q];
    let mut cov = DMatrix::zeros(q, q);
    for r in rows {
        let d: Vec<f64> = r.iter().zip(x0).map(|(a, c)| a - c).collect();
        for a in 0..q {
            mean[a] += d[a];
            for c in 0..q {
                cov[(a, c)] += d[a] * d[c];
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= b);
    for a in 0..q {
        for c in 0..q {
            cov[(a, c)] = (cov[(a, c)] - b * mean[a] * mean[c]) / (b - 1.0);
        }
    }
    cov
}

/// Unpenalized refit on the point fit's active set, then `B` refits with
/// cluster weights `Z_i w_i` entering the KM, the covariate means, the
/// working-correlation moments and the estimating function.
pub fn resample_variance(
    ds: &ClusteredDataset,
    point_fit: &FitResult,
    rconfig: &ResampleConfig,
    config: &SolverConfig,
    kind: CorrelationKind,
) -> Result<VarianceResult> {
    rconfig.validate()?;
    let columns: Vec<usize> = if rconfig.refit_active_only {
        point_fit.active_set.clone()
    } else {
        (0..ds.p).collect()
    };
    if columns.is_empty() {
        return Ok(VarianceResult::empty(rconfig, "empty active set; nothing to refit"));
    }
    if !point_fit.converged {
        log::warn!("point fit did not converge; resampling anyway");
    }
    let sub = ds.select_columns(&columns);
    let q = columns.len();
    let spec = PenaltySpec::none(q);
    let solver = Solver::new(&sub, kind, config)?;
    let start: Vec<f64> = columns.iter().map(|&j| point_fit.beta[j]).collect();
    let refit = solver.fit(&spec, config, &start)?;
    if !refit.converged {
        return Err(Error::NonConvergence {
            iterations: refit.outer_iters,
            last_delta: refit.trace.last().copied().unwrap_or(f64::NAN),
            trace: refit.trace,
            last: refit.beta,
        });
    }
    let n_sampled = sub.n_sampled();
    let penalty_n = solver.penalty_n();

    let replicates: Vec<Option<Vec<f64>>> = map_indexed(rconfig.replicates, |b| {
        let mut rng = replicate_rng(rconfig.seed, b as u64 + 1);
        let z: Vec<f64> = (0..n_sampled).map(|_| rconfig.multiplier_law.draw(&mut rng)).collect();
        let design = Design::with_multipliers(&sub, &z).ok()?;
        let s = Solver::from_design(design, kind, penalty_n).ok()?;
        let fit = s.fit(&spec, config, &refit.beta).ok()?;
        fit.converged.then_some(fit.beta)
    });
    let kept: Vec<Vec<f64>> = replicates.into_iter().flatten().collect();
    let b_eff = kept.len();
    let unreliable = (b_eff as f64) < 0.8 * rconfig.replicates as f64;
    let mut note = None;
    if unreliable {
        note = Some(format!(
            "only {b_eff} of {} replicates converged; variance unreliable",
            rconfig.replicates
        ));
        log::warn!("{}", note.as_deref().unwrap_or_default());
    }
    if b_eff < 2 {
        let mut out = VarianceResult::empty(rconfig, note.as_deref().unwrap_or("fewer than 2 replicates converged"));
        out.columns = columns;
        out.estimate = refit.beta;
        out.unreliable = true;
        out.b_effective = b_eff;
        return Ok(out);
    }
    let covariance = empirical_covariance(&kept);
    let se: Vec<f64> = (0..q).map(|j| covariance[(j, j)].max(0.0).sqrt()).collect();
    let mut ci_lower = Vec::with_capacity(q);
    let mut ci_upper = Vec::with_capacity(q);
    for j in 0..q {
        let (lo, hi) = wald_ci(refit.beta[j], se[j], rconfig.level)?;
        ci_lower.push(lo);
        ci_upper.push(hi);
    }
    Ok(VarianceResult {
        columns,
        estimate: refit.beta,
        se,
        covariance,
        ci_lower,
        ci_upper,
        level: rconfig.level,
        b_requested: rconfig.replicates,
        b_effective: b_eff,
        unreliable,
        note,
    })
}
