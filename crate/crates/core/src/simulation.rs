//! Monte Carlo engine: clustered AFT cohorts with Clayton-dependent errors,
//! censoring calibration, event-count stratified sampling, and selection /
//! estimation metrics across replications.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::correlation::CorrelationKind;
use crate::data::{Cluster, ClusteredDataset, Observation, StratumCount};
use crate::design::{dot, Design};
use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::solver::{PenaltySpec, Solver, SolverConfig};
use crate::tuning::{self, TuneConfig};
use crate::variance::{replicate_rng, resample_variance, ResampleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ErrorMarginal {
    #[default]
    StdNormal,
    StdLogistic,
    StdGumbel,
}

impl ErrorMarginal {
    /// Inverse CDF of the marginal.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            Self::StdNormal => Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(u),
            Self::StdLogistic => (u / (1.0 - u)).ln(),
            Self::StdGumbel => -(-u.ln()).ln(),
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            Self::StdNormal => Normal::new(0.0, 1.0).expect("standard normal").cdf(t),
            Self::StdLogistic => 1.0 / (1.0 + (-t).exp()),
            Self::StdGumbel => (-(-t).exp()).exp(),
        }
    }
}

impl FromStr for ErrorMarginal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sn" | "normal" | "stdnormal" => Ok(Self::StdNormal),
            "sl" | "logistic" | "stdlogistic" => Ok(Self::StdLogistic),
            "sg" | "gumbel" | "stdgumbel" => Ok(Self::StdGumbel),
            other => Err(Error::InvalidConfig(format!("unknown error marginal '{other}'"))),
        }
    }
}

impl fmt::Display for ErrorMarginal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::StdNormal => "SN",
            Self::StdLogistic => "SL",
            Self::StdGumbel => "SG",
        })
    }
}

/// Default coefficient vector: five nonzero effects among eighteen.
pub fn default_beta() -> Vec<f64> {
    let mut b = vec![0.0; 18];
    b[0] = 0.35;
    b[3] = 0.6;
    b[6] = -0.8;
    b[9] = 0.6;
    b[12] = -0.8;
    b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    pub n_cohort: usize,
    pub k: usize,
    pub p: usize,
    pub beta_true: Vec<f64>,
    pub error_marginal: ErrorMarginal,
    pub kendall_tau: f64,
    pub censoring_target: f64,
    pub inclusion_probs: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
}

impl Default for SimulationScenario {
    fn default() -> Self {
        Self {
            n_cohort: 3000,
            k: 3,
            p: 18,
            beta_true: default_beta(),
            error_marginal: ErrorMarginal::StdNormal,
            kendall_tau: 0.6,
            censoring_target: 0.8,
            inclusion_probs: vec![0.1, 0.2, 0.3, 0.6],
            replications: 200,
            seed: 2024,
        }
    }
}

impl SimulationScenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_cohort == 0 || self.k == 0 || self.p == 0 {
            return bad("cohort size, cluster size and p must be positive".into());
        }
        if self.beta_true.len() != self.p {
            return bad(format!("beta_true has {} entries, p = {}", self.beta_true.len(), self.p));
        }
        if !(0.0..1.0).contains(&self.kendall_tau) {
            return bad(format!("kendall_tau must be in [0,1), got {}", self.kendall_tau));
        }
        if !(self.censoring_target > 0.0 && self.censoring_target < 1.0) {
            return bad(format!("censoring target must be in (0,1), got {}", self.censoring_target));
        }
        if self.inclusion_probs.len() != self.k + 1 {
            return bad(format!(
                "need {} inclusion probabilities (one per event count), got {}",
                self.k + 1,
                self.inclusion_probs.len()
            ));
        }
        if self.inclusion_probs.iter().any(|&q| !(q > 0.0 && q <= 1.0)) {
            return bad("inclusion probabilities must be in (0,1]".into());
        }
        if self.replications == 0 {
            return bad("replications must be positive".into());
        }
        Ok(())
    }

    pub fn support(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| self.beta_true[j] != 0.0).collect()
    }
}

/// `count` clusters of `k` errors whose uniforms follow a Clayton copula
/// with `theta = 2 tau / (1 - tau)` (gamma-frailty construction).
pub fn gen_clayton_errors<R: Rng + ?Sized>(
    k: usize,
    tau: f64,
    marginal: ErrorMarginal,
    count: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let theta = 2.0 * tau / (1.0 - tau);
    let frailty = (theta > 0.0).then(|| Gamma::new(1.0 / theta, 1.0).expect("valid gamma"));
    (0..count)
        .map(|_| {
            let v = frailty.as_ref().map(|g| g.sample(rng));
            (0..k)
                .map(|_| {
                    let u: f64 = match v {
                        Some(v) => {
                            let e: f64 = rng.sample(Exp1);
                            (1.0 + e / v).powf(-1.0 / theta)
                        }
                        None => rng.gen(),
                    };
                    marginal.quantile(u.clamp(1e-300, 1.0 - 1e-16))
                })
                .collect()
        })
        .collect()
}

/// Lower Cholesky factor of the `k x k` matrix `rho^|a-b|`.
fn ar1_factor(k: usize, rho: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(k, k, |a, b| rho.powi((a as i32 - b as i32).abs()));
    m.cholesky().expect("AR(1) correlation is positive definite").l()
}

/// Per-cluster `k x p` covariate blocks (row-major, member-major): each
/// covariate is multivariate standard normal across the `k` members with
/// correlation `0.5^|k1-k2|`, independent across covariates and clusters.
pub fn gen_covariates<R: Rng + ?Sized>(n: usize, k: usize, p: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let l = ar1_factor(k, 0.5);
    (0..n)
        .map(|_| {
            let mut block = vec![0.0; k * p];
            for j in 0..p {
                let z = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
                let x = &l * z;
                for m in 0..k {
                    block[m * p + j] = x[m];
                }
            }
            block
        })
        .collect()
}

/// Latent log failure times, one row per cluster.
fn gen_failure_times<R: Rng + ?Sized>(scenario: &SimulationScenario, n: usize, rng: &mut R) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let x = gen_covariates(n, scenario.k, scenario.p, rng);
    let e = gen_clayton_errors(scenario.k, scenario.kendall_tau, scenario.error_marginal, n, rng);
    let t = x
        .iter()
        .zip(&e)
        .map(|(block, err)| {
            (0..scenario.k)
                .map(|m| dot(&block[m * scenario.p..(m + 1) * scenario.p], &scenario.beta_true) + err[m])
                .collect()
        })
        .collect();
    (x, t)
}

/// Censoring fraction when `C = ln(kappa V)`, `V ~ U(0,1)`, for the fixed
/// draws `t` and `log_v`.
fn censoring_rate(t: &[f64], log_v: &[f64], log_kappa: f64) -> f64 {
    let c = t.iter().zip(log_v).filter(|(t, lv)| **t > log_kappa + **lv).count();
    c as f64 / t.len() as f64
}

pub const CALIBRATION_OBS: usize = 100_000;
pub const CALIBRATION_TOL: f64 = 0.005;

/// Bisection on `ln kappa` against a calibration sample of at least 1e5
/// observations with common random numbers. Returns `kappa` such that the
/// calibration sample's censoring rate is within 0.005 of `target`.
pub fn calibrate_censoring<R: Rng + ?Sized>(scenario: &SimulationScenario, target: f64, rng: &mut R) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!("censoring target must be in (0,1), got {target}")));
    }
    let n = CALIBRATION_OBS.div_ceil(scenario.k);
    let (_, t) = gen_failure_times(scenario, n, rng);
    let t: Vec<f64> = t.into_iter().flatten().collect();
    let log_v: Vec<f64> = (0..t.len()).map(|_| rng.gen::<f64>().max(1e-300).ln()).collect();
    let tmin = t.iter().copied().fold(f64::INFINITY, f64::min);
    let tmax = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lo = tmin - 1.0;
    let mut hi = tmax + 1.0;
    let mut expand = 0;
    while censoring_rate(&t, &log_v, hi) > target {
        hi += (tmax - tmin).max(1.0);
        expand += 1;
        if expand > 200 {
            return Err(Error::Calibration(format!(
                "no kappa reaches censoring {target}; rate at ln kappa = {hi} is {}",
                censoring_rate(&t, &log_v, hi)
            )));
        }
    }
    if censoring_rate(&t, &log_v, lo) < target {
        return Err(Error::Calibration(format!(
            "censoring {target} unreachable: rate at ln kappa = {lo} is {}",
            censoring_rate(&t, &log_v, lo)
        )));
    }
    let mut best = (f64::INFINITY, hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = censoring_rate(&t, &log_v, mid);
        if (r - target).abs() < best.0 {
            best = ((r - target).abs(), mid);
        }
        if (r - target).abs() < 1e-4 {
            break;
        }
        if r > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if best.0 > CALIBRATION_TOL {
        return Err(Error::Calibration(format!(
            "bisection reached |rate - target| = {} > {CALIBRATION_TOL}",
            best.0
        )));
    }
    Ok(best.1.exp())
}

/// Full cohort with every cluster's covariates; stratum labels are set to
/// `1 + number of events`.
pub fn gen_cohort<R: Rng + ?Sized>(scenario: &SimulationScenario, kappa: f64, rng: &mut R) -> Vec<Cluster> {
    let (x, t) = gen_failure_times(scenario, scenario.n_cohort, rng);
    let p = scenario.p;
    x.into_iter()
        .zip(t)
        .enumerate()
        .map(|(i, (block, times))| {
            let members: Vec<Observation> = times
                .iter()
                .enumerate()
                .map(|(m, &ti)| {
                    let c = (kappa * rng.gen::<f64>()).max(1e-300).ln();
                    let event = ti <= c;
                    Observation::new(if event { ti } else { c }, event, block[m * p..(m + 1) * p].to_vec())
                })
                .collect();
            let events = members.iter().filter(|o| o.event).count();
            Cluster {
                id: format!("c{}", i + 1),
                stratum: events + 1,
                sampled: true,
                members,
            }
        })
        .collect()
}

/// Simple random sample of `max(round(n_s p_s), 1)` clusters from each
/// non-empty stratum (stratum `s` = clusters with `s - 1` events). Only the
/// sampled clusters are kept; strata counts carry the cohort sizes.
pub fn stratify_and_sample<R: Rng + ?Sized>(
    cohort: &[Cluster],
    inclusion_probs: &[f64],
    covariate_names: Vec<String>,
    rng: &mut R,
) -> Result<ClusteredDataset> {
    let n_strata = inclusion_probs.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, c) in cohort.iter().enumerate() {
        let events = c.members.iter().filter(|o| o.event).count();
        if events >= n_strata {
            return Err(Error::InvalidConfig(format!(
                "cluster {} has {events} events but only {n_strata} strata",
                c.id
            )));
        }
        members[events].push(i);
    }
    let mut picked = Vec::new();
    let mut counts = Vec::new();
    for (s, idx) in members.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let n_s = idx.len();
        let m = ((n_s as f64 * inclusion_probs[s]).round() as usize).clamp(1, n_s);
        let chosen = rand::seq::index::sample(rng, n_s, m);
        picked.extend(chosen.iter().map(|q| idx[q]));
        counts.push(StratumCount::new(s + 1, n_s, m));
    }
    picked.sort_unstable();
    let clusters = picked
        .into_iter()
        .map(|i| Cluster {
            stratum: cohort[i].members.iter().filter(|o| o.event).count() + 1,
            sampled: true,
            ..cohort[i].clone()
        })
        .collect();
    ClusteredDataset::new(clusters, covariate_names, Some(counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Weighted,
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rule {
    /// SCAD at the CV-minimizing λ.
    Scad1,
    /// SCAD at the one-standard-error λ.
    Scad2,
    /// Unpenalized fit on the true support.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Method {
    pub weighting: Weighting,
    pub structure: CorrelationKind,
    pub rule: Rule,
    /// Run multiplier resampling for the first coefficient.
    pub variance: bool,
}

impl Method {
    pub fn new(weighting: Weighting, structure: CorrelationKind, rule: Rule, variance: bool) -> Self {
        Self {
            weighting,
            structure,
            rule,
            variance,
        }
    }

    pub fn label(&self) -> String {
        let w = match self.weighting {
            Weighting::Weighted => "weighted",
            Weighting::Unweighted => "unweighted",
        };
        let s = match self.structure {
            CorrelationKind::Independence => "wi",
            CorrelationKind::Exchangeable => "ex",
            CorrelationKind::Unstructured => "un",
        };
        let r = match self.rule {
            Rule::Scad1 => "scad1",
            Rule::Scad2 => "scad2",
            Rule::Oracle => "oracle",
        };
        format!("{w}-{s}-{r}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub solver: SolverConfig,
    pub tune: TuneConfig,
    pub resample: ResampleConfig,
    /// Index of the coefficient tracked for bias/coverage (0-based).
    pub focus: usize,
    /// Abort when more than this fraction of replications fail.
    pub max_failure_rate: f64,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            solver: SolverConfig::default(),
            tune: TuneConfig::default(),
            resample: ResampleConfig::default(),
            focus: 0,
            max_failure_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub beta: Vec<f64>,
    pub model_error: f64,
    pub converged: bool,
    pub lambda: Option<f64>,
    pub focus_se: Option<f64>,
    pub focus_ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub index: usize,
    pub n_sampled: usize,
    pub censoring_rate: f64,
    pub methods: Vec<MethodRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub tp: f64,
    pub fp: f64,
    pub c_pct: f64,
    pub me_median: f64,
    pub mse_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub n_c: usize,
    pub br_pct: f64,
    pub se_a: f64,
    pub se_e: f64,
    pub cp_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub label: String,
    pub selection: SelectionMetrics,
    pub estimation: EstimationMetrics,
    pub nonconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyResult {
    pub kappa: f64,
    pub summaries: Vec<MethodSummary>,
    pub records: Vec<ReplicationRecord>,
    pub failures: Vec<(usize, String)>,
    pub mean_sampled: f64,
    pub mean_censoring: f64,
}

/// Model error over the sampled design: `sum_rows {x'(beta_hat - beta0)}^2`.
pub fn model_error(design: &Design, beta_hat: &[f64], beta_true: &[f64]) -> f64 {
    let d: Vec<f64> = beta_hat.iter().zip(beta_true).map(|(a, b)| a - b).collect();
    (0..design.n_obs()).map(|r| dot(design.row(r), &d).powi(2)).sum()
}

pub fn selection_metrics(betas: &[Vec<f64>], model_errors: &[f64], beta_true: &[f64]) -> SelectionMetrics {
    let n = betas.len() as f64;
    let (mut tp, mut fp, mut correct, mut mse) = (0.0, 0.0, 0.0, 0.0);
    for b in betas {
        let t = b.iter().zip(beta_true).filter(|(h, t)| **h != 0.0 && **t != 0.0).count();
        let f = b.iter().zip(beta_true).filter(|(h, t)| **h != 0.0 && **t == 0.0).count();
        let misses = b.iter().zip(beta_true).filter(|(h, t)| **h == 0.0 && **t != 0.0).count();
        tp += t as f64;
        fp += f as f64;
        if f == 0 && misses == 0 {
            correct += 1.0;
        }
        mse += b.iter().zip(beta_true).map(|(h, t)| (h - t).powi(2)).sum::<f64>();
    }
    SelectionMetrics {
        tp: tp / n,
        fp: fp / n,
        c_pct: 100.0 * correct / n,
        me_median: median(model_errors),
        mse_mean: mse / n,
    }
}

pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let m = s.len() / 2;
    if s.len() % 2 == 1 {
        s[m]
    } else {
        0.5 * (s[m - 1] + s[m])
    }
}

pub fn estimation_metrics(records: &[&MethodRecord], focus: usize, truth: f64) -> EstimationMetrics {
    let hits: Vec<&&MethodRecord> = records.iter().filter(|r| r.beta[focus] != 0.0).collect();
    let n_c = hits.len();
    let est: Vec<f64> = hits.iter().map(|r| r.beta[focus]).collect();
    let mean = est.iter().sum::<f64>() / n_c as f64;
    let br_pct = if truth != 0.0 { 100.0 * (mean - truth) / truth } else { f64::NAN };
    let se_e = if n_c > 1 {
        (est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n_c - 1) as f64).sqrt()
    } else {
        f64::NAN
    };
    let ses: Vec<f64> = hits.iter().filter_map(|r| r.focus_se).collect();
    let se_a = if ses.is_empty() { f64::NAN } else { ses.iter().sum::<f64>() / ses.len() as f64 };
    let cis: Vec<(f64, f64)> = hits.iter().filter_map(|r| r.focus_ci).collect();
    let cp_pct = if cis.is_empty() {
        f64::NAN
    } else {
        100.0 * cis.iter().filter(|(lo, hi)| *lo <= truth && truth <= *hi).count() as f64 / cis.len() as f64
    };
    EstimationMetrics {
        n_c,
        br_pct,
        se_a,
        se_e,
        cp_pct,
    }
}

/// One replication: cohort, sample, and every method on the same sample.
pub fn run_replication(
    scenario: &SimulationScenario,
    kappa: f64,
    methods: &[Method],
    options: &StudyOptions,
    index: usize,
) -> Result<ReplicationRecord> {
    let mut rng: ChaCha8Rng = replicate_rng(scenario.seed, index as u64 + 1);
    let cohort = gen_cohort(scenario, kappa, &mut rng);
    let n_obs: usize = cohort.iter().map(|c| c.members.len()).sum();
    let censored: usize = cohort.iter().flat_map(|c| &c.members).filter(|o| !o.event).count();
    let names = ClusteredDataset::default_names(scenario.p);
    let weighted = stratify_and_sample(&cohort, &scenario.inclusion_probs, names, &mut rng)?;
    drop(cohort);
    let unweighted = weighted.unweighted();
    let design = Design::from_dataset(&weighted)?;
    let support = scenario.support();
    let p = scenario.p;
    let tune = TuneConfig {
        seed: scenario.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..options.tune.clone()
    };

    // one CV curve per (weighting, structure) shared by SCAD1 and SCAD2
    let mut selections: Vec<((Weighting, CorrelationKind), tuning::Selection)> = Vec::new();
    let mut out = Vec::with_capacity(methods.len());
    for m in methods {
        let ds = match m.weighting {
            Weighting::Weighted => &weighted,
            Weighting::Unweighted => &unweighted,
        };
        let (fit, lambda, fit_ds) = match m.rule {
            Rule::Oracle => {
                let sub = ds.select_columns(&support);
                let solver = Solver::new(&sub, m.structure, &options.solver)?;
                let start = solver.wols()?;
                let fit = solver.fit(&PenaltySpec::none(support.len()), &options.solver, &start)?;
                (fit, None, sub)
            }
            Rule::Scad1 | Rule::Scad2 => {
                let key = (m.weighting, m.structure);
                let pos = match selections.iter().position(|(k, _)| *k == key) {
                    Some(pos) => pos,
                    None => {
                        let sel = tuning::select(ds, &PenaltySpec::scad(p, 0.0), &options.solver, m.structure, &tune)?;
                        selections.push((key, sel));
                        selections.len() - 1
                    }
                };
                let sel = &selections[pos].1;
                let (fit, lambda) = if m.rule == Rule::Scad1 {
                    (sel.fit_cv.clone(), sel.curve.lambda_cv)
                } else {
                    (sel.fit_1se.clone(), sel.curve.lambda_1se)
                };
                (fit, Some(lambda), ds.clone())
            }
        };
        // coefficients in full p-dimensional coordinates
        let (beta, focus_local) = match m.rule {
            Rule::Oracle => {
                let mut b = vec![0.0; p];
                for (q, &j) in support.iter().enumerate() {
                    b[j] = fit.beta[q];
                }
                (b, support.iter().position(|&j| j == options.focus))
            }
            _ => (fit.beta.clone(), Some(options.focus)),
        };
        let (mut focus_se, mut focus_ci) = (None, None);
        if m.variance && beta[options.focus] != 0.0 {
            if let Some(local) = focus_local {
                let rconfig = ResampleConfig {
                    seed: options.resample.seed ^ (index as u64 + 1),
                    ..options.resample.clone()
                };
                let v = resample_variance(&fit_ds, &fit, &rconfig, &options.solver, m.structure)?;
                if let Some(k) = v.columns.iter().position(|&c| c == local) {
                    if v.b_effective >= 2 {
                        focus_se = Some(v.se[k]);
                        focus_ci = Some((v.ci_lower[k], v.ci_upper[k]));
                    }
                }
            }
        }
        out.push(MethodRecord {
            model_error: model_error(&design, &beta, &scenario.beta_true),
            beta,
            converged: fit.converged,
            lambda,
            focus_se,
            focus_ci,
        });
    }
    Ok(ReplicationRecord {
        index,
        n_sampled: weighted.n_sampled(),
        censoring_rate: censored as f64 / n_obs as f64,
        methods: out,
    })
}

/// Calibrates censoring once, then runs all replications in parallel.
pub fn run_study(scenario: &SimulationScenario, methods: &[Method], options: &StudyOptions) -> Result<StudyResult> {
    scenario.validate()?;
    if methods.is_empty() {
        return Err(Error::InvalidConfig("no methods requested".into()));
    }
    if options.focus >= scenario.p {
        return Err(Error::InvalidConfig(format!("focus index {} out of range", options.focus)));
    }
    let mut cal_rng = replicate_rng(scenario.seed, 0);
    let kappa = calibrate_censoring(scenario, scenario.censoring_target, &mut cal_rng)?;
    let results = map_indexed(scenario.replications, |r| run_replication(scenario, kappa, methods, options, r));
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                log::warn!("replication {r} failed: {e}");
                failures.push((r, e.to_string()));
            }
        }
    }
    if failures.len() as f64 > options.max_failure_rate * scenario.replications as f64 {
        let shown: Vec<String> = failures.iter().take(5).map(|(r, e)| format!("#{r}: {e}")).collect();
        return Err(Error::Numeric(format!(
            "{} of {} replications failed; first: {}",
            failures.len(),
            scenario.replications,
            shown.join("; ")
        )));
    }
    let truth = scenario.beta_true[options.focus];
    let summaries = methods
        .iter()
        .enumerate()
        .map(|(mi, m)| {
            let recs: Vec<&MethodRecord> = records.iter().map(|r| &r.methods[mi]).collect();
            let betas: Vec<Vec<f64>> = recs.iter().map(|r| r.beta.clone()).collect();
            let mes: Vec<f64> = recs.iter().map(|r| r.model_error).collect();
            MethodSummary {
                method: *m,
                label: m.label(),
                selection: selection_metrics(&betas, &mes, &scenario.beta_true),
                estimation: estimation_metrics(&recs, options.focus, truth),
                nonconverged: recs.iter().filter(|r| !r.converged).count(),
            }
        })
        .collect();
    let n = records.len().max(1) as f64;
    Ok(StudyResult {
        kappa,
        mean_sampled: records.iter().map(|r| r.n_sampled as f64).sum::<f64>() / n,
        mean_censoring: records.iter().map(|r| r.censoring_rate).sum::<f64>() / n,
        summaries,
        records,
        failures,
    })
}
