//! Stratified M-fold cross-validation over a λ grid, with the CV-minimum and
//! one-standard-error selection rules.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::correlation::CorrelationKind;
use crate::data::ClusteredDataset;
use crate::design::Design;
use crate::error::{Error, Result};
use crate::par::map_indexed;
use crate::solver::{FitResult, PenaltySpec, Solver, SolverConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvPlan {
    pub m: usize,
    /// Fold of each cluster of the dataset; `None` for unsampled clusters.
    pub fold_assignment: Vec<Option<usize>>,
    pub seed: u64,
}

impl CvPlan {
    /// Dataset indices of the clusters in fold `m`.
    pub fn fold(&self, m: usize) -> Vec<usize> {
        (0..self.fold_assignment.len())
            .filter(|&i| self.fold_assignment[i] == Some(m))
            .collect()
    }

    /// Sampled clusters outside fold `m`.
    pub fn complement(&self, m: usize) -> Vec<usize> {
        (0..self.fold_assignment.len())
            .filter(|&i| matches!(self.fold_assignment[i], Some(f) if f != m))
            .collect()
    }
}

/// Per-stratum random permutation split into `m` near-equal parts; the
/// k-th parts of all strata form fold k. Part offsets rotate from one
/// stratum to the next so that small strata do not all pile into fold 0.
pub fn make_folds(ds: &ClusteredDataset, m: usize, seed: u64) -> Result<CvPlan> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 folds, got {m}")));
    }
    let mut by_stratum: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in ds.sampled_indices() {
        by_stratum.entry(ds.clusters[i].stratum).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_assignment = vec![None; ds.n_clusters()];
    let mut offset = 0;
    for (stratum, members) in by_stratum.iter_mut() {
        if members.len() < m {
            log::warn!(
                "stratum {stratum} has {} sampled clusters, fewer than {m} folds",
                members.len()
            );
        }
        members.shuffle(&mut rng);
        for (q, &i) in members.iter().enumerate() {
            fold_assignment[i] = Some((q + offset) % m);
        }
        offset = (offset + members.len()) % m;
    }
    Ok(CvPlan {
        m,
        fold_assignment,
        seed,
    })
}

/// Per-observation prediction errors on a held-out fold.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionError {
    pub per_obs: Vec<f64>,
    /// Raw design weight of each held-out cluster.
    pub cluster_weights: Vec<f64>,
    /// Row ranges of the held-out clusters in `per_obs`.
    pub offsets: Vec<usize>,
}

impl PredictionError {
    pub fn weighted_sum(&self) -> f64 {
        self.cluster_weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * self.per_obs[self.offsets[i]..self.offsets[i + 1]].iter().sum::<f64>())
            .sum()
    }

    /// `sum_i w_i K_i`.
    pub fn weighted_count(&self) -> f64 {
        self.cluster_weights
            .iter()
            .enumerate()
            .map(|(i, w)| w * (self.offsets[i + 1] - self.offsets[i]) as f64)
            .sum()
    }

    pub fn mean(&self) -> f64 {
        self.weighted_sum() / self.weighted_count()
    }
}

/// Imputed holdout responses at the holdout's own unpenalized estimate,
/// kept for scoring many training fits.
#[derive(Debug, Clone)]
struct Holdout {
    design: Design,
    imputed: Vec<f64>,
    raw_weights: Vec<f64>,
}

impl Holdout {
    fn new(ds: &ClusteredDataset, beta_unpen: &[f64]) -> Result<Self> {
        let design = Design::from_dataset(ds)?;
        let (_, imputed) = crate::km::impute_at_anchor(&design, beta_unpen)?;
        let raw_weights = design.cluster_index().iter().map(|&i| ds.weights[i]).collect();
        Ok(Self {
            design,
            imputed: imputed.values,
            raw_weights,
        })
    }

    fn score(&self, beta_train: &[f64]) -> PredictionError {
        let per_obs = self
            .design
            .xbeta(beta_train)
            .iter()
            .zip(&self.imputed)
            .map(|(xb, y)| (y - xb).powi(2))
            .collect();
        PredictionError {
            per_obs,
            cluster_weights: self.raw_weights.clone(),
            offsets: self.design.offsets().to_vec(),
        }
    }
}

/// `PE_ij = (Yhat_ij(beta_holdout_unpen) - X_ij beta_train)^2`, where the
/// imputation uses the holdout's own weighted KM at `beta_holdout_unpen`.
pub fn prediction_error(
    holdout: &ClusteredDataset,
    beta_train: &[f64],
    beta_holdout_unpen: &[f64],
) -> Result<PredictionError> {
    Ok(Holdout::new(holdout, beta_holdout_unpen)?.score(beta_train))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    /// Descending grid.
    pub lambdas: Vec<f64>,
    /// Weighted mean prediction error per λ; NaN where no fold was valid.
    pub mu: Vec<f64>,
    pub n_valid_folds: Vec<usize>,
    pub se_at_cvmin: f64,
    pub lambda_cv: f64,
    pub lambda_1se: f64,
    pub index_cv: usize,
    pub index_1se: usize,
    pub warnings: Vec<String>,
}

/// Picks λ^CV (first minimizer along the descending grid) and λ^1SE (largest
/// λ whose μ is within one SE of the minimum). Entries with NaN μ are skipped.
pub fn select_from_curve(mu: &[f64], se: f64) -> Option<(usize, usize)> {
    let mut best: Option<usize> = None;
    for (i, &v) in mu.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| v < mu[b]) {
            best = Some(i);
        }
    }
    let cv = best?;
    let bound = mu[cv] + se;
    let one_se = (0..mu.len()).find(|&i| !mu[i].is_nan() && mu[i] <= bound)?;
    Some((cv, one_se))
}

#[derive(Debug, Clone)]
struct FoldWork {
    train: Solver,
    train_start: Vec<f64>,
    holdout: Holdout,
}

fn prepare_fold(
    ds: &ClusteredDataset,
    plan: &CvPlan,
    m: usize,
    config: &SolverConfig,
    kind: CorrelationKind,
) -> Result<FoldWork> {
    let train_ds = ds.subset(&plan.complement(m));
    let hold_ds = ds.subset(&plan.fold(m));
    let train = Solver::new(&train_ds, kind, config)?;
    let train_start = train.wols()?;
    let hold_solver = Solver::new(&hold_ds, kind, config)?;
    let p = ds.p;
    let hold_start = hold_solver.wols()?;
    let hold_fit = hold_solver.fit(&PenaltySpec::none(p), config, &hold_start)?;
    if !hold_fit.converged {
        return Err(Error::NonConvergence {
            iterations: hold_fit.outer_iters,
            last_delta: hold_fit.trace.last().copied().unwrap_or(f64::NAN),
            trace: hold_fit.trace,
            last: hold_fit.beta,
        });
    }
    let holdout = Holdout::new(&hold_ds, &hold_fit.beta)?;
    Ok(FoldWork {
        train,
        train_start,
        holdout,
    })
}

pub fn cv_curve(
    ds: &ClusteredDataset,
    plan: &CvPlan,
    lambda_grid: &[f64],
    spec: &PenaltySpec,
    config: &SolverConfig,
    kind: CorrelationKind,
) -> Result<CvCurve> {
    if lambda_grid.is_empty() {
        return Err(Error::InvalidConfig("empty lambda grid".into()));
    }
    if lambda_grid.windows(2).any(|w| !(w[0] > w[1])) {
        return Err(Error::InvalidConfig("lambda grid must be strictly descending".into()));
    }
    spec.validate(ds.p)?;
    if plan.fold_assignment.len() != ds.n_clusters() {
        return Err(Error::DimensionMismatch {
            expected: ds.n_clusters(),
            found: plan.fold_assignment.len(),
        });
    }
    let m = plan.m;
    let mut warnings = Vec::new();
    let folds: Vec<Option<FoldWork>> = map_indexed(m, |f| prepare_fold(ds, plan, f, config, kind))
        .into_iter()
        .enumerate()
        .map(|(f, r)| match r {
            Ok(w) => Some(w),
            Err(e) => {
                warnings.push(format!("fold {f} invalid: {e}"));
                None
            }
        })
        .collect();

    let nl = lambda_grid.len();
    let scores: Vec<Option<PredictionError>> = map_indexed(m * nl, |t| {
        let (f, l) = (t / nl, t % nl);
        let work = folds[f].as_ref()?;
        let fit = work
            .train
            .fit(&spec.with_lambda(lambda_grid[l]), config, &work.train_start)
            .ok()?;
        fit.converged.then(|| work.holdout.score(&fit.beta))
    });

    let mut mu = vec![f64::NAN; nl];
    let mut n_valid = vec![0; nl];
    for l in 0..nl {
        let (mut s, mut c) = (0.0, 0.0);
        for f in 0..m {
            if let Some(pe) = &scores[f * nl + l] {
                s += pe.weighted_sum();
                c += pe.weighted_count();
                n_valid[l] += 1;
            }
        }
        if n_valid[l] > 0 {
            mu[l] = s / c;
        } else {
            warnings.push(format!("lambda {} dropped: no valid folds", lambda_grid[l]));
        }
        if n_valid[l] > 0 && n_valid[l] < m {
            warnings.push(format!(
                "lambda {}: {} of {m} folds valid",
                lambda_grid[l], n_valid[l]
            ));
        }
    }
    let (index_cv, _) = select_from_curve(&mu, 0.0)
        .ok_or_else(|| Error::InsufficientData("no lambda has a valid fold".into()))?;

    let n_sampled = ds.n_sampled() as f64;
    let (mut ss, mut wsum) = (0.0, 0.0);
    for f in 0..m {
        if let Some(pe) = &scores[f * nl + index_cv] {
            for (i, w) in pe.cluster_weights.iter().enumerate() {
                wsum += w;
                ss += w * pe.per_obs[pe.offsets[i]..pe.offsets[i + 1]]
                    .iter()
                    .map(|v| (v - mu[index_cv]).powi(2))
                    .sum::<f64>();
            }
        }
    }
    let se = if n_sampled > 1.0 {
        (ss / (wsum * (n_sampled - 1.0))).sqrt()
    } else {
        0.0
    };
    let (index_cv, index_1se) = select_from_curve(&mu, se).expect("curve has a valid entry");
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(CvCurve {
        lambdas: lambda_grid.to_vec(),
        mu,
        n_valid_folds: n_valid,
        se_at_cvmin: se,
        lambda_cv: lambda_grid[index_cv],
        lambda_1se: lambda_grid[index_1se],
        index_cv,
        index_1se,
        warnings,
    })
}

/// Smallest λ (to relative precision 1e-3) at which the cold-started fit
/// zeroes every non-exempt coefficient.
pub fn lambda_max(solver: &Solver, spec: &PenaltySpec, config: &SolverConfig, start: &[f64]) -> Result<f64> {
    let zeroes = |lambda: f64| -> Result<bool> {
        let fit = solver.fit(&spec.with_lambda(lambda), config, start)?;
        Ok(fit
            .beta
            .iter()
            .zip(&spec.exempt)
            .all(|(b, &ex)| ex || *b == 0.0))
    };
    if spec.exempt.iter().all(|&e| e) {
        return Err(Error::InvalidConfig("every coefficient is exempt from the penalty".into()));
    }
    let scale = start
        .iter()
        .zip(&spec.exempt)
        .filter(|(_, &ex)| !ex)
        .fold(0.0f64, |a, (b, _)| a.max(b.abs()));
    let mut hi = if scale > 0.0 { scale } else { 1.0 };
    let mut steps = 0;
    while !zeroes(hi)? {
        hi *= 2.0;
        steps += 1;
        if steps > 60 {
            return Err(Error::Numeric("no lambda zeroes the penalized coefficients".into()));
        }
    }
    let mut lo = hi / 2.0;
    while zeroes(lo)? {
        hi = lo;
        lo /= 2.0;
        if lo < 1e-12 {
            return Ok(hi);
        }
    }
    while hi / lo > 1.0 + 1e-3 {
        let mid = (lo * hi).sqrt();
        if zeroes(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// `n` log-spaced values from `lambda_max` down to `lambda_max * min_ratio`.
pub fn lambda_grid(lambda_max: f64, min_ratio: f64, n: usize) -> Result<Vec<f64>> {
    if !(lambda_max > 0.0) || !(min_ratio > 0.0 && min_ratio < 1.0) || n == 0 {
        return Err(Error::InvalidConfig(format!(
            "invalid grid: lambda_max {lambda_max}, ratio {min_ratio}, n {n}"
        )));
    }
    if n == 1 {
        return Ok(vec![lambda_max]);
    }
    let (a, b) = (lambda_max.ln(), (lambda_max * min_ratio).ln());
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub folds: usize,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            n_lambda: 50,
            lambda_min_ratio: 1e-3,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub lambda_max: f64,
    pub curve: CvCurve,
    pub fit_cv: FitResult,
    pub fit_1se: FitResult,
}

/// Full pipeline: λ_max on the full data, grid, folds, curve, and full-data
/// refits at both selected λs.
pub fn select(
    ds: &ClusteredDataset,
    spec: &PenaltySpec,
    config: &SolverConfig,
    kind: CorrelationKind,
    tune: &TuneConfig,
) -> Result<Selection> {
    let solver = Solver::new(ds, kind, config)?;
    let start = solver.wols()?;
    let lmax = lambda_max(&solver, spec, config, &start)?;
    let grid = lambda_grid(lmax, tune.lambda_min_ratio, tune.n_lambda)?;
    let plan = make_folds(ds, tune.folds, tune.seed)?;
    let curve = cv_curve(ds, &plan, &grid, spec, config, kind)?;
    let fit_cv = solver.fit(&spec.with_lambda(curve.lambda_cv), config, &start)?;
    let fit_1se = if curve.index_1se == curve.index_cv {
        fit_cv.clone()
    } else {
        solver.fit(&spec.with_lambda(curve.lambda_1se), config, &start)?
    };
    Ok(Selection {
        lambda_max: lmax,
        curve,
        fit_cv,
        fit_1se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Observation, StratumCount};

    fn strata_dataset(sizes: &[usize]) -> ClusteredDataset {
        let mut clusters = Vec::new();
        for (s, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                clusters.push(Cluster {
                    id: format!("{s}-{i}"),
                    stratum: s + 1,
                    sampled: true,
                    members: vec![Observation::new(i as f64, true, vec![i as f64])],
                });
            }
        }
        let counts = sizes
            .iter()
            .enumerate()
            .map(|(s, &n)| StratumCount::new(s + 1, 2 * n, n))
            .collect();
        ClusteredDataset::new(clusters, vec!["x".into()], Some(counts)).unwrap()
    }

    #[test]
    fn folds_balance_within_strata() {
        let ds = strata_dataset(&[10, 20]);
        let plan = make_folds(&ds, 5, 9).unwrap();
        for f in 0..5 {
            let members = plan.fold(f);
            let s1 = members.iter().filter(|&&i| ds.clusters[i].stratum == 1).count();
            assert_eq!((s1, members.len() - s1), (2, 4));
        }
        assert_eq!(plan, make_folds(&ds, 5, 9).unwrap());
        assert_ne!(plan, make_folds(&ds, 5, 10).unwrap());
        assert!(make_folds(&ds, 1, 9).is_err());
    }

    #[test]
    fn small_strata_rotate() {
        let ds = strata_dataset(&[3, 3, 3, 11]);
        let plan = make_folds(&ds, 5, 2).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| plan.fold(f).len()).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 20);
        assert!(sizes.iter().all(|&s| s == 4));
    }

    #[test]
    fn selection_rules() {
        // flat curve: both rules take the largest λ
        assert_eq!(select_from_curve(&[1.0, 1.0, 1.0], 0.0), Some((0, 0)));
        // convex with unique minimum
        assert_eq!(select_from_curve(&[3.0, 2.0, 1.0, 2.0], 0.0), Some((2, 2)));
        assert_eq!(select_from_curve(&[3.0, 1.5, 1.0, 2.0], 0.6), Some((2, 1)));
        // zero SE: largest λ attaining the minimum
        assert_eq!(select_from_curve(&[2.0, 1.0, 1.0], 0.0), Some((1, 1)));
        assert_eq!(select_from_curve(&[f64::NAN, 2.0], 5.0), Some((1, 1)));
        assert_eq!(select_from_curve(&[f64::NAN], 0.0), None);
    }

    #[test]
    fn pe_hand_values() {
        let ds = ClusteredDataset::full_cohort(
            vec![
                Cluster {
                    id: "a".into(),
                    stratum: 1,
                    sampled: true,
                    members: vec![Observation::new(1.0, true, vec![1.0])],
                },
                Cluster {
                    id: "b".into(),
                    stratum: 1,
                    sampled: true,
                    members: vec![Observation::new(3.0, true, vec![2.0])],
                },
            ],
            vec!["x".into()],
        )
        .unwrap();
        let pe = prediction_error(&ds, &[1.0], &[1.0]).unwrap();
        assert_eq!(pe.per_obs, vec![0.0, 1.0]);
        assert_eq!(pe.mean(), 0.5);
    }

    #[test]
    fn grid_shape() {
        let g = lambda_grid(2.0, 1e-3, 50).unwrap();
        assert_eq!(g.len(), 50);
        assert!((g[0] - 2.0).abs() < 1e-15 && (g[49] - 2e-3).abs() < 1e-15);
        assert!(g.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(lambda_grid(1.0, 0.5, 1).unwrap(), vec![1.0]);
    }
}
