//! Weighted pooled Kaplan-Meier estimation over regression residuals and
//! Buckley-James imputation of censored log-times.

use crate::data::ClusteredDataset;
use crate::design::{dot, Design};
use crate::error::{Error, Result};

/// Survival mass below which a conditional tail mean is not formed.
pub const TAIL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSurvival {
    /// Sorted distinct residual values carrying an uncensored observation.
    pub jump_points: Vec<f64>,
    /// `S(t+)` at each jump point.
    pub survival_after: Vec<f64>,
    /// Sum of jump masses plus the tail defect; one up to rounding.
    pub total_mass_check: f64,
    /// Survival mass left after the last jump point.
    pub tail_defect: f64,
    masses: Vec<f64>,
    suffix_mass: Vec<f64>,
    suffix_moment: Vec<f64>,
}

/// Fits the weighted pooled product-limit estimator
/// `F(t) = 1 - prod_{e_r < t} [1 - w_r d_r / sum_l w_l 1(e_l >= e_r)]`.
///
/// `weights` are per observation (cluster weight replicated to members);
/// optional `multipliers` are per observation as well and multiply the
/// weights. Observations with zero weight are ignored.
pub fn fit_weighted_km(
    residuals: &[f64],
    events: &[bool],
    weights: &[f64],
    multipliers: Option<&[f64]>,
) -> Result<WeightedSurvival> {
    let n = residuals.len();
    if events.len() != n || weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: events.len().min(weights.len()),
        });
    }
    if let Some(z) = multipliers {
        if z.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: z.len(),
            });
        }
    }
    let w = |r: usize| weights[r] * multipliers.map_or(1.0, |z| z[r]);

    let mut order: Vec<usize> = (0..n).filter(|&r| w(r) > 0.0).collect();
    if !order.iter().any(|&r| events[r]) {
        return Err(Error::DegenerateSurvival);
    }
    for &r in &order {
        if !residuals[r].is_finite() {
            return Err(Error::Numeric(format!("non-finite residual at row {r}")));
        }
    }
    order.sort_by(|&a, &b| residuals[a].total_cmp(&residuals[b]).then(a.cmp(&b)));

    // at-risk totals accumulated from the right to avoid cancellation
    let m = order.len();
    let mut at_risk = vec![0.0; m + 1];
    for i in (0..m).rev() {
        at_risk[i] = at_risk[i + 1] + w(order[i]);
    }

    let mut jump_points = Vec::new();
    let mut survival_after = Vec::new();
    let mut masses = Vec::new();
    let mut surv = 1.0;
    let mut i = 0;
    while i < m {
        let v = residuals[order[i]];
        let risk = at_risk[i];
        let before = surv;
        let mut any_event = false;
        let mut dead = 0.0;
        let mut j = i;
        while j < m && residuals[order[j]] == v {
            let r = order[j];
            if events[r] {
                dead += w(r);
                any_event = true;
            }
            j += 1;
        }
        if any_event {
            // tied events share one factor against the common risk set
            surv = (surv * (1.0 - dead / risk)).max(0.0);
            jump_points.push(v);
            survival_after.push(surv);
            masses.push(before - surv);
        }
        i = j;
    }

    let tail_defect = surv;
    let k = masses.len();
    let mut suffix_mass = vec![0.0; k + 1];
    let mut suffix_moment = vec![0.0; k + 1];
    for i in (0..k).rev() {
        suffix_mass[i] = suffix_mass[i + 1] + masses[i];
        suffix_moment[i] = suffix_moment[i + 1] + masses[i] * jump_points[i];
    }
    Ok(WeightedSurvival {
        total_mass_check: suffix_mass[0] + tail_defect,
        jump_points,
        survival_after,
        tail_defect,
        masses,
        suffix_mass,
        suffix_moment,
    })
}

impl WeightedSurvival {
    /// `F(t)` using the strict inequality `e < t` (left limit at jumps).
    pub fn cdf(&self, t: f64) -> f64 {
        let j = self.jump_points.partition_point(|&x| x < t);
        if j == 0 {
            0.0
        } else {
            1.0 - self.survival_after[j - 1]
        }
    }

    /// `F(t+)`, i.e. including a jump located exactly at `t`.
    pub fn cdf_right(&self, t: f64) -> f64 {
        let j = self.jump_points.partition_point(|&x| x <= t);
        if j == 0 {
            0.0
        } else {
            1.0 - self.survival_after[j - 1]
        }
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Mean of the estimated residual law above `cutpoint`, normalized by
    /// the jump mass located strictly above it. Returns `cutpoint` when no
    /// mass lies above.
    pub fn conditional_tail_mean(&self, cutpoint: f64) -> f64 {
        let j = self.jump_points.partition_point(|&x| x <= cutpoint);
        let mass = self.suffix_mass[j];
        if mass <= TAIL_EPS {
            return cutpoint;
        }
        // clamp: suffix sums can round a hair below the cutpoint
        (self.suffix_moment[j] / mass).max(cutpoint)
    }

    /// `(t, F(t+))` at each jump point.
    pub fn table(&self) -> Vec<(f64, f64)> {
        self.jump_points
            .iter()
            .zip(&self.survival_after)
            .map(|(&t, &s)| (t, 1.0 - s))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputedResponses {
    pub values: Vec<f64>,
    /// `true` where the value was imputed (censored observation).
    pub imputed_flags: Vec<bool>,
}

/// `e = log_time - X beta` for every member of each sampled cluster.
pub fn compute_residuals(ds: &ClusteredDataset, beta: &[f64]) -> Result<Vec<Vec<f64>>> {
    if beta.len() != ds.p {
        return Err(Error::DimensionMismatch {
            expected: ds.p,
            found: beta.len(),
        });
    }
    Ok(ds
        .sampled_indices()
        .into_iter()
        .map(|i| {
            ds.clusters[i]
                .members
                .iter()
                .map(|o| o.log_time - dot(&o.covariates, beta))
                .collect()
        })
        .collect())
}

/// Fits the weighted KM to the residuals of `ds` at `beta`.
pub fn fit_at(ds: &ClusteredDataset, beta: &[f64]) -> Result<WeightedSurvival> {
    let design = Design::from_dataset(ds)?;
    let e = design_residuals(&design, beta);
    fit_weighted_km(&e, design.events(), &design.row_weights(), None)
}

/// Imputes censored responses of the sampled clusters at anchor `beta_b`,
/// flattened cluster by cluster.
pub fn impute_responses(
    ds: &ClusteredDataset,
    beta_b: &[f64],
    surv: &WeightedSurvival,
) -> Result<ImputedResponses> {
    if beta_b.len() != ds.p {
        return Err(Error::DimensionMismatch {
            expected: ds.p,
            found: beta_b.len(),
        });
    }
    let design = Design::from_dataset(ds)?;
    Ok(impute_design(&design, beta_b, surv))
}

pub(crate) fn design_residuals(design: &Design, beta: &[f64]) -> Vec<f64> {
    design
        .xbeta(beta)
        .into_iter()
        .zip(design.y())
        .map(|(xb, y)| y - xb)
        .collect()
}

pub(crate) fn impute_design(design: &Design, beta_b: &[f64], surv: &WeightedSurvival) -> ImputedResponses {
    let xb = design.xbeta(beta_b);
    let mut values = Vec::with_capacity(design.n_obs());
    let mut flags = Vec::with_capacity(design.n_obs());
    for (r, (&y, &ev)) in design.y().iter().zip(design.events()).enumerate() {
        if ev {
            values.push(y);
            flags.push(false);
        } else {
            let e = y - xb[r];
            values.push(surv.conditional_tail_mean(e) + xb[r]);
            flags.push(true);
        }
    }
    ImputedResponses {
        values,
        imputed_flags: flags,
    }
}

/// Residuals, KM fit, and imputed responses at anchor `b` for a design,
/// with optional per-cluster multipliers applied to the KM weights.
pub(crate) fn impute_at_anchor(
    design: &Design,
    b: &[f64],
) -> Result<(WeightedSurvival, ImputedResponses)> {
    let e = design_residuals(design, b);
    let surv = fit_weighted_km(&e, design.events(), &design.row_weights(), None)?;
    let imputed = impute_design(design, b, &surv);
    Ok((surv, imputed))
}
