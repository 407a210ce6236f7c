//! Clustered right-censored data under stratified cluster sampling.
//!
//! A cohort of clusters is partitioned into strata; a subset of clusters is
//! sampled from each stratum and only sampled clusters carry covariates.
//! Each sampled cluster gets the Horvitz-Thompson weight `n_s / n~_s`
//! computed from the realized stratum counts.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Log of the observed time `min(T, C)`.
    pub log_time: f64,
    /// `true` when the failure was observed.
    pub event: bool,
    /// Empty for members of unsampled clusters.
    pub covariates: Vec<f64>,
}

impl Observation {
    pub fn new(log_time: f64, event: bool, covariates: Vec<f64>) -> Self {
        Self {
            log_time,
            event,
            covariates,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub id: String,
    /// 1-based stratum label.
    pub stratum: usize,
    pub sampled: bool,
    pub members: Vec<Observation>,
}

/// Cohort and sampled cluster counts of one stratum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StratumCount {
    pub stratum: usize,
    pub cohort: usize,
    pub sampled: usize,
}

impl StratumCount {
    pub fn new(stratum: usize, cohort: usize, sampled: usize) -> Self {
        Self {
            stratum,
            cohort,
            sampled,
        }
    }

    pub fn inclusion_fraction(&self) -> f64 {
        self.sampled as f64 / self.cohort as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    pub clusters: Vec<Cluster>,
    pub p: usize,
    pub covariate_names: Vec<String>,
    pub strata_counts: Vec<StratumCount>,
    /// One weight per cluster; zero for unsampled clusters.
    pub weights: Vec<f64>,
}

/// Inverse-inclusion-probability weights from realized stratum counts.
pub fn compute_weights(
    strata_counts: &[StratumCount],
    cluster_strata: &[usize],
    sampled_flags: &[bool],
) -> Result<Vec<f64>> {
    if cluster_strata.len() != sampled_flags.len() {
        return Err(Error::DimensionMismatch {
            expected: cluster_strata.len(),
            found: sampled_flags.len(),
        });
    }
    let mut lookup = BTreeMap::new();
    for sc in strata_counts {
        if sc.sampled > sc.cohort {
            return Err(Error::InvalidDesign(format!(
                "stratum {} has {} sampled clusters but only {} in the cohort",
                sc.stratum, sc.sampled, sc.cohort
            )));
        }
        if lookup.insert(sc.stratum, *sc).is_some() {
            return Err(Error::InvalidDesign(format!(
                "stratum {} listed twice",
                sc.stratum
            )));
        }
    }
    cluster_strata
        .iter()
        .zip(sampled_flags)
        .map(|(&s, &sampled)| {
            if !sampled {
                return Ok(0.0);
            }
            let sc = lookup.get(&s).ok_or_else(|| {
                Error::InvalidDesign(format!("stratum {s} missing from strata counts"))
            })?;
            if sc.sampled == 0 {
                return Err(Error::InvalidDesign(format!(
                    "stratum {s} contains a sampled cluster but its sampled count is 0"
                )));
            }
            Ok(sc.cohort as f64 / sc.sampled as f64)
        })
        .collect()
}

/// Strata counts implied by the cluster labels when the file holds the
/// whole cohort (sampled and unsampled clusters).
pub fn derive_strata_counts(clusters: &[Cluster]) -> Vec<StratumCount> {
    let mut map: BTreeMap<usize, StratumCount> = BTreeMap::new();
    for c in clusters {
        let e = map
            .entry(c.stratum)
            .or_insert_with(|| StratumCount::new(c.stratum, 0, 0));
        e.cohort += 1;
        if c.sampled {
            e.sampled += 1;
        }
    }
    map.into_values().collect()
}

impl ClusteredDataset {
    /// Builds a dataset, deriving strata counts from the clusters when none
    /// are supplied, and computes the sampling weights.
    pub fn new(
        clusters: Vec<Cluster>,
        covariate_names: Vec<String>,
        strata_counts: Option<Vec<StratumCount>>,
    ) -> Result<Self> {
        let p = covariate_names.len();
        let strata_counts = strata_counts.unwrap_or_else(|| derive_strata_counts(&clusters));
        let strata: Vec<usize> = clusters.iter().map(|c| c.stratum).collect();
        let flags: Vec<bool> = clusters.iter().map(|c| c.sampled).collect();
        let weights = compute_weights(&strata_counts, &strata, &flags)?;
        Ok(Self {
            clusters,
            p,
            covariate_names,
            strata_counts,
            weights,
        })
    }

    /// Every cluster sampled, one stratum, unit weights.
    pub fn full_cohort(clusters: Vec<Cluster>, covariate_names: Vec<String>) -> Result<Self> {
        let clusters = clusters
            .into_iter()
            .map(|c| Cluster {
                stratum: 1,
                sampled: true,
                ..c
            })
            .collect();
        Self::new(clusters, covariate_names, None)
    }

    pub fn default_names(p: usize) -> Vec<String> {
        (1..=p).map(|j| format!("x{j}")).collect()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn sampled_indices(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&i| self.clusters[i].sampled && self.weights[i] > 0.0)
            .collect()
    }

    pub fn n_sampled(&self) -> usize {
        self.sampled_indices().len()
    }

    pub fn n_cohort(&self) -> usize {
        self.strata_counts.iter().map(|s| s.cohort).sum()
    }

    /// Common cluster size over sampled clusters, if there is one.
    pub fn constant_cluster_size(&self) -> Option<usize> {
        let mut sizes = self
            .sampled_indices()
            .into_iter()
            .map(|i| self.clusters[i].members.len());
        let first = sizes.next()?;
        sizes.all(|k| k == first).then_some(first)
    }

    /// Same clusters with replaced weights (e.g. forced to one).
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.clusters.len() {
            return Err(Error::DimensionMismatch {
                expected: self.clusters.len(),
                found: weights.len(),
            });
        }
        Ok(Self {
            weights,
            ..self.clone()
        })
    }

    /// Ignores the sampling design: every sampled cluster gets weight one.
    pub fn unweighted(&self) -> Self {
        let weights = self
            .clusters
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| if c.sampled && w > 0.0 { 1.0 } else { 0.0 })
            .collect();
        Self {
            weights,
            ..self.clone()
        }
    }

    /// Keeps only the listed clusters, with their original weights.
    pub fn subset(&self, cluster_indices: &[usize]) -> Self {
        Self {
            clusters: cluster_indices
                .iter()
                .map(|&i| self.clusters[i].clone())
                .collect(),
            weights: cluster_indices.iter().map(|&i| self.weights[i]).collect(),
            ..self.clone_header()
        }
    }

    /// Keeps only the listed covariate columns.
    pub fn select_columns(&self, columns: &[usize]) -> Self {
        let clusters = self
            .clusters
            .iter()
            .map(|c| Cluster {
                members: c
                    .members
                    .iter()
                    .map(|o| Observation {
                        covariates: if o.covariates.is_empty() {
                            Vec::new()
                        } else {
                            columns.iter().map(|&j| o.covariates[j]).collect()
                        },
                        ..o.clone()
                    })
                    .collect(),
                ..c.clone()
            })
            .collect();
        Self {
            clusters,
            p: columns.len(),
            covariate_names: columns
                .iter()
                .map(|&j| self.covariate_names[j].clone())
                .collect(),
            strata_counts: self.strata_counts.clone(),
            weights: self.weights.clone(),
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            clusters: Vec::new(),
            p: self.p,
            covariate_names: self.covariate_names.clone(),
            strata_counts: self.strata_counts.clone(),
            weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationIssue {
    NoClusters,
    EmptyCluster { cluster: String },
    CovariateLength { cluster: String, member: usize, found: usize, expected: usize },
    MissingCovariates { cluster: String },
    NonFinite { cluster: String, member: usize },
    EmptyStratum { stratum: usize },
    UnknownStratum { cluster: String, stratum: usize },
    StrataCountMismatch { stratum: usize, detail: String },
    WeightInconsistent { cluster: String, weight: f64, expected: f64 },
    WeightLength { expected: usize, found: usize },
    NoSampledClusters,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use ValidationIssue::*;
        match self {
            NoClusters => write!(f, "dataset has no clusters"),
            EmptyCluster { cluster } => write!(f, "cluster {cluster}: no members"),
            CovariateLength {
                cluster,
                member,
                found,
                expected,
            } => write!(
                f,
                "cluster {cluster} member {member}: {found} covariates, expected {expected}"
            ),
            MissingCovariates { cluster } => {
                write!(f, "cluster {cluster}: sampled but covariates missing")
            }
            NonFinite { cluster, member } => {
                write!(f, "cluster {cluster} member {member}: non-finite value")
            }
            EmptyStratum { stratum } => write!(f, "stratum {stratum}: no sampled clusters"),
            UnknownStratum { cluster, stratum } => {
                write!(f, "cluster {cluster}: stratum {stratum} has no count entry")
            }
            StrataCountMismatch { stratum, detail } => {
                write!(f, "stratum {stratum}: {detail}")
            }
            WeightInconsistent {
                cluster,
                weight,
                expected,
            } => write!(f, "cluster {cluster}: weight {weight} but expected {expected}"),
            WeightLength { expected, found } => {
                write!(f, "weights has length {found}, expected {expected}")
            }
            NoSampledClusters => write!(f, "no sampled clusters"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            let msg: Vec<String> = self.issues.iter().map(|i| i.to_string()).collect();
            Err(Error::Input(msg.join("; ")))
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "PASS");
        }
        writeln!(f, "FAIL ({} issues)", self.issues.len())?;
        for issue in &self.issues {
            writeln!(f, "  - {issue}")?;
        }
        Ok(())
    }
}

pub fn validate_dataset(ds: &ClusteredDataset) -> ValidationReport {
    use ValidationIssue::*;
    let mut issues = Vec::new();
    if ds.clusters.is_empty() {
        issues.push(NoClusters);
        return ValidationReport { issues };
    }
    if ds.weights.len() != ds.clusters.len() {
        issues.push(WeightLength {
            expected: ds.clusters.len(),
            found: ds.weights.len(),
        });
    }
    let counts: BTreeMap<usize, StratumCount> =
        ds.strata_counts.iter().map(|s| (s.stratum, *s)).collect();
    let mut seen: BTreeMap<usize, (usize, usize)> = BTreeMap::new();

    for (i, c) in ds.clusters.iter().enumerate() {
        if c.members.is_empty() {
            issues.push(EmptyCluster {
                cluster: c.id.clone(),
            });
        }
        let e = seen.entry(c.stratum).or_default();
        e.0 += 1;
        if c.sampled {
            e.1 += 1;
        }
        let mut missing = false;
        for (k, o) in c.members.iter().enumerate() {
            if !o.log_time.is_finite() || o.covariates.iter().any(|x| !x.is_finite()) {
                issues.push(NonFinite {
                    cluster: c.id.clone(),
                    member: k,
                });
            }
            if o.covariates.is_empty() {
                missing = true;
            } else if o.covariates.len() != ds.p {
                issues.push(CovariateLength {
                    cluster: c.id.clone(),
                    member: k,
                    found: o.covariates.len(),
                    expected: ds.p,
                });
            }
        }
        if c.sampled && missing && ds.p > 0 {
            issues.push(MissingCovariates {
                cluster: c.id.clone(),
            });
        }
        let Some(w) = ds.weights.get(i).copied() else {
            continue;
        };
        match counts.get(&c.stratum) {
            None => issues.push(UnknownStratum {
                cluster: c.id.clone(),
                stratum: c.stratum,
            }),
            Some(sc) => {
                let expected = if c.sampled && sc.sampled > 0 {
                    sc.cohort as f64 / sc.sampled as f64
                } else {
                    0.0
                };
                let ok = if c.sampled {
                    w > 0.0 && (w - expected).abs() <= 1e-12 * expected.max(1.0)
                } else {
                    w == 0.0
                };
                if !ok {
                    issues.push(WeightInconsistent {
                        cluster: c.id.clone(),
                        weight: w,
                        expected,
                    });
                }
            }
        }
    }

    for sc in &ds.strata_counts {
        if sc.sampled > sc.cohort {
            issues.push(StrataCountMismatch {
                stratum: sc.stratum,
                detail: format!("sampled {} exceeds cohort {}", sc.sampled, sc.cohort),
            });
        }
        let (present, sampled_present) = seen.get(&sc.stratum).copied().unwrap_or((0, 0));
        if sc.sampled == 0 && sc.cohort > 0 {
            issues.push(EmptyStratum {
                stratum: sc.stratum,
            });
        }
        if sampled_present != sc.sampled {
            issues.push(StrataCountMismatch {
                stratum: sc.stratum,
                detail: format!(
                    "{} sampled clusters present but count says {}",
                    sampled_present, sc.sampled
                ),
            });
        }
        if present > sc.cohort {
            issues.push(StrataCountMismatch {
                stratum: sc.stratum,
                detail: format!("{} clusters present but cohort count {}", present, sc.cohort),
            });
        }
    }
    if !ds.clusters.iter().any(|c| c.sampled) {
        issues.push(NoSampledClusters);
    }
    ValidationReport { issues }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(t: f64, e: bool, x: &[f64]) -> Observation {
        Observation::new(t, e, x.to_vec())
    }

    fn two_cluster() -> ClusteredDataset {
        let clusters = vec![
            Cluster {
                id: "a".into(),
                stratum: 1,
                sampled: true,
                members: vec![obs(1.0, true, &[0.1, 0.2]), obs(0.5, false, &[0.3, 0.1])],
            },
            Cluster {
                id: "b".into(),
                stratum: 1,
                sampled: true,
                members: vec![obs(2.0, true, &[1.0, -1.0]), obs(0.1, true, &[0.0, 0.0])],
            },
        ];
        ClusteredDataset::new(clusters, ClusteredDataset::default_names(2), None).unwrap()
    }

    #[test]
    fn weight_is_inverse_inclusion_fraction() {
        let counts = [StratumCount::new(1, 200, 20)];
        let w = compute_weights(&counts, &[1, 1], &[true, false]).unwrap();
        assert_eq!(w, vec![10.0, 0.0]);
    }

    #[test]
    fn full_cohort_weights_are_one() {
        let counts = [StratumCount::new(1, 3, 3), StratumCount::new(2, 2, 2)];
        let w = compute_weights(&counts, &[1, 1, 1, 2, 2], &[true; 5]).unwrap();
        assert!(w.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn realized_fraction_weights() {
        let counts = [
            StratumCount::new(1, 1000, 100),
            StratumCount::new(2, 510, 100),
            StratumCount::new(3, 330, 100),
            StratumCount::new(4, 160, 100),
        ];
        let w = compute_weights(&counts, &[1, 2, 3, 4], &[true; 4]).unwrap();
        for (got, want) in w.iter().zip([10.0, 5.1, 3.3, 1.6]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn design_errors() {
        let zero = [StratumCount::new(1, 10, 0)];
        assert!(matches!(
            compute_weights(&zero, &[1], &[true]),
            Err(Error::InvalidDesign(_))
        ));
        let over = [StratumCount::new(1, 10, 11)];
        assert!(matches!(
            compute_weights(&over, &[1], &[true]),
            Err(Error::InvalidDesign(_))
        ));
    }

    #[test]
    fn horvitz_thompson_totals_reproduce_cohort() {
        let counts = [StratumCount::new(1, 37, 5), StratumCount::new(2, 11, 3)];
        let strata = [1, 1, 1, 1, 1, 2, 2, 2];
        let w = compute_weights(&counts, &strata, &[true; 8]).unwrap();
        let t1: f64 = w[..5].iter().sum();
        let t2: f64 = w[5..].iter().sum();
        assert!((t1 - 37.0).abs() < 1e-12);
        assert!((t2 - 11.0).abs() < 1e-12);
    }

    #[test]
    fn well_formed_dataset_passes() {
        assert!(validate_dataset(&two_cluster()).passed());
    }

    #[test]
    fn covariate_length_mismatch_is_listed() {
        let mut ds = two_cluster();
        ds.clusters[1].members[0].covariates.push(3.0);
        let report = validate_dataset(&ds);
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::CovariateLength { found: 3, .. })));
    }

    #[test]
    fn zero_weight_on_sampled_cluster_is_listed() {
        let mut ds = two_cluster();
        ds.weights[0] = 0.0;
        let report = validate_dataset(&ds);
        assert!(report
            .issues
            .iter()
            .any(|i| matches!(i, ValidationIssue::WeightInconsistent { .. })));
    }

    #[test]
    fn subset_and_columns() {
        let ds = two_cluster();
        let s = ds.subset(&[1]);
        assert_eq!(s.clusters.len(), 1);
        assert_eq!(s.weights, vec![1.0]);
        let c = ds.select_columns(&[1]);
        assert_eq!(c.p, 1);
        assert_eq!(c.clusters[1].members[0].covariates, vec![-1.0]);
        assert_eq!(c.covariate_names, vec!["x2".to_string()]);
    }
}
