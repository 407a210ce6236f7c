//! Flattened, solver-ready view of the sampled clusters.
//!
//! Rows are stored cluster-major in row-major order. Cluster weights are
//! rescaled to average one over the sampled clusters; every estimator in the
//! crate is a ratio of weighted sums or a comparison against a cluster count,
//! so this keeps the fitted values invariant to a common rescaling of the
//! raw weights.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Design {
    p: usize,
    offsets: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    event: Vec<bool>,
    weights: Vec<f64>,
    cluster_index: Vec<usize>,
    row_member: Vec<usize>,
    max_k: usize,
    constant_k: Option<usize>,
}

impl Design {
    pub fn from_dataset(ds: &ClusteredDataset) -> Result<Self> {
        Self::build(ds, None)
    }

    /// Design whose cluster weights are `multipliers[i] * w_i`, with
    /// `multipliers` indexed like the sampled clusters of `ds`.
    pub fn with_multipliers(ds: &ClusteredDataset, multipliers: &[f64]) -> Result<Self> {
        Self::build(ds, Some(multipliers))
    }

    fn build(ds: &ClusteredDataset, multipliers: Option<&[f64]>) -> Result<Self> {
        let p = ds.p;
        let sampled = ds.sampled_indices();
        if let Some(z) = multipliers {
            if z.len() != sampled.len() {
                return Err(Error::DimensionMismatch {
                    expected: sampled.len(),
                    found: z.len(),
                });
            }
        }
        let mut offsets = vec![0];
        let mut x = Vec::new();
        let mut y = Vec::new();
        let mut event = Vec::new();
        let mut weights = Vec::new();
        let mut cluster_index = Vec::new();
        let mut row_member = Vec::new();
        for (pos, &i) in sampled.iter().enumerate() {
            let w = ds.weights[i] * multipliers.map_or(1.0, |z| z[pos]);
            if w < 0.0 || !w.is_finite() {
                return Err(Error::Input(format!(
                    "cluster {}: invalid weight {w}",
                    ds.clusters[i].id
                )));
            }
            if w == 0.0 {
                continue;
            }
            let c = &ds.clusters[i];
            if c.members.is_empty() {
                return Err(Error::Input(format!("cluster {}: no members", c.id)));
            }
            for (k, o) in c.members.iter().enumerate() {
                if o.covariates.len() != p {
                    return Err(Error::Input(format!(
                        "cluster {} member {}: {} covariates, expected {}",
                        c.id,
                        k,
                        o.covariates.len(),
                        p
                    )));
                }
                x.extend_from_slice(&o.covariates);
                y.push(o.log_time);
                event.push(o.event);
                row_member.push(k);
            }
            offsets.push(y.len());
            weights.push(w);
            cluster_index.push(i);
        }
        let n = weights.len();
        if n == 0 {
            return Err(Error::InsufficientData(
                "no sampled clusters with positive weight".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        let scale = n as f64 / total;
        for w in &mut weights {
            *w *= scale;
        }
        let sizes = offsets.windows(2).map(|r| r[1] - r[0]);
        let max_k = sizes.clone().max().unwrap_or(0);
        let first = offsets[1] - offsets[0];
        let constant_k = sizes.clone().all(|k| k == first).then_some(first);
        Ok(Self {
            p,
            offsets,
            x,
            y,
            event,
            weights,
            cluster_index,
            row_member,
            max_k,
            constant_k,
        })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.max_k
    }

    pub fn constant_cluster_size(&self) -> Option<usize> {
        self.constant_k
    }

    pub fn rows(&self, cluster: usize) -> Range<usize> {
        self.offsets[cluster]..self.offsets[cluster + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.x[r * self.p..(r + 1) * self.p]
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn events(&self) -> &[bool] {
        &self.event
    }

    /// Normalized cluster weights (mean one).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Index of each design cluster in the source dataset.
    pub fn cluster_index(&self) -> &[usize] {
        &self.cluster_index
    }

    /// Cluster weight replicated to each row.
    pub fn row_weights(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_obs());
        for (i, &w) in self.weights.iter().enumerate() {
            out.extend(std::iter::repeat(w).take(self.rows(i).len()));
        }
        out
    }

    pub fn xbeta(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_obs())
            .map(|r| dot(self.row(r), beta))
            .collect()
    }

    /// Weighted member-position means of the covariates: row `k` is the
    /// weighted average of `X_ik` over clusters that have a `k`-th member.
    pub fn weighted_means(&self) -> DMatrix<f64> {
        let mut sums = DMatrix::zeros(self.max_k, self.p);
        let mut totals = vec![0.0; self.max_k];
        for i in 0..self.n_clusters() {
            let w = self.weights[i];
            for r in self.rows(i) {
                let k = self.row_member(r);
                totals[k] += w;
                for (j, v) in self.row(r).iter().enumerate() {
                    sums[(k, j)] += w * v;
                }
            }
        }
        for (k, t) in totals.iter().enumerate() {
            if *t > 0.0 {
                for j in 0..self.p {
                    sums[(k, j)] /= t;
                }
            }
        }
        sums
    }

    /// Position of row `r` within its cluster.
    pub fn row_member(&self, r: usize) -> usize {
        self.row_member[r]
    }

    /// Rows of `X_i - Xbar_w`, flattened like `x`.
    pub fn centered(&self) -> Vec<f64> {
        let means = self.weighted_means();
        let mut out = self.x.clone();
        for r in 0..self.n_obs() {
            let k = self.row_member(r);
            for j in 0..self.p {
                out[r * self.p + j] -= means[(k, j)];
            }
        }
        out
    }

    /// Weighted least squares on the uncensored rows with an intercept
    /// absorbed by weighted centering; returns `(X'WX, X'Wy)` in centered form.
    pub fn uncensored_normal_equations(&self) -> (DMatrix<f64>, DVector<f64>) {
        let p = self.p;
        let rw = self.row_weights();
        let mut tot = 0.0;
        let mut xbar = vec![0.0; p];
        let mut ybar = 0.0;
        for r in 0..self.n_obs() {
            if !self.event[r] {
                continue;
            }
            let w = rw[r];
            tot += w;
            ybar += w * self.y[r];
            for (j, v) in self.row(r).iter().enumerate() {
                xbar[j] += w * v;
            }
        }
        let mut xtx = DMatrix::zeros(p, p);
        let mut xty = DVector::zeros(p);
        if tot == 0.0 {
            return (xtx, xty);
        }
        ybar /= tot;
        xbar.iter_mut().for_each(|v| *v /= tot);
        let mut xc = vec![0.0; p];
        for r in 0..self.n_obs() {
            if !self.event[r] {
                continue;
            }
            let w = rw[r];
            for (j, v) in self.row(r).iter().enumerate() {
                xc[j] = v - xbar[j];
            }
            let yc = self.y[r] - ybar;
            for a in 0..p {
                xty[a] += w * xc[a] * yc;
                for b in a..p {
                    xtx[(a, b)] += w * xc[a] * xc[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                xtx[(a, b)] = xtx[(b, a)];
            }
        }
        (xtx, xty)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Observation, StratumCount};

    #[test]
    fn weights_are_normalized_and_unsampled_dropped() {
        let mk = |id: &str, s: usize, sampled: bool| Cluster {
            id: id.into(),
            stratum: s,
            sampled,
            members: vec![Observation::new(
                0.0,
                true,
                if sampled { vec![1.0] } else { vec![] },
            )],
        };
        let ds = ClusteredDataset::new(
            vec![mk("a", 1, true), mk("b", 1, false), mk("c", 2, true)],
            vec!["x".into()],
            Some(vec![StratumCount::new(1, 2, 1), StratumCount::new(2, 1, 1)]),
        )
        .unwrap();
        let d = Design::from_dataset(&ds).unwrap();
        assert_eq!(d.n_clusters(), 2);
        // raw weights 2 and 1 -> mean-one weights 4/3 and 2/3
        assert!((d.weights()[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((d.weights()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.cluster_index(), &[0, 2]);
    }
}
