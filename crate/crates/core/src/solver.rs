//! Penalized weighted GEE solver for the Buckley-James estimating equation.
//!
//! The outer loop fixes an anchor `b`, imputes censored responses from the
//! weighted Kaplan-Meier fit of the residuals at `b`, and the inner loop
//! solves the resulting linear penalized GEE by Newton-Raphson with the
//! minorization-maximization approximation of the penalty:
//!
//! `beta <- beta + [H + n G(beta)]^{-1} [U(beta) - n G(beta) beta]`
//!
//! where `G = diag{p'(|beta_j|) / (zeta + |beta_j|)}`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::correlation::{
    build_omega_inverse, estimate_alpha_exchangeable, estimate_alpha_general,
    estimate_dispersion, CorrelationKind, CorrelationStructure, OmegaInverse, WorkingCorrelation,
};
use crate::data::ClusteredDataset;
use crate::design::{dot, Design};
use crate::error::{Error, Result};
use crate::km::{impute_at_anchor, impute_design, ImputedResponses, WeightedSurvival};
use crate::linalg::{solve_checked, sup_norm_diff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyFamily {
    None,
    Lasso,
    #[default]
    Scad,
}

impl FromStr for PenaltyFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "lasso" | "l1" => Ok(Self::Lasso),
            "scad" => Ok(Self::Scad),
            other => Err(Error::InvalidConfig(format!("unknown penalty '{other}'"))),
        }
    }
}

impl fmt::Display for PenaltyFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Lasso => "lasso",
            Self::Scad => "scad",
        })
    }
}

pub const DEFAULT_SCAD_A: f64 = 3.7;

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub family: PenaltyFamily,
    pub lambda: f64,
    /// SCAD shape parameter.
    pub a: f64,
    /// `true` marks a coefficient that is never penalized.
    pub exempt: Vec<bool>,
}

impl PenaltySpec {
    pub fn none(p: usize) -> Self {
        Self {
            family: PenaltyFamily::None,
            lambda: 0.0,
            a: DEFAULT_SCAD_A,
            exempt: vec![false; p],
        }
    }

    pub fn scad(p: usize, lambda: f64) -> Self {
        Self {
            family: PenaltyFamily::Scad,
            lambda,
            a: DEFAULT_SCAD_A,
            exempt: vec![false; p],
        }
    }

    pub fn lasso(p: usize, lambda: f64) -> Self {
        Self {
            family: PenaltyFamily::Lasso,
            lambda,
            a: DEFAULT_SCAD_A,
            exempt: vec![false; p],
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn with_exempt(mut self, exempt: Vec<bool>) -> Self {
        self.exempt = exempt;
        self
    }

    /// Drops to the coefficients in `columns`.
    pub fn select(&self, columns: &[usize]) -> Self {
        Self {
            exempt: columns.iter().map(|&j| self.exempt[j]).collect(),
            ..self.clone()
        }
    }

    pub fn is_active(&self) -> bool {
        self.family != PenaltyFamily::None && self.lambda > 0.0
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.family == PenaltyFamily::Scad && !(self.a > 2.0) {
            return Err(Error::InvalidConfig(format!("SCAD a must exceed 2, got {}", self.a)));
        }
        if self.exempt.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: self.exempt.len(),
            });
        }
        Ok(())
    }

    /// `p'_lambda(|beta|)` for the configured family.
    pub fn derivative(&self, abs_beta: f64) -> f64 {
        match self.family {
            PenaltyFamily::None => 0.0,
            PenaltyFamily::Lasso => self.lambda,
            PenaltyFamily::Scad => scad_derivative(abs_beta, self.lambda, self.a),
        }
    }
}

/// SCAD derivative `lambda 1(t < lambda) + (a lambda - t)_+ / (a - 1) 1(t >= lambda)`.
pub fn scad_derivative(abs_beta: f64, lambda: f64, a: f64) -> f64 {
    if abs_beta < lambda {
        lambda
    } else {
        (a * lambda - abs_beta).max(0.0) / (a - 1.0)
    }
}

/// `q_j = p'(|beta_j|) sign(beta_j)`, zero for exempt coefficients.
pub fn penalty_gradient(beta: &[f64], spec: &PenaltySpec) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(j, &b)| {
            if spec.exempt.get(j).copied().unwrap_or(false) || b == 0.0 {
                0.0
            } else {
                spec.derivative(b.abs()) * b.signum()
            }
        })
        .collect()
}

fn g_diag(beta: &[f64], spec: &PenaltySpec, zeta: f64) -> Vec<f64> {
    beta.iter()
        .enumerate()
        .map(|(j, &b)| {
            if spec.family == PenaltyFamily::None || spec.exempt.get(j).copied().unwrap_or(false) {
                0.0
            } else {
                spec.derivative(b.abs()) / (zeta + b.abs())
            }
        })
        .collect()
}

/// `diag{p'(|beta_j|) / (zeta + |beta_j|)}`.
pub fn build_g(beta: &[f64], spec: &PenaltySpec, zeta: f64) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_vec(g_diag(beta, spec, zeta)))
}

/// Which cluster count multiplies the penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyScale {
    #[default]
    Sampled,
    Cohort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub zeta: f64,
    pub gamma: f64,
    pub max_inner: usize,
    pub max_outer: usize,
    pub coef_cutoff: f64,
    pub penalty_scale: PenaltyScale,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            zeta: 1e-6,
            gamma: 1e-3,
            max_inner: 50,
            max_outer: 100,
            coef_cutoff: 1e-3,
            penalty_scale: PenaltyScale::Sampled,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.zeta > 0.0
            && self.gamma > 0.0
            && self.max_inner > 0
            && self.max_outer > 0
            && self.coef_cutoff > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "solver settings must all be positive: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub beta: Vec<f64>,
    pub active_set: Vec<usize>,
    pub correlation: CorrelationStructure,
    pub alpha_hat: f64,
    pub phi_hat: f64,
    pub inner_iters: Vec<usize>,
    pub outer_iters: usize,
    pub converged: bool,
    /// Outer-loop sup-norm changes.
    pub trace: Vec<f64>,
}

/// Zeroes entries with `|beta_j| < cutoff`; returns the thresholded vector
/// and the indices left nonzero.
pub fn threshold(beta: &[f64], cutoff: f64) -> (Vec<f64>, Vec<usize>) {
    let out: Vec<f64> = beta
        .iter()
        .map(|&b| if b.abs() < cutoff { 0.0 } else { b })
        .collect();
    let active = (0..out.len()).filter(|&j| out[j] != 0.0).collect();
    (out, active)
}

/// Precomputed centered design and the Gram matrices that make `H` cheap
/// for identity and compound-symmetric working matrices.
#[derive(Debug, Clone)]
struct Workspace {
    design: Design,
    xc: Vec<f64>,
    gram: DMatrix<f64>,
    sum_gram: DMatrix<f64>,
    colsum: Vec<f64>,
}

impl Workspace {
    fn new(design: Design) -> Self {
        let p = design.p();
        let n = design.n_clusters();
        let xc = design.centered();
        let mut gram = DMatrix::zeros(p, p);
        let mut sum_gram = DMatrix::zeros(p, p);
        let mut colsum = vec![0.0; n * p];
        for i in 0..n {
            let w = design.weights()[i];
            let cs = &mut colsum[i * p..(i + 1) * p];
            for r in design.rows(i) {
                let row = &xc[r * p..(r + 1) * p];
                for a in 0..p {
                    cs[a] += row[a];
                    let wa = w * row[a];
                    for b in a..p {
                        gram[(a, b)] += wa * row[b];
                    }
                }
            }
            for a in 0..p {
                let wa = w * cs[a];
                for b in a..p {
                    sum_gram[(a, b)] += wa * cs[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(a, b)] = gram[(b, a)];
                sum_gram[(a, b)] = sum_gram[(b, a)];
            }
        }
        Self {
            design,
            xc,
            gram,
            sum_gram,
            colsum,
        }
    }

    fn xc_row(&self, r: usize) -> &[f64] {
        let p = self.design.p();
        &self.xc[r * p..(r + 1) * p]
    }

    fn h(&self, inv: &OmegaInverse) -> DMatrix<f64> {
        match inv {
            OmegaInverse::Identity => self.gram.clone(),
            OmegaInverse::Compound { diag, all } => &self.gram * *diag + &self.sum_gram * *all,
            OmegaInverse::Dense(w) => {
                let p = self.design.p();
                let mut h = DMatrix::zeros(p, p);
                for i in 0..self.design.n_clusters() {
                    let wi = self.design.weights()[i];
                    let rows: Vec<usize> = self.design.rows(i).collect();
                    for (ka, &ra) in rows.iter().enumerate() {
                        for (kb, &rb) in rows.iter().enumerate() {
                            let c = wi * w[(ka, kb)];
                            if c == 0.0 {
                                continue;
                            }
                            let xa = self.xc_row(ra);
                            let xb = self.xc_row(rb);
                            for a in 0..p {
                                for b in 0..p {
                                    h[(a, b)] += c * xa[a] * xb[b];
                                }
                            }
                        }
                    }
                }
                h
            }
        }
    }

    /// `sum_i w_i (X_i - Xbar)' Omega^{-1} resid_i`.
    fn u(&self, resid: &[f64], inv: &OmegaInverse) -> DVector<f64> {
        let p = self.design.p();
        let mut u = DVector::zeros(p);
        let add_identity = |u: &mut DVector<f64>, scale: f64| {
            for i in 0..self.design.n_clusters() {
                let wi = self.design.weights()[i] * scale;
                for r in self.design.rows(i) {
                    let c = wi * resid[r];
                    for (a, x) in self.xc_row(r).iter().enumerate() {
                        u[a] += c * x;
                    }
                }
            }
        };
        match inv {
            OmegaInverse::Identity => add_identity(&mut u, 1.0),
            OmegaInverse::Compound { diag, all } => {
                add_identity(&mut u, *diag);
                for i in 0..self.design.n_clusters() {
                    let s: f64 = self.design.rows(i).map(|r| resid[r]).sum();
                    let c = all * self.design.weights()[i] * s;
                    for a in 0..p {
                        u[a] += c * self.colsum[i * p + a];
                    }
                }
            }
            OmegaInverse::Dense(w) => {
                for i in 0..self.design.n_clusters() {
                    let wi = self.design.weights()[i];
                    let rows: Vec<usize> = self.design.rows(i).collect();
                    for (ka, &ra) in rows.iter().enumerate() {
                        let wr: f64 = rows
                            .iter()
                            .enumerate()
                            .map(|(kb, &rb)| w[(ka, kb)] * resid[rb])
                            .sum();
                        let c = wi * wr;
                        for (a, x) in self.xc_row(ra).iter().enumerate() {
                            u[a] += c * x;
                        }
                    }
                }
            }
        }
        u
    }
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub structure: CorrelationStructure,
    pub trace: Vec<f64>,
}

/// A dataset prepared for repeated fits (different penalties or starts).
#[derive(Debug, Clone)]
pub struct Solver {
    ws: Workspace,
    kind: CorrelationKind,
    penalty_n: f64,
}

impl Solver {
    pub fn new(ds: &ClusteredDataset, kind: CorrelationKind, config: &SolverConfig) -> Result<Self> {
        let design = Design::from_dataset(ds)?;
        let penalty_n = match config.penalty_scale {
            PenaltyScale::Sampled => design.n_clusters() as f64,
            PenaltyScale::Cohort => ds.n_cohort() as f64,
        };
        Self::from_design(design, kind, penalty_n)
    }

    pub fn from_design(design: Design, kind: CorrelationKind, penalty_n: f64) -> Result<Self> {
        if kind != CorrelationKind::Independence {
            match design.constant_cluster_size() {
                Some(_) => {}
                None => {
                    return Err(Error::StructureNotApplicable(format!(
                        "{kind} working correlation requires a constant cluster size"
                    )))
                }
            }
        }
        Ok(Self {
            ws: Workspace::new(design),
            kind,
            penalty_n,
        })
    }

    pub fn design(&self) -> &Design {
        &self.ws.design
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn penalty_n(&self) -> f64 {
        self.penalty_n
    }

    pub fn h(&self, inv: &OmegaInverse) -> DMatrix<f64> {
        self.ws.h(inv)
    }

    /// `U(beta)` with the imputed responses held fixed.
    pub fn u(&self, imputed: &[f64], beta: &[f64], inv: &OmegaInverse) -> DVector<f64> {
        let resid = self.residuals(imputed, beta);
        self.ws.u(&resid, inv)
    }

    fn residuals(&self, imputed: &[f64], beta: &[f64]) -> Vec<f64> {
        self.ws
            .design
            .xbeta(beta)
            .into_iter()
            .zip(imputed)
            .map(|(xb, y)| y - xb)
            .collect()
    }

    /// Moment estimates of the dispersion and working correlation from
    /// flattened residuals.
    pub fn estimate_structure(&self, resid: &[f64]) -> Result<CorrelationStructure> {
        let d = &self.ws.design;
        let slices: Vec<&[f64]> = (0..d.n_clusters()).map(|i| &resid[d.rows(i)]).collect();
        let w = d.weights();
        let p = d.p();
        let k = d.max_cluster_size();
        let structure = match self.kind {
            CorrelationKind::Independence => CorrelationStructure {
                phi: estimate_dispersion(&slices, w, p).unwrap_or(f64::NAN),
                ..CorrelationStructure::independence(k)
            },
            CorrelationKind::Exchangeable => {
                let phi = estimate_dispersion(&slices, w, p)?;
                if k < 2 {
                    CorrelationStructure {
                        phi,
                        ..CorrelationStructure::exchangeable(k, 0.0)
                    }
                } else {
                    let (alpha, projected) = estimate_alpha_exchangeable(&slices, w, p, phi)?;
                    CorrelationStructure {
                        correlation: WorkingCorrelation::Exchangeable(alpha),
                        phi,
                        k,
                        projected,
                    }
                }
            }
            CorrelationKind::Unstructured => {
                let phi = estimate_dispersion(&slices, w, p)?;
                let (m, projected) = if k < 2 {
                    (DMatrix::identity(k, k), false)
                } else {
                    estimate_alpha_general(&slices, w, p, phi)?
                };
                CorrelationStructure {
                    correlation: WorkingCorrelation::Unstructured(m),
                    phi,
                    k,
                    projected,
                }
            }
        };
        Ok(structure)
    }

    /// Residual KM and imputed responses at anchor `b`.
    pub fn impute(&self, b: &[f64]) -> Result<(WeightedSurvival, ImputedResponses)> {
        impute_at_anchor(&self.ws.design, b)
    }

    pub fn impute_with(&self, b: &[f64], surv: &WeightedSurvival) -> ImputedResponses {
        impute_design(&self.ws.design, b, surv)
    }

    /// Newton-Raphson on the linearized penalized GEE with imputations held
    /// at the anchor `b`, starting from `b`.
    pub fn inner(
        &self,
        imputed: &[f64],
        b: &[f64],
        spec: &PenaltySpec,
        config: &SolverConfig,
    ) -> Result<InnerOutcome> {
        let n = self.penalty_n;
        let p = self.ws.design.p();
        let mut beta = b.to_vec();
        let mut trace = Vec::new();
        let mut structure = CorrelationStructure::independence(self.ws.design.max_cluster_size());
        for s in 0..config.max_inner {
            let resid = self.residuals(imputed, &beta);
            structure = self.estimate_structure(&resid)?;
            let inv = build_omega_inverse(&structure)?;
            let mut m = self.ws.h(&inv);
            let mut rhs = self.ws.u(&resid, &inv);
            let g = g_diag(&beta, spec, config.zeta);
            for j in 0..p {
                m[(j, j)] += n * g[j];
                rhs[j] -= n * g[j] * beta[j];
            }
            let step = solve_checked(m, &rhs, "H + nG")?;
            let delta = step.amax();
            for j in 0..p {
                beta[j] += step[j];
            }
            if beta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite coefficient in Newton update".into()));
            }
            trace.push(delta);
            if delta <= config.gamma {
                return Ok(InnerOutcome {
                    beta,
                    iterations: s + 1,
                    converged: true,
                    structure,
                    trace,
                });
            }
        }
        Ok(InnerOutcome {
            beta,
            iterations: config.max_inner,
            converged: false,
            structure,
            trace,
        })
    }

    /// Two-layer iteration: outer Buckley-James anchor updates around the
    /// inner Newton-Raphson solve.
    pub fn fit(&self, spec: &PenaltySpec, config: &SolverConfig, initial_b: &[f64]) -> Result<FitResult> {
        let p = self.ws.design.p();
        if initial_b.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: initial_b.len(),
            });
        }
        spec.validate(p)?;
        config.validate()?;

        let mut b = initial_b.to_vec();
        let mut trace = Vec::new();
        let mut inner_iters = Vec::new();
        let mut best: Option<(f64, Vec<f64>, CorrelationStructure)> = None;
        let mut converged = false;
        let mut last_structure = None;
        for nu in 0..config.max_outer {
            let (_, imputed) = self.impute(&b).map_err(|e| outer_context(e, nu))?;
            let inner = self
                .inner(&imputed.values, &b, spec, config)
                .map_err(|e| outer_context(e, nu))?;
            let delta = sup_norm_diff(&inner.beta, &b);
            trace.push(delta);
            inner_iters.push(inner.iterations);
            if best.as_ref().map_or(true, |(d, _, _)| delta < *d) {
                best = Some((delta, inner.beta.clone(), inner.structure.clone()));
            }
            b = inner.beta;
            last_structure = Some(inner.structure);
            if delta <= config.gamma && inner.converged {
                converged = true;
                break;
            }
        }
        let (beta, structure) = if converged {
            (b, last_structure.expect("at least one outer iteration"))
        } else {
            let (_, beta, s) = best.expect("at least one outer iteration");
            (beta, s)
        };

        let beta = if spec.is_active() {
            beta.iter()
                .enumerate()
                .map(|(j, &v)| {
                    if !spec.exempt[j] && v.abs() < config.coef_cutoff {
                        0.0
                    } else {
                        v
                    }
                })
                .collect()
        } else {
            beta
        };
        let active_set = (0..p)
            .filter(|&j| beta[j].abs() >= config.coef_cutoff)
            .collect();
        Ok(FitResult {
            active_set,
            alpha_hat: structure.alpha_summary(),
            phi_hat: structure.phi,
            correlation: structure,
            inner_iters,
            outer_iters: trace.len(),
            converged,
            trace,
            beta,
        })
    }

    /// Weighted least squares over the uncensored rows (intercept absorbed
    /// by weighted centering).
    pub fn wols(&self) -> Result<Vec<f64>> {
        wols_design(&self.ws.design, false).map(|(b, _)| b)
    }
}

fn outer_context(e: Error, nu: usize) -> Error {
    match e {
        Error::RankDeficient(m) => Error::RankDeficient(format!("outer iteration {nu}: {m}")),
        Error::Numeric(m) => Error::Numeric(format!("outer iteration {nu}: {m}")),
        Error::InsufficientData(m) => Error::InsufficientData(format!("outer iteration {nu}: {m}")),
        other => other,
    }
}

fn wols_design(design: &Design, jitter: bool) -> Result<(Vec<f64>, bool)> {
    let (mut xtx, xty) = design.uncensored_normal_equations();
    let p = design.p();
    let n_events = design.events().iter().filter(|&&e| e).count();
    if n_events <= p && !jitter {
        return Err(Error::RankDeficient(format!(
            "weighted least squares needs more than {p} uncensored observations, found {n_events}; \
             retry with the jittered initializer or a penalized fit"
        )));
    }
    if jitter {
        let scale = xtx.diagonal().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for j in 0..p {
            xtx[(j, j)] += 1e-8 * scale;
        }
    }
    let beta = solve_checked(xtx, &xty, "uncensored weighted least squares").map_err(|e| match e {
        Error::RankDeficient(m) => Error::RankDeficient(format!(
            "{m}; retry with the jittered initializer or a penalized fit"
        )),
        other => other,
    })?;
    Ok((beta.iter().copied().collect(), jitter))
}

/// Weighted least squares on uncensored observations.
pub fn wols_initial(ds: &ClusteredDataset) -> Result<Vec<f64>> {
    wols_design(&Design::from_dataset(ds)?, false).map(|(b, _)| b)
}

/// As [`wols_initial`] but falls back to a `1e-8` diagonal jitter when the
/// uncensored design is rank deficient. The flag reports whether it did.
pub fn wols_initial_with_fallback(ds: &ClusteredDataset) -> Result<(Vec<f64>, bool)> {
    let design = Design::from_dataset(ds)?;
    match wols_design(&design, false) {
        Ok(r) => Ok(r),
        Err(Error::RankDeficient(_)) => wols_design(&design, true),
        Err(e) => Err(e),
    }
}

pub fn build_h(ds: &ClusteredDataset, omega_inv: &OmegaInverse) -> Result<DMatrix<f64>> {
    let design = Design::from_dataset(ds)?;
    Ok(Workspace::new(design).h(omega_inv))
}

pub fn build_u(
    ds: &ClusteredDataset,
    imputed: &ImputedResponses,
    beta: &[f64],
    omega_inv: &OmegaInverse,
) -> Result<DVector<f64>> {
    let design = Design::from_dataset(ds)?;
    if imputed.values.len() != design.n_obs() {
        return Err(Error::DimensionMismatch {
            expected: design.n_obs(),
            found: imputed.values.len(),
        });
    }
    let ws = Workspace::new(design);
    let resid: Vec<f64> = (0..ws.design.n_obs())
        .map(|r| imputed.values[r] - dot(ws.design.row(r), beta))
        .collect();
    Ok(ws.u(&resid, omega_inv))
}

/// Inner layer only: imputations at `anchor_b`, Newton iterations from
/// `anchor_b`. Fails with `NonConvergence` when `max_inner` is exhausted.
pub fn inner_newton_solve(
    ds: &ClusteredDataset,
    anchor_b: &[f64],
    spec: &PenaltySpec,
    config: &SolverConfig,
    kind: CorrelationKind,
) -> Result<Vec<f64>> {
    let solver = Solver::new(ds, kind, config)?;
    if anchor_b.len() != ds.p {
        return Err(Error::DimensionMismatch {
            expected: ds.p,
            found: anchor_b.len(),
        });
    }
    spec.validate(ds.p)?;
    let (_, imputed) = solver.impute(anchor_b)?;
    let out = solver.inner(&imputed.values, anchor_b, spec, config)?;
    if out.converged {
        Ok(out.beta)
    } else {
        Err(Error::NonConvergence {
            iterations: out.iterations,
            last_delta: out.trace.last().copied().unwrap_or(f64::NAN),
            trace: out.trace,
            last: out.beta,
        })
    }
}

pub fn fit(
    ds: &ClusteredDataset,
    spec: &PenaltySpec,
    config: &SolverConfig,
    kind: CorrelationKind,
    initial_b: &[f64],
) -> Result<FitResult> {
    Solver::new(ds, kind, config)?.fit(spec, config, initial_b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Observation};
    use approx::assert_relative_eq;

    fn singleton_dataset(xs: &[&[f64]], ys: &[f64], events: &[bool]) -> ClusteredDataset {
        let clusters = xs
            .iter()
            .zip(ys)
            .zip(events)
            .enumerate()
            .map(|(i, ((x, &y), &e))| Cluster {
                id: i.to_string(),
                stratum: 1,
                sampled: true,
                members: vec![Observation::new(y, e, x.to_vec())],
            })
            .collect();
        ClusteredDataset::new(clusters, ClusteredDataset::default_names(xs[0].len()), None).unwrap()
    }

    #[test]
    fn scad_branches() {
        assert_eq!(scad_derivative(0.5, 1.0, 3.7), 1.0);
        assert_relative_eq!(scad_derivative(2.0, 1.0, 3.7), 1.7 / 2.7, epsilon = 1e-15);
        assert_eq!(scad_derivative(4.0, 1.0, 3.7), 0.0);
        for t in [0.0, 0.3, 1.0, 5.0] {
            assert_eq!(scad_derivative(t, 0.0, 3.7), 0.0);
        }
    }

    #[test]
    fn gradient_signs_and_exemption() {
        let spec = PenaltySpec::scad(3, 1.0).with_exempt(vec![false, false, true]);
        assert_eq!(penalty_gradient(&[0.0, 0.0, 0.0], &spec), vec![0.0; 3]);
        assert_eq!(penalty_gradient(&[-0.5, 0.0, 0.1], &spec), vec![-1.0, 0.0, 0.0]);
        let lasso = PenaltySpec::lasso(1, 0.3);
        assert_eq!(penalty_gradient(&[-7.0], &lasso), vec![-0.3]);
    }

    #[test]
    fn g_matrix_values() {
        let spec = PenaltySpec::scad(2, 0.0);
        assert_eq!(build_g(&[0.4, 0.0], &spec, 1e-6), DMatrix::zeros(2, 2));
        let spec = PenaltySpec::scad(2, 1.0);
        let g = build_g(&[1.0, 0.0], &spec, 1e-6);
        assert_relative_eq!(g[(0, 0)], 1.0 / (1.0 + 1e-6), epsilon = 1e-15);
        assert_relative_eq!(g[(1, 1)], 1.0 / 1e-6, epsilon = 1e-6);
    }

    #[test]
    fn h_two_cluster_hand_value() {
        let ds = singleton_dataset(&[&[0.0], &[2.0]], &[0.0, 4.0], &[true, true]);
        let h = build_h(&ds, &OmegaInverse::Identity).unwrap();
        assert_relative_eq!(h[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn h_single_cluster_is_zero() {
        let ds = singleton_dataset(&[&[1.5, -0.3]], &[1.0], &[true]);
        let h = build_h(&ds, &OmegaInverse::Identity).unwrap();
        assert_eq!(h.amax(), 0.0);
    }

    #[test]
    fn u_two_cluster_hand_value() {
        let ds = singleton_dataset(&[&[0.0], &[2.0]], &[0.0, 4.0], &[true, true]);
        let imputed = ImputedResponses {
            values: vec![0.0, 4.0],
            imputed_flags: vec![false, false],
        };
        let u = build_u(&ds, &imputed, &[1.0], &OmegaInverse::Identity).unwrap();
        assert_relative_eq!(u[0], 2.0, epsilon = 1e-15);
        let fitted = ImputedResponses {
            values: vec![0.0, 2.0],
            imputed_flags: vec![false, false],
        };
        let u = build_u(&ds, &fitted, &[1.0], &OmegaInverse::Identity).unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn threshold_conventions() {
        assert_eq!(threshold(&[0.0005, 0.5], 1e-3), (vec![0.0, 0.5], vec![1]));
        assert_eq!(threshold(&[0.2, -0.5], 1e-3), (vec![0.2, -0.5], vec![0, 1]));
        assert_eq!(threshold(&[1e-3, -1e-3], 1e-3).1, vec![0, 1]);
    }

    fn uncensored_linear(n: usize, seed: u64) -> (ClusteredDataset, Vec<f64>) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let beta = [0.7, -1.2, 0.0];
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<f64> = rows
            .iter()
            .map(|x| 2.0 + dot(x, &beta) + rng.gen_range(-0.3..0.3))
            .collect();
        let xs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        (singleton_dataset(&xs, &ys, &vec![true; n]), ys)
    }

    #[test]
    fn inner_solve_matches_centered_ols() {
        let (ds, _) = uncensored_linear(60, 3);
        let cfg = SolverConfig::default();
        let beta = inner_newton_solve(&ds, &[0.0; 3], &PenaltySpec::none(3), &cfg, CorrelationKind::Independence).unwrap();
        let ols = wols_initial(&ds).unwrap();
        assert!(sup_norm_diff(&beta, &ols) < 1e-10);
        // fixed point: starting at the solution returns it with a zero step
        let again = inner_newton_solve(&ds, &ols, &PenaltySpec::none(3), &cfg, CorrelationKind::Independence).unwrap();
        assert!(sup_norm_diff(&again, &ols) < 1e-12);
    }

    #[test]
    fn huge_lambda_zeroes_everything() {
        let (ds, _) = uncensored_linear(60, 4);
        let cfg = SolverConfig::default();
        let ols = wols_initial(&ds).unwrap();
        let big = ols.iter().fold(0.0f64, |a, v| a.max(v.abs())) * 60.0;
        let r = fit(&ds, &PenaltySpec::scad(3, big), &cfg, CorrelationKind::Independence, &ols).unwrap();
        assert!(r.beta.iter().all(|&v| v == 0.0));
        assert!(r.active_set.is_empty());
    }

    #[test]
    fn duplicate_column_is_rank_deficient() {
        let (ds, _) = uncensored_linear(30, 5);
        let dup = ds.select_columns(&[0, 1, 1]);
        assert!(matches!(wols_initial(&dup), Err(Error::RankDeficient(_))));
        let (_, flagged) = wols_initial_with_fallback(&dup).unwrap();
        assert!(flagged);
    }

    #[test]
    fn weighted_equals_replicated_rows() {
        // doubling one stratum's weight equals duplicating its rows
        use crate::data::StratumCount;
        let (base, _) = uncensored_linear(20, 6);
        let mut clusters = base.clusters.clone();
        for (i, c) in clusters.iter_mut().enumerate() {
            c.stratum = if i < 8 { 1 } else { 2 };
        }
        let weighted = ClusteredDataset::new(
            clusters.clone(),
            base.covariate_names.clone(),
            Some(vec![StratumCount::new(1, 16, 8), StratumCount::new(2, 12, 12)]),
        )
        .unwrap();
        let mut replicated = clusters.clone();
        for c in clusters.iter().take(8) {
            replicated.push(Cluster {
                id: format!("{}-dup", c.id),
                ..c.clone()
            });
        }
        let replicated = ClusteredDataset::full_cohort(replicated, base.covariate_names.clone()).unwrap();
        let a = wols_initial(&weighted).unwrap();
        let b = wols_initial(&replicated).unwrap();
        assert!(sup_norm_diff(&a, &b) < 1e-12);
    }

    #[test]
    fn rejects_bad_config() {
        let (ds, _) = uncensored_linear(10, 1);
        let cfg = SolverConfig {
            gamma: 0.0,
            ..SolverConfig::default()
        };
        assert!(fit(&ds, &PenaltySpec::none(3), &cfg, CorrelationKind::Independence, &[0.0; 3]).is_err());
        let mut spec = PenaltySpec::scad(3, 0.1);
        spec.a = 1.5;
        assert!(fit(&ds, &spec, &SolverConfig::default(), CorrelationKind::Independence, &[0.0; 3]).is_err());
    }
}
