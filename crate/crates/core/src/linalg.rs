use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot size below which a system is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Solves `m x = rhs` by pivoted LU, rejecting systems whose smallest pivot
/// is below `SINGULAR_TOL` times the largest diagonal entry of `m`.
pub fn solve_checked(m: DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let scale = m.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::RankDeficient(format!("{what}: zero or non-finite diagonal")));
    }
    let lu = m.lu();
    let u = lu.u();
    let min_pivot = u.diagonal().iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min_pivot <= SINGULAR_TOL * scale {
        return Err(Error::RankDeficient(format!(
            "{what}: pivot {min_pivot:.3e} below tolerance (scale {scale:.3e})"
        )));
    }
    lu.solve(rhs)
        .ok_or_else(|| Error::RankDeficient(format!("{what}: LU solve failed")))
}

pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
