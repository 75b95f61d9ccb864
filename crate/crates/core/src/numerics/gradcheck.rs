//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::SliceRandom;
use rand::Rng;

use super::params::{ParamId, ParamSet};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. Coordinates whose analytic and
/// numeric gradients are both below this magnitude are effectively compared
/// absolutely, which keeps finite-difference cancellation noise from
/// flagging correct gradients.
const DENOM_FLOOR: f64 = 1e-4;

/// One checked coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Result of a gradient check run.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// Coordinates exceeding the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &CoordCheck> {
        self.checks
            .iter()
            .filter(move |c| c.rel_err >= self.tolerance)
    }
}

/// Uniformly samples `n` parameter coordinates without replacement (falls
/// back to all coordinates when fewer exist).
pub fn sample_coords(
    params: &ParamSet,
    n: usize,
    rng: &mut impl Rng,
) -> Vec<(ParamId, usize)> {
    let mut all = Vec::with_capacity(params.total_coords());
    for (id, p) in params.iter() {
        for j in 0..p.values.len() {
            all.push((id, j));
        }
    }
    if all.len() <= n {
        return all;
    }
    all.shuffle(rng);
    all.truncate(n);
    all
}

/// Compares analytic gradients (already populated in `params` by a backward
/// pass) against central finite differences of `loss` at step `h`, over the
/// given coordinates. `loss` must be deterministic in the parameter values.
pub fn gradient_check<F: FnMut(&ParamSet) -> f64>(
    params: &mut ParamSet,
    mut loss: F,
    coords: &[(ParamId, usize)],
    h: f64,
    rel_tol: f64,
) -> GradCheckReport {
    let mut checks = Vec::with_capacity(coords.len());
    let mut max_rel_err: f64 = 0.0;
    for &(id, j) in coords {
        let analytic = params.grad(id).map_or(0.0, |g| g[j]);
        let original = params.values(id)[j];

        params.values_mut(id)[j] = original + h;
        let up = loss(params);
        params.values_mut(id)[j] = original - h;
        let down = loss(params);
        params.values_mut(id)[j] = original;

        let numeric = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
        let rel_err = (analytic - numeric).abs() / denom;
        max_rel_err = max_rel_err.max(rel_err);
        checks.push(CoordCheck {
            param: params.get(id).name.clone(),
            index: j,
            analytic,
            numeric,
            rel_err,
        });
    }
    GradCheckReport {
        checks,
        max_rel_err,
        tolerance: rel_tol,
    }
}
