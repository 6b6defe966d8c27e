//! Fit, regret, energy and the bound calculators used by the verification
//! suite.

use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryLog;
use crate::error::{check_dim, Error, Result};
use crate::offline::{OfflineSolution, VIABLE_TOL};

fn last_minus_first<T: Copy>(v: &[T], sub: impl Fn(T, T) -> T) -> Result<T> {
    match (v.first(), v.last()) {
        (Some(a), Some(b)) => Ok(sub(*b, *a)),
        _ => Err(Error::EmptyLog),
    }
}

/// `∫ f(t, x(t)) dt` over the span of the log.
pub fn fit(log: &TrajectoryLog) -> Result<Vec<f64>> {
    let (first, last) = match (log.fit_accum.first(), log.fit_accum.last()) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::EmptyLog),
    };
    Ok(last.iter().zip(first).map(|(b, a)| b - a).collect())
}

/// `∫ f₀(t, x(t)) dt` over the span of the log.
pub fn online_cost(log: &TrajectoryLog) -> Result<f64> {
    last_minus_first(&log.cost_accum, |b, a| b - a)
}

/// Trapezoid integral of `max{fᵢ, −δ}` over the logged samples.
pub fn saturated_fit(log: &TrajectoryLog, delta: f64) -> Result<Vec<f64>> {
    if !(delta > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "saturation level must be positive, got {delta}"
        )));
    }
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let m = log.constraint_count();
    let mut acc = vec![0.0; m];
    for k in 1..log.len() {
        let dt = log.times[k] - log.times[k - 1];
        for (i, a) in acc.iter_mut().enumerate() {
            *a += 0.5 * dt * (log.f[k - 1][i].max(-delta) + log.f[k][i].max(-delta));
        }
    }
    Ok(acc)
}

/// `‖[F]⁺‖₂`.
pub fn clipped_fit_norm(fit: &[f64]) -> f64 {
    fit.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt()
}

/// `½(‖x − x̄‖² + ‖λ − λ̄‖²)`.
pub fn energy(xbar: &[f64], lambar: &[f64], x: &[f64], lam: &[f64]) -> Result<f64> {
    check_dim(xbar.len(), x.len(), "energy action")?;
    check_dim(lambar.len(), lam.len(), "energy multipliers")?;
    let dx: f64 = x.iter().zip(xbar).map(|(a, b)| (a - b) * (a - b)).sum();
    let dl: f64 = lam.iter().zip(lambar).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(0.5 * (dx + dl))
}

fn check_gain(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!(
            "gain must be positive, got {eps}"
        )))
    }
}

/// Regret bound of the gradient controller: `V_{x*}(x₀)/ε`.
pub fn bound_theorem1(eps: f64, x0: &[f64], xstar: &[f64]) -> Result<f64> {
    check_gain(eps)?;
    Ok(energy(xstar, &[], x0, &[])? / eps)
}

/// Fit bound of the feasibility controller for component `i`:
/// `V_{x†, eᵢ}(x₀, λ₀)/ε`. `viability_residual` is the certificate's
/// `max_{k,i} fᵢ(t_k, x†)` and must not exceed the viability tolerance.
pub fn bound_theorem2(
    eps: f64,
    x0: &[f64],
    lambda0: &[f64],
    xdagger: &[f64],
    viability_residual: f64,
    i: usize,
) -> Result<f64> {
    check_gain(eps)?;
    if !(viability_residual <= VIABLE_TOL) {
        return Err(Error::InvalidParameter(format!(
            "x† is not certified feasible (residual {viability_residual:e})"
        )));
    }
    if i >= lambda0.len() {
        return Err(Error::InvalidParameter(format!(
            "constraint index {i} out of range for {} multipliers",
            lambda0.len()
        )));
    }
    let mut ei = vec![0.0; lambda0.len()];
    ei[i] = 1.0;
    Ok(energy(xdagger, &ei, x0, lambda0)? / eps)
}

/// Regret bound of the saddle controller: `V_{x*, 0}(x₀, λ₀)/ε`.
pub fn bound_theorem3(eps: f64, x0: &[f64], lambda0: &[f64], xstar: &[f64]) -> Result<f64> {
    check_gain(eps)?;
    let zero = vec![0.0; lambda0.len()];
    Ok(energy(xstar, &zero, x0, lambda0)? / eps)
}

/// Multiplier bound `4R² + 1` for an action set with `‖x‖ ≤ R`.
pub fn bound_corollary1(r: f64) -> Result<f64> {
    if !(r >= 0.0 && r.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "norm bound must be nonnegative, got {r}"
        )));
    }
    Ok(4.0 * r * r + 1.0)
}

/// Additive tolerance for comparing a discretized run against a
/// continuous-time bound: `max(0.05·|bound|, 10·h·T·L̂)`.
pub fn slack(bound: f64, step: f64, horizon: f64, lipschitz_estimate: f64) -> f64 {
    (0.05 * bound.abs()).max(10.0 * step * horizon * lipschitz_estimate)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub fit: Vec<f64>,
    pub saturated_fit: Option<Vec<f64>>,
    pub clipped_fit_norm: f64,
    pub bounds: Vec<f64>,
    pub horizon: f64,
}

pub fn fit_report(log: &TrajectoryLog, delta: Option<f64>, bounds: Vec<f64>) -> Result<FitReport> {
    let f = fit(log)?;
    Ok(FitReport {
        clipped_fit_norm: clipped_fit_norm(&f),
        saturated_fit: delta.map(|d| saturated_fit(log, d)).transpose()?,
        fit: f,
        bounds,
        horizon: log.horizon,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretReport {
    pub regret: f64,
    pub online_cost: f64,
    pub offline_cost: f64,
    /// `V_{x*,0}(x₀, λ₀)/ε` for the logged run.
    pub bound: f64,
    /// `−K·T`.
    pub floor: f64,
    pub horizon: f64,
}

/// Regret of a logged run against the clairvoyant action. The log must come
/// from a simulation on the same grid the offline problem was solved on.
pub fn regret(log: &TrajectoryLog, offline: &OfflineSolution) -> Result<RegretReport> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let grid = &offline.grid;
    let same_step = (log.step - grid.step()).abs() <= 1e-12 * grid.step();
    let same_span = log.times[0] == 0.0
        && (log.horizon - grid.horizon()).abs() <= 1e-12 * grid.horizon().max(1.0);
    if !same_step || !same_span {
        return Err(Error::GridMismatch(format!(
            "log covers [{}, {}] with h = {}, offline grid is [0, {}] with h = {}",
            log.times[0],
            log.horizon,
            log.step,
            grid.horizon(),
            grid.step()
        )));
    }
    let cfg = log
        .config
        .ok_or_else(|| Error::InvalidParameter("log carries no controller config".into()))?;
    let online = online_cost(log)?;
    let bound = bound_theorem3(cfg.epsilon, &log.x[0], &log.lambda[0], &offline.xstar)?;
    Ok(RegretReport {
        regret: online - offline.offline_cost,
        online_cost: online,
        offline_cost: offline.offline_cost,
        bound,
        floor: -offline.K * grid.horizon(),
        horizon: grid.horizon(),
    })
}
