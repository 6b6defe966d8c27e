//! Clairvoyant solutions on a time grid: viability certificate `x†`, optimal
//! fixed action `x*`, and the gap constant `K`.

use serde::{Deserialize, Serialize};

use crate::convex_sets::{dist, norm, ConvexSet};
use crate::environment::Environment;
use crate::error::{check_dim, Error, Result};
use crate::exec::{map_range, Execution};

mod lbfgs;

pub use lbfgs::{minimize as lbfgs_minimize, LbfgsOptions, LbfgsOutcome};

/// Uniform grid `t_k = k·h` on `[0, T]` with `t_N = T` exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    step: f64,
    steps: usize,
}

impl TimeGrid {
    /// `horizon` must be an integer multiple of `step` up to a relative 1e-9.
    pub fn new(horizon: f64, step: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid needs positive horizon and step, got T = {horizon}, h = {step}"
            )));
        }
        if step > horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "step {step} exceeds horizon {horizon}"
            )));
        }
        let steps = (horizon / step).round() as usize;
        if ((steps as f64) * step - horizon).abs() > 1e-9 * horizon {
            return Err(Error::InvalidParameter(format!(
                "horizon {horizon} is not a multiple of step {step}"
            )));
        }
        Ok(Self {
            horizon,
            step,
            steps,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Number of intervals `N`; there are `N + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Subgrid with about `target` intervals whose nodes are every
    /// `stride`-th node of this grid. `None` when no stride `≥ 2` fits.
    pub fn coarsen(&self, target: usize) -> Option<(TimeGrid, usize)> {
        if target == 0 {
            return None;
        }
        let mut stride = self.steps / target;
        while stride >= 2 {
            if self.steps.is_multiple_of(stride) {
                if let Ok(g) = TimeGrid::new(self.horizon, self.step * stride as f64) {
                    return Some((g, stride));
                }
            }
            stride -= 1;
        }
        None
    }

    pub fn t(&self, k: usize) -> f64 {
        if k >= self.steps {
            self.horizon
        } else {
            k as f64 * self.step
        }
    }

    /// Trapezoid weight of node `k`.
    pub fn weight(&self, k: usize) -> f64 {
        if k == 0 || k == self.steps {
            0.5 * self.step
        } else {
            self.step
        }
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.steps == other.steps
            && (self.horizon - other.horizon).abs() <= 1e-12 * self.horizon.max(1.0)
    }
}

/// `max_{k,i} f_i(t_k, x)`, or `-inf` when there are no constraints.
pub fn max_violation<E: Environment + ?Sized>(env: &E, grid: &TimeGrid, x: &[f64]) -> f64 {
    let mut f = vec![0.0; env.constraint_count()];
    let mut worst = f64::NEG_INFINITY;
    for k in 0..grid.len() {
        env.values_into(grid.t(k), x, &mut f);
        for v in &f {
            worst = worst.max(*v);
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViabilityOptions {
    /// Cap on individual subgradient steps.
    pub max_iterations: usize,
    /// Cap on passes over the grid.
    pub max_sweeps: usize,
    /// Stop after this many sweeps without a 1% improvement of the best residual.
    pub stall_sweeps: usize,
    /// Steps aim for `f_i = -margin` to land strictly inside.
    pub margin: f64,
    pub init: Option<Vec<f64>>,
}

impl Default for ViabilityOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200_000,
            max_sweeps: 2_000,
            stall_sweeps: 40,
            margin: 1e-3,
            init: None,
        }
    }
}

pub const VIABLE_TOL: f64 = 1e-6;
pub const INCONCLUSIVE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Viability {
    pub viable: bool,
    pub xdagger: Vec<f64>,
    /// `max_{k,i} f_i(t_k, x†)`.
    pub residual: f64,
    pub iterations: usize,
    pub sweeps: usize,
}

/// Searches for a fixed action satisfying every constraint at every node.
///
/// Runs cyclic Polyak subgradient steps on violated constraints node by node,
/// projecting onto `X` after each step, and keeps the best point seen.
pub fn check_viability<E: Environment + ?Sized>(
    env: &E,
    grid: &TimeGrid,
    set: &ConvexSet,
    opts: &ViabilityOptions,
) -> Result<Viability> {
    let n = env.action_dim();
    let m = env.constraint_count();
    check_dim(n, set.dim(), "action set")?;
    let mut x = match &opts.init {
        Some(init) => {
            check_dim(n, init.len(), "viability initial point")?;
            init.clone()
        }
        None => vec![0.0; n],
    };
    set.project_in_place(&mut x);

    let mut best_x = x.clone();
    let mut best = max_violation(env, grid, &x);
    if m == 0 || best <= VIABLE_TOL {
        return Ok(Viability {
            viable: true,
            xdagger: best_x,
            residual: best.max(if m == 0 { 0.0 } else { f64::NEG_INFINITY }),
            iterations: 0,
            sweeps: 0,
        });
    }

    let mut f = vec![0.0; m];
    let mut grad = vec![0.0; n];
    let mut iterations = 0;
    let mut sweeps = 0;
    let mut last_progress = 0;
    let mut progress_ref = best;
    let trigger = -0.5 * opts.margin;

    'outer: while sweeps < opts.max_sweeps {
        sweeps += 1;
        let mut stepped = false;
        for k in 0..grid.len() {
            let t = grid.t(k);
            for _ in 0..m {
                env.values_into(t, &x, &mut f);
                let (i, fi) = f
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
                if fi <= trigger {
                    break;
                }
                env.lagrangian_into(
                    t,
                    &x,
                    0.0,
                    &mut |_, w| {
                        w.fill(0.0);
                        w[i] = 1.0;
                    },
                    &mut f,
                    &mut grad,
                );
                let g2: f64 = grad.iter().map(|g| g * g).sum();
                if g2 == 0.0 {
                    break;
                }
                let s = (fi + opts.margin) / g2;
                for (xj, gj) in x.iter_mut().zip(&grad) {
                    *xj -= s * gj;
                }
                set.project_in_place(&mut x);
                stepped = true;
                iterations += 1;
                if iterations >= opts.max_iterations {
                    break 'outer;
                }
            }
        }
        let phi = max_violation(env, grid, &x);
        if phi < best {
            best = phi;
            best_x.copy_from_slice(&x);
        }
        if best <= VIABLE_TOL || !stepped {
            break;
        }
        if best < progress_ref - 0.01 * progress_ref.abs() {
            progress_ref = best;
            last_progress = sweeps;
        } else if sweeps - last_progress >= opts.stall_sweeps {
            break;
        }
    }

    if best <= VIABLE_TOL {
        return Ok(Viability {
            viable: true,
            xdagger: best_x,
            residual: best,
            iterations,
            sweeps,
        });
    }
    if best < INCONCLUSIVE_TOL {
        return Err(Error::Inconclusive {
            iterations,
            residual: best,
        });
    }
    Ok(Viability {
        viable: false,
        xdagger: best_x,
        residual: best,
        iterations,
        sweeps,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OfflineOptions {
    /// Reuse an existing certificate instead of running the viability check.
    pub certificate: Option<Viability>,
    pub viability: ViabilityOptions,
    pub max_outer: usize,
    pub inner: LbfgsOptions,
    pub initial_penalty: f64,
    pub violation_tol: f64,
    pub stationarity_tol: f64,
    /// Solve first on a subgrid with about this many intervals, then polish
    /// on the full grid. `0` disables the coarse phase.
    pub coarse_intervals: usize,
    /// Outer iterations allowed on the full grid after a coarse phase.
    pub polish_outer: usize,
    pub polish_inner_iterations: usize,
    pub execution: Execution,
}

impl Default for OfflineOptions {
    fn default() -> Self {
        Self {
            certificate: None,
            viability: ViabilityOptions::default(),
            max_outer: 30,
            inner: LbfgsOptions::default(),
            initial_penalty: 10.0,
            violation_tol: 1e-6,
            stationarity_tol: 1e-5,
            coarse_intervals: 1000,
            polish_outer: 4,
            polish_inner_iterations: 150,
            execution: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OfflineDiagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub evaluations: usize,
    pub final_penalty: f64,
    /// `max(0, max_{k,i} f_i(t_k, x*))`.
    pub violation: f64,
    /// Sup-norm of the Lagrangian gradient at the last inner solution.
    pub stationarity: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct OfflineSolution {
    pub xstar: Vec<f64>,
    pub offline_cost: f64,
    pub xdagger: Vec<f64>,
    pub viability_residual: f64,
    pub K: f64,
    pub grid: TimeGrid,
    pub diagnostics: OfflineDiagnostics,
}

/// Trapezoid integral of `f₀(·, x)` over the grid.
pub fn integrated_cost<E: Environment + ?Sized>(env: &E, grid: &TimeGrid, x: &[f64]) -> f64 {
    let mut f = vec![0.0; env.constraint_count()];
    (0..grid.len())
        .map(|k| grid.weight(k) * env.values_into(grid.t(k), x, &mut f))
        .sum()
}

enum SetConstraint {
    Upper(usize, f64),
    Lower(usize, f64),
    Ball(Vec<f64>, f64),
}

impl SetConstraint {
    fn from_set(set: &ConvexSet) -> Vec<Self> {
        match set {
            ConvexSet::FullSpace(_) => Vec::new(),
            ConvexSet::NonnegativeOrthant(d) => (0..*d).map(|j| Self::Lower(j, 0.0)).collect(),
            ConvexSet::Box { lower, upper } => lower
                .iter()
                .enumerate()
                .map(|(j, l)| Self::Lower(j, *l))
                .chain(upper.iter().enumerate().map(|(j, u)| Self::Upper(j, *u)))
                .collect(),
            ConvexSet::Ball { center, radius } => vec![Self::Ball(center.clone(), *radius)],
        }
    }

    /// Value, and `scale·∇` added into `grad`.
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Upper(j, u) => x[*j] - u,
            Self::Lower(j, l) => l - x[*j],
            Self::Ball(c, r) => {
                let d = dist(x, c);
                d * d - r * r
            }
        }
    }

    fn add_grad(&self, x: &[f64], scale: f64, grad: &mut [f64]) {
        match self {
            Self::Upper(j, _) => grad[*j] += scale,
            Self::Lower(j, _) => grad[*j] -= scale,
            Self::Ball(c, _) => {
                for ((g, xi), ci) in grad.iter_mut().zip(x).zip(c) {
                    *g += scale * 2.0 * (xi - ci);
                }
            }
        }
    }
}

/// `min Σ_k w_k f₀(t_k, x)` subject to `f_i(t_k, x) ≤ 0` for every node and
/// `x ∈ X`, by an augmented Lagrangian method with L-BFGS inner solves.
///
/// Returns an error only when the environment is not viable; a run that
/// misses the tolerances is reported through `diagnostics.converged`.
pub fn solve_offline<E: Environment + ?Sized>(
    env: &E,
    grid: &TimeGrid,
    set: &ConvexSet,
    opts: &OfflineOptions,
) -> Result<OfflineSolution> {
    let n = env.action_dim();
    let m = env.constraint_count();
    check_dim(n, set.dim(), "action set")?;
    let cert = match &opts.certificate {
        Some(c) => {
            check_dim(n, c.xdagger.len(), "certificate")?;
            c.clone()
        }
        None => check_viability(env, grid, set, &opts.viability)?,
    };
    if !cert.viable {
        return Err(Error::Infeasible {
            residual: cert.residual,
        });
    }

    let set_cons = SetConstraint::from_set(set);
    let mut x = cert.xdagger.clone();
    let mut mu = vec![0.0; set_cons.len()];
    let mut diag = OfflineDiagnostics::default();
    let (mut nu, rho, polish) = match grid.coarsen(opts.coarse_intervals) {
        Some((cg, stride)) => {
            let mut cnu = vec![0.0; cg.len() * m];
            let rho = alm(
                env,
                &cg,
                &set_cons,
                &mut x,
                &mut cnu,
                &mut mu,
                opts.initial_penalty,
                opts.max_outer,
                opts,
                &mut diag,
            );
            // piecewise-constant prolongation of the multiplier densities
            let mut nu = vec![0.0; grid.len() * m];
            for k in 0..grid.len() {
                let kc = ((k + stride / 2) / stride).min(cg.len() - 1);
                nu[k * m..(k + 1) * m].copy_from_slice(&cnu[kc * m..(kc + 1) * m]);
            }
            (nu, rho, true)
        }
        None => (vec![0.0; grid.len() * m], opts.initial_penalty, false),
    };
    diag.converged = false;
    let mut fine = opts.clone();
    let mut max_outer = opts.max_outer;
    if polish {
        max_outer = opts.polish_outer;
        fine.inner.max_iterations = opts.polish_inner_iterations;
    }
    alm(env, grid, &set_cons, &mut x, &mut nu, &mut mu, rho, max_outer, &fine, &mut diag);

    set.project_in_place(&mut x);
    diag.violation = max_violation(env, grid, &x).max(0.0);
    let offline_cost = integrated_cost(env, grid, &x);
    #[allow(non_snake_case)]
    let K = estimate_K(env, grid, set, &x, opts.execution)?;
    Ok(OfflineSolution {
        xstar: x,
        offline_cost,
        xdagger: cert.xdagger,
        viability_residual: cert.residual,
        K,
        grid: *grid,
        diagnostics: diag,
    })
}

/// Augmented Lagrangian outer loop. Returns the final penalty and adds its
/// counters to `diag`.
#[allow(clippy::too_many_arguments)]
fn alm<E: Environment + ?Sized>(
    env: &E,
    grid: &TimeGrid,
    set_cons: &[SetConstraint],
    x: &mut [f64],
    nu: &mut [f64],
    mu: &mut [f64],
    mut rho: f64,
    max_outer: usize,
    opts: &OfflineOptions,
    diag: &mut OfflineDiagnostics,
) -> f64 {
    let n = env.action_dim();
    let m = env.constraint_count();
    let nodes = grid.len();
    let mut prev_violation = f64::INFINITY;
    let mut fbuf = vec![0.0; m];
    let mut gbuf = vec![0.0; n];

    for _ in 0..max_outer {
        diag.outer_iterations += 1;
        let mut lagrangian = |x: &[f64], grad: &mut [f64]| -> f64 {
            grad.fill(0.0);
            let mut total = 0.0;
            for k in 0..nodes {
                let wk = grid.weight(k);
                let nuk = &nu[k * m..(k + 1) * m];
                let mut psi = 0.0;
                let f0 = env.lagrangian_into(
                    grid.t(k),
                    x,
                    wk,
                    &mut |f, w| {
                        for i in 0..f.len() {
                            let a = nuk[i] + rho * f[i];
                            if a > 0.0 {
                                w[i] = wk * a;
                                psi += (a * a - nuk[i] * nuk[i]) / (2.0 * rho);
                            } else {
                                w[i] = 0.0;
                                psi -= nuk[i] * nuk[i] / (2.0 * rho);
                            }
                        }
                    },
                    &mut fbuf,
                    &mut gbuf,
                );
                total += wk * (f0 + psi);
                for (g, gk) in grad.iter_mut().zip(&gbuf) {
                    *g += gk;
                }
            }
            for (c, muj) in set_cons.iter().zip(mu.iter()) {
                let a = muj + rho * c.value(x);
                if a > 0.0 {
                    total += (a * a - muj * muj) / (2.0 * rho);
                    c.add_grad(x, a, grad);
                } else {
                    total -= muj * muj / (2.0 * rho);
                }
            }
            total
        };
        let outcome = lbfgs::minimize(x, &mut lagrangian, &opts.inner);
        diag.inner_iterations += outcome.iterations;
        diag.evaluations += outcome.evaluations;
        diag.stationarity = outcome.grad_inf;

        let mut violation: f64 = 0.0;
        for k in 0..nodes {
            env.values_into(grid.t(k), x, &mut fbuf);
            for i in 0..m {
                let idx = k * m + i;
                nu[idx] = (nu[idx] + rho * fbuf[i]).max(0.0);
                violation = violation.max(fbuf[i]);
            }
        }
        for (c, muj) in set_cons.iter().zip(mu.iter_mut()) {
            let v = c.value(x);
            *muj = (*muj + rho * v).max(0.0);
            violation = violation.max(v);
        }
        diag.final_penalty = rho;
        if violation <= opts.violation_tol && outcome.grad_inf <= opts.stationarity_tol {
            diag.converged = true;
            break;
        }
        if violation > opts.violation_tol && violation > 0.25 * prev_violation {
            rho *= 10.0;
        }
        prev_violation = violation;
    }
    rho
}


const K_TOL: f64 = 1e-7;
const K_MAX_ITER: usize = 20_000;

/// `max_k [f₀(t_k, x*) − min_{x∈X} f₀(t_k, x)]`, clamped at zero.
#[allow(non_snake_case)]
pub fn estimate_K<E: Environment + ?Sized>(
    env: &E,
    grid: &TimeGrid,
    set: &ConvexSet,
    xstar: &[f64],
    exec: Execution,
) -> Result<f64> {
    check_dim(env.action_dim(), xstar.len(), "x*")?;
    check_dim(env.action_dim(), set.dim(), "action set")?;
    if !env.has_objective() {
        return Ok(0.0);
    }
    let gaps = map_range(exec, grid.len(), |k| {
        let t = grid.t(k);
        inner_min(env, set, t, xstar).map(|(start, min)| start - min)
    });
    let mut worst: f64 = 0.0;
    for g in gaps {
        worst = worst.max(g?);
    }
    Ok(worst)
}

/// Projected gradient with backtracking on `f₀(t, ·)` over `X`, started from
/// `x0`. Returns `(f₀(t, x0), approximate minimum)`.
fn inner_min<E: Environment + ?Sized>(
    env: &E,
    set: &ConvexSet,
    t: f64,
    x0: &[f64],
) -> Result<(f64, f64)> {
    let n = x0.len();
    let mut f = vec![0.0; env.constraint_count()];
    let mut grad = vec![0.0; n];
    let mut x = x0.to_vec();
    let mut y = vec![0.0; n];
    let mut fx = env.lagrangian_into(t, &x, 1.0, &mut |_, w| w.fill(0.0), &mut f, &mut grad);
    let start = fx;
    let mut s = 1.0;
    for _ in 0..K_MAX_ITER {
        let mut accepted = None;
        while s > 1e-30 {
            for ((yj, xj), gj) in y.iter_mut().zip(&x).zip(&grad) {
                *yj = xj - s * gj;
            }
            set.project_in_place(&mut y);
            let fy = env.values_into(t, &y, &mut f);
            let d2: f64 = y.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if fy <= fx - 0.5 * d2 / s {
                accepted = Some((fy, d2.sqrt()));
                break;
            }
            s *= 0.5;
        }
        let Some((fy, step_len)) = accepted else {
            return Ok((start, fx));
        };
        let decrease = fx - fy;
        std::mem::swap(&mut x, &mut y);
        fx = env.lagrangian_into(t, &x, 1.0, &mut |_, w| w.fill(0.0), &mut f, &mut grad);
        if step_len / s <= K_TOL || decrease <= K_TOL * 1e-3 * (1.0 + fx.abs()) {
            return Ok((start, fx));
        }
        s *= 2.0;
    }
    Err(Error::NoConvergence(format!(
        "inner minimization for K did not converge at t = {t} (gradient norm {:e})",
        norm(&grad)
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{FnEnvironment, PiecewiseLinearPath, TrackingEnvironment};

    fn stationary_sheep(points: Vec<[f64; 2]>, r: f64) -> FnEnvironment {
        let mut env = FnEnvironment::new(2);
        for p in points {
            env = env.constraint(
                move |_, x| (x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2) - r * r,
                move |_, x, g| {
                    g[0] = 2.0 * (x[0] - p[0]);
                    g[1] = 2.0 * (x[1] - p[1]);
                },
            );
        }
        env
    }

    #[test]
    fn grid_nodes_and_weights() {
        let g = TimeGrid::new(1.0, 0.25).unwrap();
        assert_eq!(g.len(), 5);
        assert_eq!(g.t(4), 1.0);
        let w: f64 = (0..g.len()).map(|k| g.weight(k)).sum();
        assert!((w - 1.0).abs() < 1e-15);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, 2.0).is_err());
        let fine = TimeGrid::new(1.0, 1e-4).unwrap();
        assert_eq!(fine.steps(), 10_000);
        assert_eq!(fine.t(10_000), 1.0);
    }

    #[test]
    fn coincident_sheep_are_viable() {
        let env = stationary_sheep(vec![[0.4, 0.6]; 3], 0.3);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let set = ConvexSet::cube(2, -5.0, 5.0).unwrap();
        let opts = ViabilityOptions {
            init: Some(vec![0.4, 0.6]),
            ..Default::default()
        };
        let v = check_viability(&env, &grid, &set, &opts).unwrap();
        assert!(v.viable);
        assert!((v.residual + 0.09).abs() < 1e-15);
        let cold = check_viability(&env, &grid, &set, &ViabilityOptions::default()).unwrap();
        assert!(cold.viable && cold.residual <= VIABLE_TOL);
    }

    #[test]
    fn far_apart_sheep_are_not_viable() {
        let env = stationary_sheep(vec![[0.0, 0.0], [1.0, 0.0]], 0.3);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let set = ConvexSet::cube(2, -5.0, 5.0).unwrap();
        let v = check_viability(&env, &grid, &set, &ViabilityOptions::default()).unwrap();
        assert!(!v.viable);
        // min-max residual is 0.5² - 0.3² at the midpoint
        assert!(v.residual >= 0.16 - 1e-9);
    }

    #[test]
    fn unconstrained_tracking_gives_weighted_mean() {
        let path = PiecewiseLinearPath::random(3, 2, 5, 1.0, -1.0, 1.0).unwrap();
        let env = TrackingEnvironment::new(path.clone());
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let set = ConvexSet::cube(2, -2.0, 2.0).unwrap();
        let sol = solve_offline(&env, &grid, &set, &OfflineOptions::default()).unwrap();
        let mut mean = [0.0; 2];
        for k in 0..grid.len() {
            let c = path.at(grid.t(k));
            mean[0] += grid.weight(k) * c[0];
            mean[1] += grid.weight(k) * c[1];
        }
        assert!(dist(&sol.xstar, &mean) < 1e-6, "{:?} vs {mean:?}", sol.xstar);
        assert!(sol.diagnostics.converged);
        let kmax = (0..grid.len())
            .map(|k| {
                let d = dist(&sol.xstar, &path.at(grid.t(k)));
                d * d
            })
            .fold(0.0, f64::max);
        assert!((sol.K - kmax).abs() < 1e-6);
    }

    #[test]
    fn constrained_toy_matches_grid_search() {
        // track c(t) = (t, 1 - t) while staying inside the disc of radius 0.4 at (0.2, 0.2)
        let env = FnEnvironment::new(2)
            .objective(
                |t, x| (x[0] - t).powi(2) + (x[1] - 1.0 + t).powi(2),
                |t, x, g| {
                    g[0] = 2.0 * (x[0] - t);
                    g[1] = 2.0 * (x[1] - 1.0 + t);
                },
            )
            .constraint(
                |_, x| (x[0] - 0.2).powi(2) + (x[1] - 0.2).powi(2) - 0.16,
                |_, x, g| {
                    g[0] = 2.0 * (x[0] - 0.2);
                    g[1] = 2.0 * (x[1] - 0.2);
                },
            );
        let grid = TimeGrid::new(1.0, 0.05).unwrap();
        let set = ConvexSet::cube(2, -1.0, 1.0).unwrap();
        let sol = solve_offline(&env, &grid, &set, &OfflineOptions::default()).unwrap();
        assert!(sol.diagnostics.violation <= 1e-6);

        let res = 400;
        let mut best = (f64::INFINITY, [0.0; 2]);
        for a in 0..=res {
            for b in 0..=res {
                let x = [-1.0 + 2.0 * a as f64 / res as f64, -1.0 + 2.0 * b as f64 / res as f64];
                if max_violation(&env, &grid, &x) > 0.0 {
                    continue;
                }
                let c = integrated_cost(&env, &grid, &x);
                if c < best.0 {
                    best = (c, x);
                }
            }
        }
        assert!(dist(&sol.xstar, &best.1) <= 2.0 * 2.0 / res as f64);
        assert!(sol.offline_cost <= best.0 + 1e-9);
        assert!(sol.offline_cost <= integrated_cost(&env, &grid, &sol.xdagger) + 1e-5);
    }

    #[test]
    fn infeasible_environment_is_an_error() {
        let env = stationary_sheep(vec![[0.0, 0.0], [1.0, 0.0]], 0.3);
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let set = ConvexSet::cube(2, -5.0, 5.0).unwrap();
        match solve_offline(&env, &grid, &set, &OfflineOptions::default()) {
            Err(Error::Infeasible { residual }) => assert!(residual > 0.0),
            other => panic!("expected infeasible, got {other:?}"),
        }
    }

    #[test]
    fn k_is_zero_when_target_is_fixed() {
        let path = PiecewiseLinearPath::new(1.0, vec![vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let env = TrackingEnvironment::new(path);
        let grid = TimeGrid::new(1.0, 0.1).unwrap();
        let set = ConvexSet::cube(2, -1.0, 1.0).unwrap();
        let k = estimate_K(&env, &grid, &set, &[0.3, -0.2], Execution::Sequential).unwrap();
        assert_eq!(k, 0.0);
    }

    #[test]
    fn k_parallel_matches_sequential() {
        let path = PiecewiseLinearPath::random(11, 3, 4, 1.0, -1.0, 1.0).unwrap();
        let env = TrackingEnvironment::new(path);
        let grid = TimeGrid::new(1.0, 0.01).unwrap();
        let set = ConvexSet::cube(3, -0.5, 0.5).unwrap();
        let x = [0.1, 0.2, -0.3];
        let a = estimate_K(&env, &grid, &set, &x, Execution::Sequential).unwrap();
        let b = estimate_K(&env, &grid, &set, &x, Execution::Parallel).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0);
    }
}
