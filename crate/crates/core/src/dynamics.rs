//! Online controllers and their time discretization.
//!
//! All three controllers share one field evaluation: the action moves along
//! the projected negative gradient of `w₀·f₀ + Σ wᵢ fᵢ` and the multipliers
//! move along the projected constraint values. The mode decides the weights.

use serde::{Deserialize, Serialize};

use crate::convex_sets::ConvexSet;
use crate::environment::Environment;
use crate::error::{check_dim, Error, Result};

/// Any state component above this magnitude aborts the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    /// Field projection, explicit Euler step, point projection.
    #[default]
    #[serde(rename = "euler")]
    ProjectedEuler,
    /// Classical RK4 with every stage state projected.
    #[serde(rename = "rk4")]
    Rk4ThenProject,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// `ẋ = Π_X(x, −ε f₀ₓ)`; no multipliers.
    #[serde(rename = "gradient")]
    GradientOnly,
    /// `ẋ = Π_X(x, −ε fₓλ)`, `λ̇ = Π_Λ(λ, ε f)`.
    #[serde(rename = "feasibility")]
    FeasibilityOnly,
    /// `ẋ = Π_X(x, −ε(f₀ₓ + fₓλ))`, `λ̇ = Π_Λ(λ, ε f)`.
    #[default]
    #[serde(rename = "saddle")]
    SaddlePoint,
}

impl Mode {
    pub fn uses_multipliers(self) -> bool {
        self != Mode::GradientOnly
    }

    pub fn uses_objective(self) -> bool {
        self != Mode::FeasibilityOnly
    }
}

fn default_stride() -> usize {
    10
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerConfig {
    pub epsilon: f64,
    pub step: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub mode: Mode,
    /// Store every `sample_stride`-th node in the log (the last node always).
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
}

impl ControllerConfig {
    pub fn new(mode: Mode, epsilon: f64, step: f64) -> Self {
        Self {
            epsilon,
            step,
            scheme: Scheme::default(),
            mode,
            sample_stride: default_stride(),
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.sample_stride = stride;
        self
    }

    pub fn validate(&self, horizon: f64) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gain must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.step > 0.0 && self.step.is_finite()) || self.step > horizon * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter(format!(
                "step must lie in (0, T], got h = {} with T = {horizon}",
                self.step
            )));
        }
        if self.sample_stride == 0 {
            return Err(Error::InvalidParameter("sample stride must be at least 1".into()));
        }
        Ok(())
    }
}

/// Field value at one state, with the environment values it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub xdot: Vec<f64>,
    pub lamdot: Vec<f64>,
    pub f: Vec<f64>,
    pub f0: f64,
}

struct Workspace {
    grad: Vec<f64>,
    v: Vec<f64>,
    lam_v: Vec<f64>,
    orthant: ConvexSet,
}

impl Workspace {
    fn new(n: usize, m: usize) -> Self {
        Self {
            grad: vec![0.0; n],
            v: vec![0.0; n],
            lam_v: vec![0.0; m],
            orthant: ConvexSet::orthant(m),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn field_into<E: Environment + ?Sized>(
    env: &E,
    mode: Mode,
    eps: f64,
    t: f64,
    x: &[f64],
    lambda: &[f64],
    set: &ConvexSet,
    ws: &mut Workspace,
    out: &mut FieldEval,
) -> Result<()> {
    let ow = if mode.uses_objective() { eps } else { 0.0 };
    let f0 = env.lagrangian_into(
        t,
        x,
        ow,
        &mut |_, w| {
            if mode.uses_multipliers() {
                for (wi, li) in w.iter_mut().zip(lambda) {
                    *wi = eps * li;
                }
            } else {
                w.fill(0.0);
            }
        },
        &mut out.f,
        &mut ws.grad,
    );
    if !f0.is_finite() || out.f.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            t,
            what: "environment value along the trajectory".into(),
        });
    }
    if ws.grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            t,
            what: "environment subgradient along the trajectory".into(),
        });
    }
    out.f0 = f0;
    for (vi, gi) in ws.v.iter_mut().zip(&ws.grad) {
        *vi = -gi;
    }
    set.project_field_into(x, &ws.v, &mut out.xdot)?;
    if mode.uses_multipliers() {
        for (vi, fi) in ws.lam_v.iter_mut().zip(&out.f) {
            *vi = eps * fi;
        }
        ws.orthant.project_field_into(lambda, &ws.lam_v, &mut out.lamdot)?;
    }
    Ok(())
}

fn field<E: Environment + ?Sized>(
    env: &E,
    mode: Mode,
    eps: f64,
    t: f64,
    x: &[f64],
    lambda: &[f64],
    set: &ConvexSet,
) -> Result<FieldEval> {
    let n = env.action_dim();
    let m = env.constraint_count();
    check_dim(n, x.len(), "action")?;
    check_dim(n, set.dim(), "action set")?;
    let lm = if mode.uses_multipliers() { m } else { 0 };
    check_dim(lm, lambda.len(), "multipliers")?;
    let mut ws = Workspace::new(n, m);
    let mut out = FieldEval {
        xdot: vec![0.0; n],
        lamdot: vec![0.0; lm],
        f: vec![0.0; m],
        f0: 0.0,
    };
    field_into(env, mode, eps, t, x, lambda, set, &mut ws, &mut out)?;
    Ok(out)
}

/// `Π_X(x, −ε f₀ₓ(t, x))`.
pub fn gradient_field<E: Environment + ?Sized>(
    env: &E,
    eps: f64,
    t: f64,
    x: &[f64],
    set: &ConvexSet,
) -> Result<Vec<f64>> {
    Ok(field(env, Mode::GradientOnly, eps, t, x, &[], set)?.xdot)
}

/// `(Π_X(x, −ε(f₀ₓ + fₓλ)), Π_Λ(λ, ε f))`. With `include_objective = false`
/// the `f₀ₓ` term is dropped.
pub fn saddle_field<E: Environment + ?Sized>(
    env: &E,
    eps: f64,
    t: f64,
    x: &[f64],
    lambda: &[f64],
    set: &ConvexSet,
    include_objective: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mode = if include_objective {
        Mode::SaddlePoint
    } else {
        Mode::FeasibilityOnly
    };
    let fe = field(env, mode, eps, t, x, lambda, set)?;
    Ok((fe.xdot, fe.lamdot))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerState {
    /// Index `k` of the current node, `t = k·h`.
    pub step_index: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub lambda: Vec<f64>,
    pub fit_accum: Vec<f64>,
    pub cost_accum: f64,
    pub lambda_max: Vec<f64>,
}

impl ControllerState {
    pub fn new(x0: Vec<f64>, lambda0: Vec<f64>, m: usize) -> Self {
        Self {
            step_index: 0,
            t: 0.0,
            lambda_max: lambda0.clone(),
            x: x0,
            lambda: lambda0,
            fit_accum: vec![0.0; m],
            cost_accum: 0.0,
        }
    }
}

fn divergence_check(t: f64, x: &[f64], lambda: &[f64]) -> Result<()> {
    let mut worst: f64 = 0.0;
    for v in x.iter().chain(lambda) {
        if !v.is_finite() {
            return Err(Error::Divergence {
                t,
                magnitude: f64::INFINITY,
            });
        }
        worst = worst.max(v.abs());
    }
    if worst > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { t, magnitude: worst });
    }
    Ok(())
}

struct Integrator<'a, E: ?Sized> {
    env: &'a E,
    cfg: ControllerConfig,
    set: &'a ConvexSet,
    orthant: ConvexSet,
    ws: Workspace,
    stage: FieldEval,
    acc_x: Vec<f64>,
    acc_l: Vec<f64>,
    tmp_x: Vec<f64>,
    tmp_l: Vec<f64>,
}

impl<'a, E: Environment + ?Sized> Integrator<'a, E> {
    fn new(env: &'a E, cfg: ControllerConfig, set: &'a ConvexSet) -> Self {
        let n = env.action_dim();
        let m = env.constraint_count();
        let lm = if cfg.mode.uses_multipliers() { m } else { 0 };
        Self {
            env,
            cfg,
            set,
            orthant: ConvexSet::orthant(lm),
            ws: Workspace::new(n, m),
            stage: FieldEval {
                xdot: vec![0.0; n],
                lamdot: vec![0.0; lm],
                f: vec![0.0; m],
                f0: 0.0,
            },
            acc_x: vec![0.0; n],
            acc_l: vec![0.0; lm],
            tmp_x: vec![0.0; n],
            tmp_l: vec![0.0; lm],
        }
    }

    fn eval(&mut self, t: f64, x: &[f64], lambda: &[f64], out: &mut FieldEval) -> Result<()> {
        field_into(
            self.env,
            self.cfg.mode,
            self.cfg.epsilon,
            t,
            x,
            lambda,
            self.set,
            &mut self.ws,
            out,
        )
    }

    /// Advances `(x, λ)` from `t` given the field `k1` already evaluated there.
    fn advance(&mut self, t: f64, x: &mut [f64], lambda: &mut [f64], k1: &FieldEval) -> Result<()> {
        let h = self.cfg.step;
        match self.cfg.scheme {
            Scheme::ProjectedEuler => {
                for (xi, vi) in x.iter_mut().zip(&k1.xdot) {
                    *xi += h * vi;
                }
                for (li, vi) in lambda.iter_mut().zip(&k1.lamdot) {
                    *li += h * vi;
                }
            }
            Scheme::Rk4ThenProject => {
                self.acc_x.copy_from_slice(&k1.xdot);
                self.acc_l.copy_from_slice(&k1.lamdot);
                let mut prev_x = k1.xdot.clone();
                let mut prev_l = k1.lamdot.clone();
                for (c, w) in [(0.5, 2.0), (0.5, 2.0), (1.0, 1.0)] {
                    for ((t_, xi), vi) in self.tmp_x.iter_mut().zip(x.iter()).zip(&prev_x) {
                        *t_ = xi + c * h * vi;
                    }
                    for ((t_, li), vi) in self.tmp_l.iter_mut().zip(lambda.iter()).zip(&prev_l) {
                        *t_ = li + c * h * vi;
                    }
                    self.set.project_in_place(&mut self.tmp_x);
                    self.orthant.project_in_place(&mut self.tmp_l);
                    let (tx, tl) = (self.tmp_x.clone(), self.tmp_l.clone());
                    let mut stage = std::mem::replace(
                        &mut self.stage,
                        FieldEval {
                            xdot: Vec::new(),
                            lamdot: Vec::new(),
                            f: Vec::new(),
                            f0: 0.0,
                        },
                    );
                    let r = self.eval(t + c * h, &tx, &tl, &mut stage);
                    self.stage = stage;
                    r?;
                    for (a, v) in self.acc_x.iter_mut().zip(&self.stage.xdot) {
                        *a += w * v;
                    }
                    for (a, v) in self.acc_l.iter_mut().zip(&self.stage.lamdot) {
                        *a += w * v;
                    }
                    prev_x.copy_from_slice(&self.stage.xdot);
                    prev_l.copy_from_slice(&self.stage.lamdot);
                }
                for (xi, a) in x.iter_mut().zip(&self.acc_x) {
                    *xi += h / 6.0 * a;
                }
                for (li, a) in lambda.iter_mut().zip(&self.acc_l) {
                    *li += h / 6.0 * a;
                }
            }
        }
        self.set.project_in_place(x);
        self.orthant.project_in_place(lambda);
        divergence_check(t + h, x, lambda)
    }
}

fn check_initial(
    env: &(impl Environment + ?Sized),
    cfg: &ControllerConfig,
    set: &ConvexSet,
    x0: &[f64],
    lambda0: &[f64],
) -> Result<()> {
    let n = env.action_dim();
    let m = env.constraint_count();
    check_dim(n, x0.len(), "initial action")?;
    check_dim(n, set.dim(), "action set")?;
    let lm = if cfg.mode.uses_multipliers() { m } else { 0 };
    check_dim(lm, lambda0.len(), "initial multipliers")?;
    let d = set.distance(x0)?;
    if d > crate::convex_sets::MEMBERSHIP_TOL {
        return Err(Error::NotInSet {
            distance: d,
            tolerance: crate::convex_sets::MEMBERSHIP_TOL,
        });
    }
    if let Some(l) = lambda0.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "initial multipliers must be nonnegative, got {l}"
        )));
    }
    Ok(())
}

/// One step of length `h` from `state`, with trapezoid accumulation of fit
/// and cost over the step.
pub fn step<E: Environment + ?Sized>(
    state: &ControllerState,
    env: &E,
    cfg: &ControllerConfig,
    set: &ConvexSet,
) -> Result<ControllerState> {
    check_initial(env, cfg, set, &state.x, &state.lambda)?;
    let mut integ = Integrator::new(env, *cfg, set);
    let k1 = field(env, cfg.mode, cfg.epsilon, state.t, &state.x, &state.lambda, set)?;
    let mut next = state.clone();
    integ.advance(state.t, &mut next.x, &mut next.lambda, &k1)?;
    next.step_index += 1;
    next.t = next.step_index as f64 * cfg.step;
    let mut f = vec![0.0; env.constraint_count()];
    let f0 = env.values_into(next.t, &next.x, &mut f);
    let h2 = 0.5 * cfg.step;
    for ((a, fa), fb) in next.fit_accum.iter_mut().zip(&k1.f).zip(&f) {
        *a += h2 * (fa + fb);
    }
    next.cost_accum += h2 * (k1.f0 + f0);
    for (mx, l) in next.lambda_max.iter_mut().zip(&next.lambda) {
        *mx = mx.max(*l);
    }
    Ok(next)
}

/// Sampled trajectory with accumulated fit and cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub times: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub f: Vec<Vec<f64>>,
    pub f0: Vec<f64>,
    pub fit_accum: Vec<Vec<f64>>,
    pub cost_accum: Vec<f64>,
    pub config: Option<ControllerConfig>,
    pub seed: Option<u64>,
    pub horizon: f64,
    /// Integration step; zero for logs assembled from samples.
    pub step: f64,
    /// `max_k ‖(ẋ_k, λ̇_k)‖² / (2ε)` over every integration step.
    pub lipschitz_estimate: f64,
    /// Running maximum of each multiplier over every integration step.
    pub lambda_max: Vec<f64>,
}

impl TrajectoryLog {
    /// Builds a log from samples, integrating `f` and `f₀` by the trapezoid
    /// rule over the sample times.
    pub fn from_samples(times: Vec<f64>, f: Vec<Vec<f64>>, f0: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptyLog);
        }
        check_dim(times.len(), f.len(), "constraint samples")?;
        check_dim(times.len(), f0.len(), "cost samples")?;
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidParameter("sample times must increase".into()));
        }
        let m = f[0].len();
        let mut fit_accum = vec![vec![0.0; m]];
        let mut cost_accum = vec![0.0];
        for k in 1..times.len() {
            check_dim(m, f[k].len(), "constraint samples")?;
            let dt = times[k] - times[k - 1];
            let prev = &fit_accum[k - 1];
            let next = prev
                .iter()
                .zip(f[k - 1].iter().zip(&f[k]))
                .map(|(a, (u, v))| a + 0.5 * dt * (u + v))
                .collect();
            fit_accum.push(next);
            cost_accum.push(cost_accum[k - 1] + 0.5 * dt * (f0[k - 1] + f0[k]));
        }
        let n = times.len();
        Ok(Self {
            horizon: times[n - 1],
            times,
            x: vec![Vec::new(); n],
            lambda: vec![Vec::new(); n],
            f,
            f0,
            fit_accum,
            cost_accum,
            config: None,
            seed: None,
            step: 0.0,
            lipschitz_estimate: 0.0,
            lambda_max: vec![0.0; m],
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Samples `range` of this log; accumulators keep their absolute values.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self> {
        if range.is_empty() || range.end > self.len() {
            return Err(Error::EmptyLog);
        }
        let r = range;
        Ok(Self {
            times: self.times[r.clone()].to_vec(),
            x: self.x[r.clone()].to_vec(),
            lambda: self.lambda[r.clone()].to_vec(),
            f: self.f[r.clone()].to_vec(),
            f0: self.f0[r.clone()].to_vec(),
            fit_accum: self.fit_accum[r.clone()].to_vec(),
            cost_accum: self.cost_accum[r.clone()].to_vec(),
            horizon: self.times[r.end - 1],
            ..self.clone()
        })
    }

    pub fn constraint_count(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }
}

/// Runs the controller over `[0, T]` on the grid `t_k = k·h`.
///
/// The multiplier set is `ℝ₊ᵐ`; in gradient-only mode `lambda0` must be
/// empty.
pub fn simulate<E: Environment + ?Sized>(
    env: &E,
    cfg: &ControllerConfig,
    x0: &[f64],
    lambda0: &[f64],
    horizon: f64,
    set: &ConvexSet,
) -> Result<TrajectoryLog> {
    cfg.validate(horizon)?;
    check_initial(env, cfg, set, x0, lambda0)?;
    let grid = crate::offline::TimeGrid::new(horizon, cfg.step)?;
    let steps = grid.steps();
    let m = env.constraint_count();

    let mut integ = Integrator::new(env, *cfg, set);
    let mut x = x0.to_vec();
    let mut lambda = lambda0.to_vec();
    let mut cur = FieldEval {
        xdot: vec![0.0; x.len()],
        lamdot: vec![0.0; lambda.len()],
        f: vec![0.0; m],
        f0: 0.0,
    };
    let mut prev_f = vec![0.0; m];
    let mut prev_f0 = 0.0;
    let mut fit = vec![0.0; m];
    let mut cost = 0.0;
    let mut lambda_max = lambda.clone();
    let mut lhat: f64 = 0.0;

    let cap = steps / cfg.sample_stride + 2;
    let mut log = TrajectoryLog {
        times: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap),
        lambda: Vec::with_capacity(cap),
        f: Vec::with_capacity(cap),
        f0: Vec::with_capacity(cap),
        fit_accum: Vec::with_capacity(cap),
        cost_accum: Vec::with_capacity(cap),
        config: Some(*cfg),
        seed: None,
        horizon,
        step: cfg.step,
        lipschitz_estimate: 0.0,
        lambda_max: Vec::new(),
    };

    let h2 = 0.5 * cfg.step;
    for k in 0..=steps {
        let t = grid.t(k);
        integ.eval(t, &x, &lambda, &mut cur)?;
        if k > 0 {
            for ((a, u), v) in fit.iter_mut().zip(&prev_f).zip(&cur.f) {
                *a += h2 * (u + v);
            }
            cost += h2 * (prev_f0 + cur.f0);
        }
        if k % cfg.sample_stride == 0 || k == steps {
            log.times.push(t);
            log.x.push(x.clone());
            log.lambda.push(lambda.clone());
            log.f.push(cur.f.clone());
            log.f0.push(cur.f0);
            log.fit_accum.push(fit.clone());
            log.cost_accum.push(cost);
        }
        if k == steps {
            break;
        }
        let speed2: f64 = cur.xdot.iter().chain(&cur.lamdot).map(|v| v * v).sum();
        lhat = lhat.max(speed2 / (2.0 * cfg.epsilon));
        prev_f.copy_from_slice(&cur.f);
        prev_f0 = cur.f0;
        integ.advance(t, &mut x, &mut lambda, &cur)?;
        for (mx, l) in lambda_max.iter_mut().zip(&lambda) {
            *mx = mx.max(*l);
        }
    }
    log.lipschitz_estimate = lhat;
    log.lambda_max = lambda_max;
    Ok(log)
}
