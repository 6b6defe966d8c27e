//! Time-varying cost `f₀(t, x)` and constraint vector `f(t, x)` with their
//! subgradients.
//!
//! Implementors provide raw evaluation into caller buffers; the checked free
//! functions ([`eval`], [`eval_subgradients`]) validate dimensions and
//! finiteness. Constraint subgradients are stored column-major as an `n × m`
//! matrix, one column per constraint.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};

pub trait Environment: Send + Sync {
    /// Action dimension `n`.
    fn action_dim(&self) -> usize;

    /// Number of constraints `m`.
    fn constraint_count(&self) -> usize;

    /// `false` means `f₀ ≡ 0`.
    fn has_objective(&self) -> bool;

    /// Writes `f(t, x)` into `f` and returns `f₀(t, x)`.
    fn values_into(&self, t: f64, x: &[f64], f: &mut [f64]) -> f64;

    /// Writes a subgradient of `f₀` into `g0` and the constraint subgradients
    /// (column-major, `n × m`) into `jac`.
    fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], jac: &mut [f64]);

    /// Evaluates `f` at `(t, x)`, asks `weights` for multipliers given those
    /// values, and writes `objective_weight·f₀ₓ + fₓ·w` into `grad`.
    /// Returns `f₀(t, x)`.
    fn lagrangian_into(
        &self,
        t: f64,
        x: &[f64],
        objective_weight: f64,
        weights: &mut dyn FnMut(&[f64], &mut [f64]),
        f: &mut [f64],
        grad: &mut [f64],
    ) -> f64 {
        let n = self.action_dim();
        let m = self.constraint_count();
        let f0 = self.values_into(t, x, f);
        let mut w = vec![0.0; m];
        weights(f, &mut w);
        let mut g0 = vec![0.0; n];
        let mut jac = vec![0.0; n * m];
        self.subgradients_into(t, x, &mut g0, &mut jac);
        for (j, g) in grad.iter_mut().enumerate() {
            let mut acc = objective_weight * g0[j];
            for (i, wi) in w.iter().enumerate() {
                acc += wi * jac[i * n + j];
            }
            *g = acc;
        }
        f0
    }
}

macro_rules! forward_environment {
    ($($ty:ty),*) => {$(
        impl<E: Environment + ?Sized> Environment for $ty {
            fn action_dim(&self) -> usize { (**self).action_dim() }
            fn constraint_count(&self) -> usize { (**self).constraint_count() }
            fn has_objective(&self) -> bool { (**self).has_objective() }
            fn values_into(&self, t: f64, x: &[f64], f: &mut [f64]) -> f64 {
                (**self).values_into(t, x, f)
            }
            fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], jac: &mut [f64]) {
                (**self).subgradients_into(t, x, g0, jac)
            }
            fn lagrangian_into(
                &self,
                t: f64,
                x: &[f64],
                objective_weight: f64,
                weights: &mut dyn FnMut(&[f64], &mut [f64]),
                f: &mut [f64],
                grad: &mut [f64],
            ) -> f64 {
                (**self).lagrangian_into(t, x, objective_weight, weights, f, grad)
            }
        }
    )*};
}

forward_environment!(&E, Box<E>, Arc<E>);

fn check_point<E: Environment + ?Sized>(env: &E, t: f64, x: &[f64]) -> Result<()> {
    check_dim(env.action_dim(), x.len(), "environment action")?;
    if !t.is_finite() {
        return Err(Error::NonFinite {
            t,
            what: "time".into(),
        });
    }
    Ok(())
}

fn non_finite(t: f64, x: &[f64], what: &str) -> Error {
    Error::NonFinite {
        t,
        what: format!("{what} at x = {x:?}"),
    }
}

/// `(f₀(t, x), f(t, x))`.
pub fn eval<E: Environment + ?Sized>(env: &E, t: f64, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_point(env, t, x)?;
    let mut f = vec![0.0; env.constraint_count()];
    let f0 = env.values_into(t, x, &mut f);
    if !f0.is_finite() {
        return Err(non_finite(t, x, "objective"));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(non_finite(t, x, "constraint"));
    }
    Ok((f0, f))
}

/// `(f₀ₓ(t, x), fₓ(t, x))` with `fₓ` an `n × m` matrix.
pub fn eval_subgradients<E: Environment + ?Sized>(
    env: &E,
    t: f64,
    x: &[f64],
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    check_point(env, t, x)?;
    let n = env.action_dim();
    let m = env.constraint_count();
    let mut g0 = vec![0.0; n];
    let mut jac = vec![0.0; n * m];
    env.subgradients_into(t, x, &mut g0, &mut jac);
    if g0.iter().chain(&jac).any(|v| !v.is_finite()) {
        return Err(non_finite(t, x, "subgradient"));
    }
    Ok((g0, DMatrix::from_vec(n, m, jac)))
}

/// Largest relative discrepancy between the analytic subgradients and central
/// differences with step `step`.
pub fn finite_diff_check<E: Environment + ?Sized>(
    env: &E,
    t: f64,
    x: &[f64],
    step: f64,
) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let (g0, jac) = eval_subgradients(env, t, x)?;
    let n = env.action_dim();
    let m = env.constraint_count();
    let mut worst: f64 = 0.0;
    let mut xp = x.to_vec();
    for j in 0..n {
        xp[j] = x[j] + step;
        let (f0p, fp) = eval(env, t, &xp)?;
        xp[j] = x[j] - step;
        let (f0m, fm) = eval(env, t, &xp)?;
        xp[j] = x[j];
        let rel = |analytic: f64, numeric: f64| {
            (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
        };
        if env.has_objective() {
            worst = worst.max(rel(g0[j], (f0p - f0m) / (2.0 * step)));
        }
        for i in 0..m {
            worst = worst.max(rel(jac[(j, i)], (fp[i] - fm[i]) / (2.0 * step)));
        }
    }
    Ok(worst)
}

/// Environment with constraints replaced by `max{fᵢ, -δ}`.
#[derive(Debug, Clone)]
pub struct Saturated<E> {
    inner: E,
    delta: f64,
}

pub fn saturate<E: Environment>(env: E, delta: f64) -> Result<Saturated<E>> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "saturation level must be positive, got {delta}"
        )));
    }
    Ok(Saturated { inner: env, delta })
}

impl<E> Saturated<E> {
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }
}

impl<E: Environment> Environment for Saturated<E> {
    fn action_dim(&self) -> usize {
        self.inner.action_dim()
    }

    fn constraint_count(&self) -> usize {
        self.inner.constraint_count()
    }

    fn has_objective(&self) -> bool {
        self.inner.has_objective()
    }

    fn values_into(&self, t: f64, x: &[f64], f: &mut [f64]) -> f64 {
        let f0 = self.inner.values_into(t, x, f);
        f.iter_mut().for_each(|v| *v = v.max(-self.delta));
        f0
    }

    fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], jac: &mut [f64]) {
        let n = self.action_dim();
        let mut f = vec![0.0; self.constraint_count()];
        self.inner.values_into(t, x, &mut f);
        self.inner.subgradients_into(t, x, g0, jac);
        // ties keep the original subgradient
        for (i, fi) in f.iter().enumerate() {
            if *fi < -self.delta {
                jac[i * n..(i + 1) * n].fill(0.0);
            }
        }
    }

    fn lagrangian_into(
        &self,
        t: f64,
        x: &[f64],
        objective_weight: f64,
        weights: &mut dyn FnMut(&[f64], &mut [f64]),
        f: &mut [f64],
        grad: &mut [f64],
    ) -> f64 {
        let delta = self.delta;
        let mut masked = |raw: &[f64], w: &mut [f64]| {
            let mut stack = [0.0; 16];
            let mut heap;
            let sat: &mut [f64] = if raw.len() <= stack.len() {
                &mut stack[..raw.len()]
            } else {
                heap = vec![0.0; raw.len()];
                &mut heap
            };
            for (s, r) in sat.iter_mut().zip(raw) {
                *s = r.max(-delta);
            }
            weights(sat, w);
            for (wi, r) in w.iter_mut().zip(raw) {
                if *r < -delta {
                    *wi = 0.0;
                }
            }
        };
        let f0 = self
            .inner
            .lagrangian_into(t, x, objective_weight, &mut masked, f, grad);
        f.iter_mut().for_each(|v| *v = v.max(-delta));
        f0
    }
}

type ScalarFn = Box<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
type GradFn = Box<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Environment assembled from closures, for fixtures and small experiments.
pub struct FnEnvironment {
    dim: usize,
    objective: Option<(ScalarFn, GradFn)>,
    constraints: Vec<(ScalarFn, GradFn)>,
}

impl FnEnvironment {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            objective: None,
            constraints: Vec::new(),
        }
    }

    pub fn objective(
        mut self,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.objective = Some((Box::new(value), Box::new(grad)));
        self
    }

    pub fn constraint(
        mut self,
        value: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.constraints.push((Box::new(value), Box::new(grad)));
        self
    }
}

impl Environment for FnEnvironment {
    fn action_dim(&self) -> usize {
        self.dim
    }

    fn constraint_count(&self) -> usize {
        self.constraints.len()
    }

    fn has_objective(&self) -> bool {
        self.objective.is_some()
    }

    fn values_into(&self, t: f64, x: &[f64], f: &mut [f64]) -> f64 {
        for (fi, (value, _)) in f.iter_mut().zip(&self.constraints) {
            *fi = value(t, x);
        }
        self.objective.as_ref().map_or(0.0, |(value, _)| value(t, x))
    }

    fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], jac: &mut [f64]) {
        match &self.objective {
            Some((_, grad)) => grad(t, x, g0),
            None => g0.fill(0.0),
        }
        for (i, (_, grad)) in self.constraints.iter().enumerate() {
            grad(t, x, &mut jac[i * self.dim..(i + 1) * self.dim]);
        }
    }
}

/// Piecewise-linear path through equally spaced random knots.
#[derive(Debug, Clone)]
pub struct PiecewiseLinearPath {
    horizon: f64,
    knots: Vec<Vec<f64>>,
}

impl PiecewiseLinearPath {
    pub fn new(horizon: f64, knots: Vec<Vec<f64>>) -> Result<Self> {
        if knots.len() < 2 || !(horizon > 0.0) {
            return Err(Error::InvalidParameter(
                "a path needs at least two knots and a positive horizon".into(),
            ));
        }
        let d = knots[0].len();
        for k in &knots {
            check_dim(d, k.len(), "path knot")?;
        }
        Ok(Self { horizon, knots })
    }

    /// `segments + 1` knots drawn uniformly in `[lo, hi]^dim`.
    pub fn random(seed: u64, dim: usize, segments: usize, horizon: f64, lo: f64, hi: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let knots = (0..=segments.max(1))
            .map(|_| (0..dim).map(|_| rng.gen_range(lo..=hi)).collect())
            .collect();
        Self::new(horizon, knots)
    }

    pub fn dim(&self) -> usize {
        self.knots[0].len()
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn at_into(&self, t: f64, out: &mut [f64]) {
        let segments = self.knots.len() - 1;
        let s = (t / self.horizon).clamp(0.0, 1.0) * segments as f64;
        let k = (s.floor() as usize).min(segments - 1);
        let a = s - k as f64;
        for (o, (p, q)) in out.iter_mut().zip(self.knots[k].iter().zip(&self.knots[k + 1])) {
            *o = p + a * (q - p);
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.at_into(t, &mut out);
        out
    }
}

/// `f₀(t, x) = ‖x - c(t)‖²` with no constraints.
#[derive(Debug, Clone)]
pub struct TrackingEnvironment {
    path: PiecewiseLinearPath,
}

impl TrackingEnvironment {
    pub fn new(path: PiecewiseLinearPath) -> Self {
        Self { path }
    }

    pub fn path(&self) -> &PiecewiseLinearPath {
        &self.path
    }
}

impl Environment for TrackingEnvironment {
    fn action_dim(&self) -> usize {
        self.path.dim()
    }

    fn constraint_count(&self) -> usize {
        0
    }

    fn has_objective(&self) -> bool {
        true
    }

    fn values_into(&self, t: f64, x: &[f64], _f: &mut [f64]) -> f64 {
        let mut c = [0.0; 8];
        let n = x.len();
        if n > c.len() {
            let c = self.path.at(t);
            return x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum();
        }
        self.path.at_into(t, &mut c[..n]);
        x.iter().zip(&c[..n]).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], _jac: &mut [f64]) {
        let c = self.path.at(t);
        for (g, (a, b)) in g0.iter_mut().zip(x.iter().zip(&c)) {
            *g = 2.0 * (a - b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(c: Vec<f64>) -> FnEnvironment {
        let c2 = c.clone();
        FnEnvironment::new(c.len()).objective(
            move |_, x| x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum(),
            move |_, x, g| {
                for (gi, (a, b)) in g.iter_mut().zip(x.iter().zip(&c2)) {
                    *gi = 2.0 * (a - b);
                }
            },
        )
    }

    fn two_constraints() -> FnEnvironment {
        FnEnvironment::new(2)
            .constraint(|_, x| x[0] * x[0] + x[1] * x[1] - 1.0, |_, x, g| {
                g[0] = 2.0 * x[0];
                g[1] = 2.0 * x[1];
            })
            .constraint(|t, x| x[0] - t, |_, _, g| {
                g[0] = 1.0;
                g[1] = 0.0;
            })
    }

    #[test]
    fn quadratic_values_and_gradient() {
        let env = quadratic(vec![1.0, -2.0]);
        assert_eq!(eval(&env, 0.3, &[1.0, -2.0]).unwrap().0, 0.0);
        let (g0, jac) = eval_subgradients(&env, 0.0, &[2.0, 0.0]).unwrap();
        assert_eq!(g0, vec![2.0, 4.0]);
        assert_eq!(jac.ncols(), 0);
    }

    #[test]
    fn no_objective_means_zero_cost() {
        let env = two_constraints();
        for t in [0.0, 0.5, 1.0] {
            assert_eq!(eval(&env, t, &[0.3, 0.1]).unwrap().0, 0.0);
        }
    }

    #[test]
    fn jacobian_columns_are_constraint_gradients() {
        let env = two_constraints();
        let (_, jac) = eval_subgradients(&env, 0.0, &[0.5, 2.0]).unwrap();
        assert_eq!(jac.shape(), (2, 2));
        assert_eq!(jac.column(0).as_slice(), &[1.0, 4.0]);
        assert_eq!(jac.column(1).as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn non_finite_output_reports_location() {
        let env = FnEnvironment::new(1).objective(|_, x| x[0].ln(), |_, x, g| g[0] = 1.0 / x[0]);
        let err = eval(&env, 0.25, &[-1.0]).unwrap_err();
        match err {
            Error::NonFinite { t, .. } => assert_eq!(t, 0.25),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn saturation_floors_values_and_masks_subgradients() {
        let env = FnEnvironment::new(1)
            .constraint(|_, _| -5.0, |_, _, g| g[0] = 1.0)
            .constraint(|_, _| 2.0, |_, _, g| g[0] = 3.0)
            .constraint(|_, _| -0.3, |_, _, g| g[0] = 7.0);
        let sat = saturate(env, 0.3).unwrap();
        let (_, f) = eval(&sat, 0.0, &[0.0]).unwrap();
        assert_eq!(f, vec![-0.3, 2.0, -0.3]);
        let (_, jac) = eval_subgradients(&sat, 0.0, &[0.0]).unwrap();
        assert_eq!(jac.as_slice(), &[0.0, 3.0, 7.0]);

        let mut fbuf = [0.0; 3];
        let mut grad = [0.0; 1];
        let mut seen = Vec::new();
        sat.lagrangian_into(
            0.0,
            &[0.0],
            0.0,
            &mut |f, w| {
                seen = f.to_vec();
                w.fill(1.0);
            },
            &mut fbuf,
            &mut grad,
        );
        assert_eq!(seen, vec![-0.3, 2.0, -0.3]);
        assert_eq!(fbuf, [-0.3, 2.0, -0.3]);
        assert_eq!(grad[0], 10.0);
    }

    #[test]
    fn saturation_rejects_nonpositive_delta() {
        assert!(saturate(two_constraints(), 0.0).is_err());
        assert!(saturate(two_constraints(), -1.0).is_err());
    }

    #[test]
    fn norm_subgradient_is_chain_rule() {
        // f0 = ‖Ax‖ with A = [[1, 2], [0, 1]]
        let env = FnEnvironment::new(2).objective(
            |_, x| ((x[0] + 2.0 * x[1]).powi(2) + x[1].powi(2)).sqrt(),
            |_, x, g| {
                let a = [x[0] + 2.0 * x[1], x[1]];
                let r = (a[0] * a[0] + a[1] * a[1]).sqrt();
                if r > 0.0 {
                    g[0] = a[0] / r;
                    g[1] = (2.0 * a[0] + a[1]) / r;
                } else {
                    g.fill(0.0);
                }
            },
        );
        assert!(finite_diff_check(&env, 0.0, &[0.4, -1.3], 1e-6).unwrap() < 1e-8);
        let (g0, _) = eval_subgradients(&env, 0.0, &[0.0, 0.0]).unwrap();
        assert_eq!(g0, vec![0.0, 0.0]);
    }

    #[test]
    fn finite_differences_on_quadratic_and_affine() {
        let env = quadratic(vec![0.5, 1.5, -0.25]);
        assert!(finite_diff_check(&env, 0.0, &[0.1, 0.2, 0.3], 1e-6).unwrap() <= 1e-5);
        let affine = FnEnvironment::new(2).objective(|_, x| 3.0 * x[0] - 2.0 * x[1] + 1.0, |_, _, g| {
            g[0] = 3.0;
            g[1] = -2.0;
        });
        assert!(finite_diff_check(&affine, 0.0, &[0.7, -0.2], 1e-6).unwrap() <= 1e-10);
    }

    #[test]
    fn default_lagrangian_matches_explicit_combination() {
        let env = two_constraints();
        let x = [0.4, -0.7];
        let mut f = [0.0; 2];
        let mut grad = [0.0; 2];
        env.lagrangian_into(0.2, &x, 1.0, &mut |_, w| w.copy_from_slice(&[0.5, 2.0]), &mut f, &mut grad);
        assert_eq!(grad, [0.5 * 0.8 + 2.0, 0.5 * -1.4]);
    }

    #[test]
    fn tracking_env_is_deterministic_and_exact() {
        let path = PiecewiseLinearPath::random(7, 2, 4, 1.0, -1.0, 1.0).unwrap();
        let env = TrackingEnvironment::new(path.clone());
        let c = path.at(0.37);
        assert_eq!(eval(&env, 0.37, &c).unwrap().0, 0.0);
        let a = eval(&env, 0.61, &[0.2, 0.1]).unwrap();
        let b = eval(&env, 0.61, &[0.2, 0.1]).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(finite_diff_check(&env, 0.61, &[0.2, 0.1], 1e-6).unwrap() <= 1e-5);
    }
}
