use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use saddle_track::convex_sets::ConvexSet;
use saddle_track::dynamics::{simulate, ControllerConfig, Mode, TrajectoryLog};
use saddle_track::environment::{
    eval, eval_subgradients, saturate, Environment, FnEnvironment, PiecewiseLinearPath, TrackingEnvironment,
};
use saddle_track::metrics::{energy, fit, saturated_fit};
use saddle_track::shepherd::{basis_eval, Objective, ShepherdEnvironment, ShepherdParams, ShepherdScenario};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Box, ball or orthant of dimension 3.
fn any_set() -> impl Strategy<Value = ConvexSet> {
    prop_oneof![
        (prop::collection::vec(-2.0..0.0f64, 3), prop::collection::vec(0.1..3.0f64, 3)).prop_map(|(lo, w)| {
            let hi = lo.iter().zip(&w).map(|(l, w)| l + w).collect();
            ConvexSet::boxed(lo, hi).unwrap()
        }),
        (prop::collection::vec(-1.0..1.0f64, 3), 0.2..2.0f64).prop_map(|(c, r)| ConvexSet::ball(c, r).unwrap()),
        Just(ConvexSet::orthant(3)),
    ]
}

fn point() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 3)
}

/// A member of `set`, on the boundary about half the time.
fn member(set: &ConvexSet, z: &[f64], pull: f64) -> Vec<f64> {
    let p = set.project_point(z).unwrap();
    let anchor = set.project_point(&[0.1, -0.2, 0.3]).unwrap();
    p.iter().zip(&anchor).map(|(a, b)| a + pull * (b - a)).collect()
}

fn shepherd_fixture() -> Arc<ShepherdScenario> {
    let params = ShepherdParams {
        sheep: 3,
        shepherd_basis_size: 8,
        sheep_basis_size: 8,
        ..ShepherdParams::default()
    };
    Arc::new(ShepherdScenario::draw(&params, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap())
}

fn tracking_fixture(seed: u64) -> TrackingEnvironment {
    TrackingEnvironment::new(PiecewiseLinearPath::random(seed, 3, 5, 1.0, -2.0, 2.0).unwrap())
}

/// Tracking cost with the constraint `‖x‖² ≤ r²`.
fn constrained_tracking(seed: u64, r: f64) -> FnEnvironment {
    let path = PiecewiseLinearPath::random(seed, 3, 5, 1.0, -2.0, 2.0).unwrap();
    let p2 = path.clone();
    FnEnvironment::new(3)
        .objective(
            move |t, x| dist(x, &path.at(t)).powi(2),
            move |t, x, g| {
                for (g, (a, b)) in g.iter_mut().zip(x.iter().zip(&p2.at(t))) {
                    *g = 2.0 * (a - b);
                }
            },
        )
        .constraint(
            move |_, x| x.iter().map(|a| a * a).sum::<f64>() - r * r,
            |_, x, g| {
                for (g, a) in g.iter_mut().zip(x) {
                    *g = 2.0 * a;
                }
            },
        )
}

/// Distance from `x` to the faces it does not touch.
fn interior_room(set: &ConvexSet, x: &[f64]) -> f64 {
    match set {
        ConvexSet::Box { lower, upper } => x
            .iter()
            .enumerate()
            .flat_map(|(i, &xi)| [xi - lower[i], upper[i] - xi])
            .filter(|g| *g > 0.0)
            .fold(f64::INFINITY, f64::min),
        ConvexSet::NonnegativeOrthant(_) => x.iter().copied().filter(|g| *g > 0.0).fold(f64::INFINITY, f64::min),
        ConvexSet::Ball { center, radius } => {
            let gap = radius - dist(x, center);
            if gap > 1e-9 * radius {
                gap
            } else {
                f64::INFINITY
            }
        }
        ConvexSet::FullSpace(_) => f64::INFINITY,
    }
}

proptest! {
    #[test]
    fn projection_is_idempotent(set in any_set(), z in point()) {
        let p = set.project_point(&z).unwrap();
        let q = set.project_point(&p).unwrap();
        prop_assert!(dist(&p, &q) <= 1e-12);
    }

    #[test]
    fn projection_is_non_expansive(set in any_set(), a in point(), b in point()) {
        let pa = set.project_point(&a).unwrap();
        let pb = set.project_point(&b).unwrap();
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + 1e-12);
    }

    #[test]
    fn field_matches_limit_quotient(set in any_set(), z in point(), pull in prop_oneof![Just(0.0), 0.0..1.0f64], v in point()) {
        let x = member(&set, &z, pull);
        let pv = set.project_field(&x, &v).unwrap();
        let d = 1e-6;
        let stepped: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + d * b).collect();
        let q = set.project_point(&stepped).unwrap();
        let quotient: Vec<f64> = q.iter().zip(&x).map(|(a, b)| (a - b) / d).collect();
        prop_assert!(dist(&quotient, &pv) <= 1e-3, "{quotient:?} vs {pv:?}");
    }

    #[test]
    fn lemma1_gap_is_nonnegative(set in any_set(), a in point(), b in point(), pull in 0.0..1.0f64, v in point()) {
        let x0 = member(&set, &a, 0.0);
        let x = member(&set, &b, pull);
        prop_assert!(set.lemma1_gap(&x0, &x, &v).unwrap() >= -1e-9);
    }

    #[test]
    fn field_lies_in_tangent_cone(set in any_set(), z in point(), pull in prop_oneof![Just(0.0), 0.0..1.0f64], v in point()) {
        let x = member(&set, &z, pull);
        let out = set.project_field(&x, &v).unwrap();
        let cap = interior_room(&set, &x) / (2.0 * norm(&out)).max(1e-300);
        for d in [1e-3f64.min(cap), 1e-6f64.min(cap)] {
            let y: Vec<f64> = x.iter().zip(&out).map(|(a, b)| a + d * b).collect();
            let gap = set.distance(&y).unwrap();
            // a tangent step leaves a curved set at second order
            let allowed = match &set {
                ConvexSet::Ball { radius, .. } => d * d * norm(&out).powi(2) / radius + 1e-12,
                _ => 1e-9 * d,
            };
            prop_assert!(gap <= allowed, "gap {gap} > {allowed} at step {d}");
        }
    }

    #[test]
    fn energy_is_symmetric_and_nonnegative(a in point(), b in point(), la in prop::collection::vec(0.0..3.0f64, 2), lb in prop::collection::vec(0.0..3.0f64, 2)) {
        let e = energy(&a, &la, &b, &lb).unwrap();
        prop_assert!(e >= 0.0);
        prop_assert_eq!(e, energy(&b, &lb, &a, &la).unwrap());
        prop_assert_eq!(energy(&a, &la, &a, &la).unwrap(), 0.0);
    }

    #[test]
    fn saturated_fit_dominates_fit(samples in prop::collection::vec(prop::collection::vec(-1.0..1.0f64, 2), 2..40), delta in 0.01..0.5f64) {
        let n = samples.len();
        let times = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let log = TrajectoryLog::from_samples(times, samples, vec![0.0; n]).unwrap();
        let plain = fit(&log).unwrap();
        let sat = saturated_fit(&log, delta).unwrap();
        for (s, f) in sat.iter().zip(&plain) {
            prop_assert!(s + 1e-12 >= *f);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fit_is_additive_over_slices(split in 0.05..0.95f64, seed in 0u64..100) {
        let env = constrained_tracking(seed, 1.5);
        let set = ConvexSet::cube(3, -2.0, 2.0).unwrap();
        let cfg = ControllerConfig::new(Mode::SaddlePoint, 5.0, 1e-3);
        let log = simulate(&env, &cfg, &[0.0; 3], &[0.0], 1.0, &set).unwrap();
        let k = ((log.len() - 1) as f64 * split) as usize;
        let left = fit(&log.slice(0..k + 1).unwrap()).unwrap();
        let right = fit(&log.slice(k..log.len()).unwrap()).unwrap();
        let whole = fit(&log).unwrap();
        prop_assert!((left[0] + right[0] - whole[0]).abs() <= 1e-9);
    }

    #[test]
    fn state_stays_feasible(seed in 0u64..100, eps in 1.0..80.0f64) {
        let env = constrained_tracking(seed, 1.0);
        let set = ConvexSet::ball(vec![0.2, 0.0, -0.1], 1.7).unwrap();
        let cfg = ControllerConfig::new(Mode::SaddlePoint, eps, 1e-3).with_stride(1);
        let log = simulate(&env, &cfg, &[0.0; 3], &[0.0], 1.0, &set).unwrap();
        for (x, l) in log.x.iter().zip(&log.lambda) {
            prop_assert!(set.distance(x).unwrap() <= 1e-9);
            prop_assert!(l.iter().all(|v| *v >= -1e-12));
        }
    }

    #[test]
    fn gradient_run_dissipates_energy(seed in 0u64..100, eps in 1.0..50.0f64, xbar in prop::collection::vec(-2.0..2.0f64, 3)) {
        let env = tracking_fixture(seed);
        let set = ConvexSet::cube(3, -2.0, 2.0).unwrap();
        let h = 1e-3;
        let cfg = ControllerConfig::new(Mode::GradientOnly, eps, h).with_stride(1);
        let log = simulate(&env, &cfg, &[2.0, -2.0, 0.0], &[], 1.0, &set).unwrap();
        let mut sum = 0.0;
        let mut grad_max: f64 = 0.0;
        for k in 0..log.len() - 1 {
            let t = log.times[k];
            let c = env.path().at(t);
            let v0 = energy(&xbar, &[], &log.x[k], &[]).unwrap();
            let v1 = energy(&xbar, &[], &log.x[k + 1], &[]).unwrap();
            let f0bar = eval(&env, t, &xbar).unwrap().0;
            sum += v1 - v0 + eps * h * (log.f0[k] - f0bar);
            grad_max = grad_max.max(2.0 * dist(&log.x[k], &c));
        }
        // one Euler step overshoots by at most h²‖F‖²/2
        let budget = 1.0 * h * eps * eps * grad_max * grad_max / 2.0;
        prop_assert!(sum <= budget + 1e-9, "{sum} > {budget}");
    }
}

fn subgradient_gap<E: Environment>(env: &E, t: f64, x: &[f64], y: &[f64]) -> f64 {
    let (fx0, fx) = eval(env, t, x).unwrap();
    let (fy0, fy) = eval(env, t, y).unwrap();
    let (g0, jac) = eval_subgradients(env, t, x).unwrap();
    let lin = |g: &[f64]| g.iter().zip(y.iter().zip(x)).map(|(g, (a, b))| g * (a - b)).sum::<f64>();
    let scale = |a: f64, b: f64| 1e-9 * a.abs().max(b.abs()).max(1.0);
    let mut worst = fy0 - fx0 - lin(&g0) + scale(fx0, fy0);
    for i in 0..fx.len() {
        let col: Vec<f64> = jac.column(i).iter().copied().collect();
        worst = worst.min(fy[i] - fx[i] - lin(&col) + scale(fx[i], fy[i]));
    }
    worst
}

fn action() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0..5.0f64, 16)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shepherd_subgradient_inequality(t in 0.0..1.0f64, x in action(), y in action(), which in 0usize..3) {
        let objective = [Objective::None, Objective::BlackSheep, Objective::MinAcceleration][which];
        let env = ShepherdEnvironment::new(shepherd_fixture(), objective);
        prop_assert!(subgradient_gap(&env, t, &x, &y) >= 0.0);
    }

    #[test]
    fn tracking_subgradient_inequality(t in 0.0..1.0f64, x in point(), y in point(), seed in 0u64..50) {
        prop_assert!(subgradient_gap(&tracking_fixture(seed), t, &x, &y) >= 0.0);
    }

    #[test]
    fn shepherd_constraints_are_midpoint_convex(t in 0.0..1.0f64, x in action(), y in action()) {
        let env = ShepherdEnvironment::new(shepherd_fixture(), Objective::BlackSheep);
        let mid: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 0.5 * (a + b)).collect();
        let (a0, a) = eval(&env, t, &x).unwrap();
        let (b0, b) = eval(&env, t, &y).unwrap();
        let (m0, m) = eval(&env, t, &mid).unwrap();
        prop_assert!(m0 <= 0.5 * (a0 + b0) + 1e-9 * a0.abs().max(b0.abs()).max(1.0));
        for i in 0..m.len() {
            prop_assert!(m[i] <= 0.5 * (a[i] + b[i]) + 1e-9 * a[i].abs().max(b[i].abs()).max(1.0));
        }
    }

    #[test]
    fn saturation_floor_holds(t in 0.0..1.0f64, x in action(), delta in 0.01..1.0f64) {
        let env = saturate(ShepherdEnvironment::new(shepherd_fixture(), Objective::None), delta).unwrap();
        let (_, f) = eval(&env, t, &x).unwrap();
        prop_assert!(f.iter().all(|v| *v >= -delta));
    }

    #[test]
    fn evaluation_is_deterministic(t in 0.0..1.0f64, x in action()) {
        let a = ShepherdEnvironment::new(shepherd_fixture(), Objective::MinAcceleration);
        let b = ShepherdEnvironment::new(shepherd_fixture(), Objective::MinAcceleration);
        let (a0, af) = eval(&a, t, &x).unwrap();
        let (b0, bf) = eval(&b, t, &x).unwrap();
        prop_assert_eq!(a0.to_bits(), b0.to_bits());
        prop_assert!(af.iter().zip(&bf).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn path_objective_matches_quadrature(seed in 0u64..1000) {
        let params = ShepherdParams::default();
        let sc = ShepherdScenario::draw(&params, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let intervals = 2000;
        let hq = params.horizon / intervals as f64;
        for (i, coeffs) in sc.coefficients.iter().enumerate() {
            for (k, c) in coeffs.iter().enumerate() {
                let mut acc = 0.0;
                for q in 0..=intervals {
                    let t = q as f64 * hq;
                    let a: f64 = basis_eval(params.basis, c.len(), t, params.horizon)
                        .pddot
                        .iter()
                        .zip(c)
                        .map(|(p, w)| p * w)
                        .sum();
                    let w = if q == 0 || q == intervals { 1.0 } else if q % 2 == 1 { 4.0 } else { 2.0 };
                    acc += w * a * a;
                }
                let obj = sc.qp[i][k].objective;
                prop_assert!((acc * hq / 3.0 - obj).abs() <= 1e-6 * obj.abs().max(1.0));
            }
        }
    }

    #[test]
    fn noise_has_requested_spread(seed in 0u64..1000) {
        let params = ShepherdParams::default();
        let sc = ShepherdScenario::draw(&params, seed, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let samples: Vec<f64> = sc.noise.iter().flat_map(|n| n.iter().flatten().copied()).collect();
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let s2 = params.noise_std * params.noise_std;
        // about seven standard errors for 10^4 Gaussian samples
        prop_assert!(mean.abs() <= 7.0 * params.noise_std / n.sqrt());
        prop_assert!((var / s2 - 1.0).abs() <= 7.0 * (2.0 / n).sqrt());
    }
}
