//! Limited-memory BFGS with a weak Wolfe bracketing line search.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when `‖∇φ‖∞` falls below this.
    pub grad_tol: f64,
    /// Stop when an iteration decreases `φ` by less than `value_tol·(1 + |φ|)`.
    pub value_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 400,
            grad_tol: 1e-7,
            value_tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LbfgsOutcome {
    pub iterations: usize,
    pub evaluations: usize,
    pub value: f64,
    pub grad_inf: f64,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `phi`, which returns the value and writes the gradient.
pub fn minimize(
    x: &mut [f64],
    phi: &mut dyn FnMut(&[f64], &mut [f64]) -> f64,
    opts: &LbfgsOptions,
) -> LbfgsOutcome {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = phi(x, &mut g);
    let mut out = LbfgsOutcome {
        evaluations: 1,
        value: fx,
        grad_inf: inf_norm(&g),
        ..Default::default()
    };
    if out.grad_inf <= opts.grad_tol {
        out.converged = true;
        return out;
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut d = vec![0.0; n];
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut alpha_buf = vec![0.0; opts.memory.max(1)];

    for it in 0..opts.max_iterations {
        out.iterations = it + 1;

        // two-loop recursion
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        for (j, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[j] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        let gamma = match pairs.back() {
            Some((s, y, _)) => dot(s, y) / dot(y, y),
            None => 1.0 / inf_norm(&g).max(1.0),
        };
        d.iter_mut().for_each(|di| *di *= gamma);
        for (j, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            let a = alpha_buf[j];
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi / inf_norm(&g).max(1.0));
            slope = dot(&g, &d);
        }

        // weak Wolfe bracketing
        let (c1, c2) = (1e-4, 0.9);
        let (mut lo, mut hi) = (0.0, f64::INFINITY);
        let mut a = 1.0;
        let mut accepted = false;
        let mut best: Option<(f64, f64)> = None;
        let mut ft = fx;
        for _ in 0..60 {
            xt.iter_mut()
                .zip(x.iter())
                .zip(&d)
                .for_each(|((t, xi), di)| *t = xi + a * di);
            ft = phi(&xt, &mut gt);
            out.evaluations += 1;
            if ft.is_finite() && ft < fx && best.is_none_or(|b| ft < b.1) {
                best = Some((a, ft));
            }
            if !ft.is_finite() || ft > fx + c1 * a * slope {
                hi = a;
            } else if dot(&gt, &d) < c2 * slope {
                lo = a;
            } else {
                accepted = true;
                break;
            }
            a = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * lo.max(a) };
        }
        if !accepted {
            match best {
                Some((ab, _)) => {
                    a = ab;
                    xt.iter_mut()
                        .zip(x.iter())
                        .zip(&d)
                        .for_each(|((t, xi), di)| *t = xi + a * di);
                    ft = phi(&xt, &mut gt);
                    out.evaluations += 1;
                }
                None => break,
            }
        }

        let s: Vec<f64> = xt.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let decrease = fx - ft;
        x.copy_from_slice(&xt);
        g.copy_from_slice(&gt);
        fx = ft;
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == opts.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        out.value = fx;
        out.grad_inf = inf_norm(&g);
        if out.grad_inf <= opts.grad_tol {
            out.converged = true;
            break;
        }
        if decrease <= opts.value_tol * (1.0 + fx.abs()) {
            break;
        }
    }
    out.value = fx;
    out.grad_inf = inf_norm(&g);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let mut x = vec![-1.2, 1.0];
        let out = minimize(
            &mut x,
            &mut |x, g| {
                let (a, b) = (x[0], x[1]);
                g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
                g[1] = 200.0 * (b - a * a);
                (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
            },
            &LbfgsOptions::default(),
        );
        assert!(out.converged, "{out:?}");
        assert!((x[0] - 1.0).abs() < 1e-6 && (x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let scales = [1.0, 1e2, 1e4, 1e6];
        let mut x = vec![1.0; 4];
        let out = minimize(
            &mut x,
            &mut |x, g| {
                let mut v = 0.0;
                for i in 0..4 {
                    g[i] = scales[i] * (x[i] - i as f64);
                    v += 0.5 * scales[i] * (x[i] - i as f64).powi(2);
                }
                v
            },
            &LbfgsOptions::default(),
        );
        assert!(out.converged);
        for (i, xi) in x.iter().enumerate() {
            assert!((xi - i as f64).abs() < 1e-6);
        }
    }
}
