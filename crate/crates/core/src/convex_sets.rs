//! Closed convex sets with exact point projection and tangent-cone projection
//! of vector fields.
//!
//! `project_point` returns the unique nearest member of the set. `project_field`
//! returns the limit `(P(x + δv) - x) / δ` as `δ → 0⁺`, i.e. the projection of
//! `v` onto the tangent cone at `x`. Interior points leave `v` unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Distance from a set below which a point is treated as a member.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Relative radius band treated as the boundary of a ball.
const BALL_BOUNDARY_REL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SetRepr", into = "SetRepr")]
pub enum ConvexSet {
    FullSpace(usize),
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    NonnegativeOrthant(usize),
}

impl ConvexSet {
    pub fn full(dim: usize) -> Self {
        ConvexSet::FullSpace(dim)
    }

    pub fn orthant(dim: usize) -> Self {
        ConvexSet::NonnegativeOrthant(dim)
    }

    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len(), "box bounds")?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "box bound {i} is not finite"
                )));
            }
            if l > u {
                return Err(Error::InvalidParameter(format!(
                    "box lower bound {l} exceeds upper bound {u} at index {i}"
                )));
            }
        }
        Ok(ConvexSet::Box { lower, upper })
    }

    /// Hypercube `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::boxed(vec![lo; dim], vec![hi; dim])
    }

    pub fn ball(center: Vec<f64>, radius: f64) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "ball radius must be positive and finite, got {radius}"
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidParameter("ball center is not finite".into()));
        }
        Ok(ConvexSet::Ball { center, radius })
    }

    pub fn dim(&self) -> usize {
        match self {
            ConvexSet::FullSpace(d) | ConvexSet::NonnegativeOrthant(d) => *d,
            ConvexSet::Box { lower, .. } => lower.len(),
            ConvexSet::Ball { center, .. } => center.len(),
        }
    }

    /// `R` with `‖x‖ ≤ R` for every member, when the set is bounded.
    pub fn norm_bound(&self) -> Option<f64> {
        match self {
            ConvexSet::FullSpace(_) | ConvexSet::NonnegativeOrthant(_) => None,
            ConvexSet::Box { lower, upper } => Some(
                lower
                    .iter()
                    .zip(upper)
                    .map(|(l, u)| {
                        let m = l.abs().max(u.abs());
                        m * m
                    })
                    .sum::<f64>()
                    .sqrt(),
            ),
            ConvexSet::Ball { center, radius } => Some(norm(center) + radius),
        }
    }

    /// Euclidean distance from `z` to the set.
    pub fn distance(&self, z: &[f64]) -> Result<f64> {
        check_dim(self.dim(), z.len(), "distance")?;
        Ok(self.distance_unchecked(z))
    }

    fn distance_unchecked(&self, z: &[f64]) -> f64 {
        match self {
            ConvexSet::FullSpace(_) => 0.0,
            ConvexSet::NonnegativeOrthant(_) => z
                .iter()
                .map(|&v| if v < 0.0 { v * v } else { 0.0 })
                .sum::<f64>()
                .sqrt(),
            ConvexSet::Box { lower, upper } => z
                .iter()
                .zip(lower.iter().zip(upper))
                .map(|(&v, (&l, &u))| {
                    let d = if v < l {
                        l - v
                    } else if v > u {
                        v - u
                    } else {
                        0.0
                    };
                    d * d
                })
                .sum::<f64>()
                .sqrt(),
            ConvexSet::Ball { center, radius } => (dist(z, center) - radius).max(0.0),
        }
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        z.len() == self.dim() && self.distance_unchecked(z) <= tol
    }

    pub fn project_point(&self, z: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), z.len(), "project_point")?;
        let mut p = z.to_vec();
        self.project_in_place(&mut p);
        Ok(p)
    }

    /// Replaces `z` with its projection. Caller guarantees the dimension.
    pub fn project_in_place(&self, z: &mut [f64]) {
        debug_assert_eq!(z.len(), self.dim());
        match self {
            ConvexSet::FullSpace(_) => {}
            ConvexSet::NonnegativeOrthant(_) => z.iter_mut().for_each(|v| *v = v.max(0.0)),
            ConvexSet::Box { lower, upper } => {
                for (v, (&l, &u)) in z.iter_mut().zip(lower.iter().zip(upper)) {
                    *v = v.clamp(l, u);
                }
            }
            ConvexSet::Ball { center, radius } => {
                let d = dist(z, center);
                if d > *radius {
                    let s = radius / d;
                    for (v, c) in z.iter_mut().zip(center) {
                        *v = c + (*v - c) * s;
                    }
                }
            }
        }
    }

    pub fn project_field(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; v.len()];
        self.project_field_into(x, v, &mut out)?;
        Ok(out)
    }

    /// Tangent-cone projection of `v` at `x`, written into `out`.
    pub fn project_field_into(&self, x: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        check_dim(n, x.len(), "project_field point")?;
        check_dim(n, v.len(), "project_field vector")?;
        check_dim(n, out.len(), "project_field output")?;
        let distance = self.distance_unchecked(x);
        if distance > MEMBERSHIP_TOL {
            return Err(Error::NotInSet {
                distance,
                tolerance: MEMBERSHIP_TOL,
            });
        }
        out.copy_from_slice(v);
        match self {
            ConvexSet::FullSpace(_) => {}
            ConvexSet::NonnegativeOrthant(_) => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    if xi <= 0.0 && *o < 0.0 {
                        *o = 0.0;
                    }
                }
            }
            ConvexSet::Box { lower, upper } => {
                for (i, o) in out.iter_mut().enumerate() {
                    if (x[i] <= lower[i] && *o < 0.0) || (x[i] >= upper[i] && *o > 0.0) {
                        *o = 0.0;
                    }
                }
            }
            ConvexSet::Ball { center, radius } => {
                let d = dist(x, center);
                if d >= radius * (1.0 - BALL_BOUNDARY_REL) && d > 0.0 {
                    let outward: f64 = v
                        .iter()
                        .zip(x.iter().zip(center))
                        .map(|(vi, (xi, ci))| vi * (xi - ci))
                        .sum::<f64>()
                        / d;
                    if outward > 0.0 {
                        for (o, (xi, ci)) in out.iter_mut().zip(x.iter().zip(center)) {
                            *o -= outward * (xi - ci) / d;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// `(x0 - x)ᵀv - (x0 - x)ᵀ Π(x0, v)`, nonnegative for members `x0`, `x`.
    pub fn lemma1_gap(&self, x0: &[f64], x: &[f64], v: &[f64]) -> Result<f64> {
        let distance = self.distance(x)?;
        if distance > MEMBERSHIP_TOL {
            return Err(Error::NotInSet {
                distance,
                tolerance: MEMBERSHIP_TOL,
            });
        }
        let pv = self.project_field(x0, v)?;
        Ok(x0
            .iter()
            .zip(x)
            .zip(v.iter().zip(&pv))
            .map(|((a, b), (vi, pi))| (a - b) * (vi - pi))
            .sum())
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub(crate) fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum SetRepr {
    Full { dim: usize },
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Orthant { dim: usize },
}

impl TryFrom<SetRepr> for ConvexSet {
    type Error = Error;

    fn try_from(r: SetRepr) -> Result<Self> {
        match r {
            SetRepr::Full { dim } => Ok(ConvexSet::FullSpace(dim)),
            SetRepr::Orthant { dim } => Ok(ConvexSet::NonnegativeOrthant(dim)),
            SetRepr::Box { lower, upper } => ConvexSet::boxed(lower, upper),
            SetRepr::Ball { center, radius } => ConvexSet::ball(center, radius),
        }
    }
}

impl From<ConvexSet> for SetRepr {
    fn from(s: ConvexSet) -> Self {
        match s {
            ConvexSet::FullSpace(dim) => SetRepr::Full { dim },
            ConvexSet::NonnegativeOrthant(dim) => SetRepr::Orthant { dim },
            ConvexSet::Box { lower, upper } => SetRepr::Box { lower, upper },
            ConvexSet::Ball { center, radius } => SetRepr::Ball { center, radius },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_box(n: usize) -> ConvexSet {
        ConvexSet::cube(n, 0.0, 1.0).unwrap()
    }

    #[test]
    fn box_projection_clamps() {
        let p = unit_box(2).project_point(&[1.5, 0.5]).unwrap();
        assert_eq!(p, vec![1.0, 0.5]);
    }

    #[test]
    fn ball_projection_scales_radially() {
        let b = ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        assert_eq!(b.project_point(&[2.0, 0.0]).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn box_field_at_lower_bound() {
        let s = unit_box(1);
        assert_eq!(s.project_field(&[0.0], &[-1.0]).unwrap(), vec![0.0]);
        assert_eq!(s.project_field(&[0.0], &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(s.project_field(&[1.0], &[1.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn interior_field_is_identity() {
        let sets = [
            unit_box(2),
            ConvexSet::ball(vec![0.5, 0.5], 1.0).unwrap(),
            ConvexSet::orthant(2),
            ConvexSet::full(2),
        ];
        for s in &sets {
            assert_eq!(s.project_field(&[0.5, 0.5], &[3.0, -2.0]).unwrap(), vec![3.0, -2.0]);
        }
    }

    #[test]
    fn ball_boundary_removes_outward_component() {
        let b = ConvexSet::ball(vec![0.0, 0.0], 1.0).unwrap();
        let p = b.project_field(&[1.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p, vec![0.0, 1.0]);
        // limit quotient
        let d = 1e-6;
        let q = b.project_point(&[1.0 + d, d]).unwrap();
        let quotient = [(q[0] - 1.0) / d, q[1] / d];
        assert!((quotient[0] - p[0]).abs() < 1e-4 && (quotient[1] - p[1]).abs() < 1e-4);
    }

    #[test]
    fn field_outside_set_is_rejected() {
        let err = unit_box(1).project_field(&[1.1], &[0.0]).unwrap_err();
        assert!(matches!(err, Error::NotInSet { .. }));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            unit_box(2).project_point(&[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn projection_inequality_examples() {
        let s = unit_box(1);
        assert_eq!(s.lemma1_gap(&[0.0], &[1.0], &[-1.0]).unwrap(), 1.0);
        assert_eq!(s.lemma1_gap(&[0.5], &[1.0], &[-1.0]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_sets_are_rejected() {
        assert!(ConvexSet::boxed(vec![1.0], vec![0.0]).is_err());
        assert!(ConvexSet::ball(vec![0.0], 0.0).is_err());
        assert!(ConvexSet::ball(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn norm_bounds() {
        assert_eq!(ConvexSet::cube(4, -2.0, 1.0).unwrap().norm_bound(), Some(4.0));
        assert_eq!(ConvexSet::ball(vec![3.0, 4.0], 1.0).unwrap().norm_bound(), Some(6.0));
        assert_eq!(ConvexSet::orthant(3).norm_bound(), None);
    }

    #[test]
    fn json_round_trip_and_validation() {
        let s = ConvexSet::ball(vec![0.0, 1.0], 2.0).unwrap();
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(j, r#"{"kind":"ball","center":[0.0,1.0],"radius":2.0}"#);
        assert_eq!(serde_json::from_str::<ConvexSet>(&j).unwrap(), s);
        assert!(serde_json::from_str::<ConvexSet>(r#"{"kind":"ball","center":[0],"radius":-1}"#).is_err());
        assert!(serde_json::from_str::<ConvexSet>(r#"{"kind":"full","dim":2,"extra":1}"#).is_err());
        let o: ConvexSet = serde_json::from_str(r#"{"kind":"orthant","dim":3}"#).unwrap();
        assert_eq!(o, ConvexSet::orthant(3));
    }
}
