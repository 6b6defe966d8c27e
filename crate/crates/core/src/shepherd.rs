//! Herd-following benchmark.
//!
//! Sheep follow minimum-acceleration polynomial paths through random
//! waypoints plus frozen sample-and-hold noise. The shepherd action is the
//! coefficient vector of its own polynomial path, stacked as
//! `[x_{1,0..n}, x_{2,0..n}]`, and each constraint keeps the shepherd within
//! `r_i` of sheep `i`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::convex_sets::ConvexSet;
use crate::environment::Environment;
use crate::error::{check_dim, Error, Result};
use crate::offline::{check_viability, TimeGrid, ViabilityOptions};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// `t^j`.
    Monomial,
    /// Legendre polynomials shifted to `[0, T]`.
    Legendre,
}

/// Values and first two time derivatives of the basis at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub p: Vec<f64>,
    pub pdot: Vec<f64>,
    pub pddot: Vec<f64>,
}

pub fn basis_eval(basis: Basis, n: usize, t: f64, horizon: f64) -> BasisValues {
    let mut v = BasisValues {
        p: vec![0.0; n],
        pdot: vec![0.0; n],
        pddot: vec![0.0; n],
    };
    basis_eval_into(basis, t, horizon, &mut v.p, &mut v.pdot, &mut v.pddot);
    v
}

/// Fills `p`, `pd`, `pdd` (all of equal length) at `t`.
pub fn basis_eval_into(basis: Basis, t: f64, horizon: f64, p: &mut [f64], pd: &mut [f64], pdd: &mut [f64]) {
    let n = p.len();
    if n == 0 {
        return;
    }
    match basis {
        Basis::Monomial => {
            let mut pow = vec![1.0; n];
            for j in 1..n {
                pow[j] = pow[j - 1] * t;
            }
            for j in 0..n {
                p[j] = pow[j];
                pd[j] = if j >= 1 { j as f64 * pow[j - 1] } else { 0.0 };
                pdd[j] = if j >= 2 { (j * (j - 1)) as f64 * pow[j - 2] } else { 0.0 };
            }
        }
        Basis::Legendre => {
            let s = 2.0 * t / horizon - 1.0;
            p[0] = 1.0;
            pd[0] = 0.0;
            pdd[0] = 0.0;
            if n > 1 {
                p[1] = s;
                pd[1] = 1.0;
                pdd[1] = 0.0;
            }
            for j in 1..n.saturating_sub(1) {
                let jf = j as f64;
                p[j + 1] = ((2.0 * jf + 1.0) * s * p[j] - jf * p[j - 1]) / (jf + 1.0);
                pd[j + 1] = pd[j - 1] + (2.0 * jf + 1.0) * p[j];
                pdd[j + 1] = pdd[j - 1] + (2.0 * jf + 1.0) * pd[j];
            }
            let c1 = 2.0 / horizon;
            let c2 = c1 * c1;
            pd.iter_mut().for_each(|v| *v *= c1);
            pdd.iter_mut().for_each(|v| *v *= c2);
        }
    }
}

/// `G_{jk} = ∫₀ᵀ p̈_j p̈_k dt` in closed form.
pub fn acceleration_gram(basis: Basis, n: usize, horizon: f64) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, n);
    match basis {
        Basis::Monomial => {
            for j in 2..n {
                for k in 2..n {
                    let e = (j + k - 3) as i32;
                    g[(j, k)] = (j * (j - 1) * k * (k - 1)) as f64 * horizon.powi(e) / e as f64;
                }
            }
        }
        Basis::Legendre => {
            // P_a'' = Σ_{l ≤ a-2, a-l even} (l + ½)(a(a+1) − l(l+1)) P_l
            let coef = |a: usize, l: usize| -> f64 {
                if l + 2 > a || (a - l) % 2 == 1 {
                    0.0
                } else {
                    (l as f64 + 0.5) * ((a * (a + 1)) as f64 - (l * (l + 1)) as f64)
                }
            };
            let scale = 8.0 / horizon.powi(3);
            for a in 2..n {
                for b in a..n {
                    let mut acc = 0.0;
                    for l in 0..a.min(b) - 1 {
                        acc += coef(a, l) * coef(b, l) * 2.0 / (2 * l + 1) as f64;
                    }
                    g[(a, b)] = scale * acc;
                    g[(b, a)] = scale * acc;
                }
            }
        }
    }
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathQpReport {
    pub condition: f64,
    pub objective: f64,
    pub max_residual: f64,
}

/// Minimum-acceleration coefficients for one scalar coordinate passing through
/// `(time, value)` interpolation points.
pub fn min_acceleration_path(
    basis: Basis,
    n: usize,
    horizon: f64,
    points: &[(f64, f64)],
) -> Result<(Vec<f64>, PathQpReport)> {
    let q = points.len();
    if n < q + 1 {
        return Err(Error::InvalidParameter(format!(
            "basis size {n} too small for {q} interpolation constraints"
        )));
    }
    let g = acceleration_gram(basis, n, horizon);
    let gscale = g.amax().max(1.0);
    let dim = n + q;
    let mut kkt = DMatrix::zeros(dim, dim);
    for j in 0..n {
        for k in 0..n {
            kkt[(j, k)] = 2.0 * g[(j, k)] / gscale;
        }
    }
    let mut rhs = DVector::zeros(dim);
    let mut pd = vec![0.0; n];
    let mut pdd = vec![0.0; n];
    let mut rows = DMatrix::zeros(q, n);
    for (r, (t, value)) in points.iter().enumerate() {
        let mut p = vec![0.0; n];
        basis_eval_into(basis, *t, horizon, &mut p, &mut pd, &mut pdd);
        for j in 0..n {
            kkt[(n + r, j)] = p[j];
            kkt[(j, n + r)] = p[j];
            rows[(r, j)] = p[j];
        }
        rhs[n + r] = *value;
    }
    let lu = kkt.clone().full_piv_lu();
    let mut sol = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Singular("path KKT system (repeated interpolation times?)".into()))?;
    let r = &rhs - &kkt * &sol;
    if let Some(corr) = lu.solve(&r) {
        sol += corr;
    }
    let sv = kkt.singular_values();
    let condition = sv.max() / sv.min();
    if !condition.is_finite() || condition > 1e16 {
        return Err(Error::Singular(format!(
            "path KKT system condition number {condition:e}"
        )));
    }
    let c = DVector::from_iterator(n, sol.iter().take(n).copied());
    let objective = (c.transpose() * &g * &c)[(0, 0)];
    let residual = (&rows * &c)
        .iter()
        .zip(points)
        .map(|(a, (_, v))| (a - v).abs())
        .fold(0.0, f64::max);
    Ok((
        c.iter().copied().collect(),
        PathQpReport {
            condition,
            objective,
            max_residual: residual,
        },
    ))
}

fn default_sheep() -> usize {
    5
}
fn default_basis_size() -> usize {
    30
}
fn default_basis() -> Basis {
    Basis::Legendre
}
fn default_horizon() -> f64 {
    1.0
}
fn default_radius() -> f64 {
    0.3
}
fn default_waypoints() -> usize {
    3
}
fn default_offset() -> f64 {
    0.1
}
fn default_noise_std() -> f64 {
    0.1
}
fn default_noise_cells() -> usize {
    DEFAULT_NOISE_CELLS
}
fn default_action_bound() -> f64 {
    5.0
}

fn default_scaling() -> BasisScaling {
    BasisScaling::Acceleration
}

/// Normalization of the shepherd basis elements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisScaling {
    /// Use `p_j` as is.
    None,
    /// Divide `p_j` by `max(1, max_t |p̈_j(t)|)` computed on a unit horizon,
    /// so the coefficient box is the same for every `T`.
    Acceleration,
}

/// `max_{t∈[0,T]} |p̈_j(t)|`, attained at `t = T` for both bases.
pub fn peak_acceleration(basis: Basis, j: usize, horizon: f64) -> f64 {
    let jf = j as f64;
    match basis {
        Basis::Monomial if j >= 2 => jf * (jf - 1.0) * horizon.powi(j as i32 - 2),
        Basis::Monomial => 0.0,
        Basis::Legendre => (jf - 1.0) * jf * (jf + 1.0) * (jf + 2.0) / 8.0 * 4.0 / (horizon * horizon),
    }
}

/// Number of sample-and-hold cells over `[0, T]`.
pub const DEFAULT_NOISE_CELLS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShepherdParams {
    #[serde(default = "default_sheep")]
    pub sheep: usize,
    #[serde(default = "default_basis_size")]
    pub shepherd_basis_size: usize,
    #[serde(default = "default_basis_size")]
    pub sheep_basis_size: usize,
    #[serde(default = "default_basis")]
    pub basis: Basis,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_waypoints")]
    pub waypoints: usize,
    #[serde(default = "default_offset")]
    pub offset: f64,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default = "default_noise_cells")]
    pub noise_cells: usize,
    /// Half-width of the coefficient box the shepherd action lives in.
    #[serde(default = "default_action_bound")]
    pub action_bound: f64,
    #[serde(default = "default_scaling")]
    pub shepherd_scaling: BasisScaling,
}

impl Default for ShepherdParams {
    fn default() -> Self {
        Self {
            sheep: default_sheep(),
            shepherd_basis_size: default_basis_size(),
            sheep_basis_size: default_basis_size(),
            basis: default_basis(),
            horizon: default_horizon(),
            radius: default_radius(),
            waypoints: default_waypoints(),
            offset: default_offset(),
            noise_std: default_noise_std(),
            noise_cells: default_noise_cells(),
            action_bound: default_action_bound(),
            shepherd_scaling: default_scaling(),
        }
    }
}

impl ShepherdParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.sheep == 0 {
            return bad("at least one sheep is required".into());
        }
        if self.shepherd_basis_size == 0 {
            return bad("shepherd basis size must be positive".into());
        }
        if self.sheep_basis_size < self.waypoints + 3 {
            return bad(format!(
                "sheep basis size {} must exceed waypoint count + 2 = {}",
                self.sheep_basis_size,
                self.waypoints + 2
            ));
        }
        for (name, v) in [
            ("horizon", self.horizon),
            ("radius", self.radius),
            ("action bound", self.action_bound),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.offset >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("offset and noise std must be nonnegative".into());
        }
        if self.noise_cells == 0 {
            return bad("noise grid needs at least one cell".into());
        }
        Ok(())
    }

    /// Divisors `s_j` applied to the shepherd basis: `q_j = p_j / s_j`.
    pub fn shepherd_scale(&self) -> Vec<f64> {
        (0..self.shepherd_basis_size)
            .map(|j| match self.shepherd_scaling {
                BasisScaling::None => 1.0,
                BasisScaling::Acceleration => peak_acceleration(self.basis, j, 1.0).max(1.0),
            })
            .collect()
    }

    /// `X = [-B, B]^{2n}` in scaled coordinates.
    pub fn action_set(&self) -> ConvexSet {
        ConvexSet::cube(2 * self.shepherd_basis_size, -self.action_bound, self.action_bound)
            .expect("validated bound")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViabilityCertificate {
    pub xdagger: Vec<f64>,
    pub residual: f64,
    pub grid_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShepherdScenario {
    pub version: u32,
    pub params: ShepherdParams,
    pub seed: u64,
    /// Draws consumed by the redraw loop, including the accepted one.
    pub draws: usize,
    pub radii: Vec<f64>,
    pub waypoints: Vec<[f64; 2]>,
    /// Per sheep, per waypoint; sheep 0 has zero offsets.
    pub offsets: Vec<Vec<[f64; 2]>>,
    /// `coefficients[i][k][j]`.
    pub coefficients: Vec<[Vec<f64>; 2]>,
    /// `noise[i][k][cell]`.
    pub noise: Vec<[Vec<f64>; 2]>,
    pub qp: Vec<[PathQpReport; 2]>,
    pub certificate: Option<ViabilityCertificate>,
}

#[derive(Debug, Clone)]
pub struct GenerateOptions {
    pub grid_step: f64,
    pub max_draws: usize,
    pub viability: ViabilityOptions,
    /// Skip the viability loop and return the first draw.
    pub unchecked: bool,
    /// Reject draws first on a subgrid with about this many intervals.
    /// `0` checks the full grid only.
    pub screen_intervals: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            grid_step: 1e-4,
            max_draws: 100,
            viability: ViabilityOptions::default(),
            unchecked: false,
            screen_intervals: 500,
        }
    }
}

impl ShepherdScenario {
    /// Builds a scenario from explicit sheep coefficients and noise table.
    pub fn from_parts(
        params: ShepherdParams,
        coefficients: Vec<[Vec<f64>; 2]>,
        noise: Option<Vec<[Vec<f64>; 2]>>,
    ) -> Result<Self> {
        params.validate()?;
        check_dim(params.sheep, coefficients.len(), "sheep coefficients")?;
        for c in &coefficients {
            check_dim(params.sheep_basis_size, c[0].len(), "sheep coefficients")?;
            check_dim(params.sheep_basis_size, c[1].len(), "sheep coefficients")?;
        }
        let noise = noise.unwrap_or_else(|| {
            vec![[vec![0.0; params.noise_cells], vec![0.0; params.noise_cells]]; params.sheep]
        });
        check_dim(params.sheep, noise.len(), "noise table")?;
        for w in &noise {
            check_dim(params.noise_cells, w[0].len(), "noise table")?;
            check_dim(params.noise_cells, w[1].len(), "noise table")?;
        }
        Ok(Self {
            version: SCENARIO_VERSION,
            radii: vec![params.radius; params.sheep],
            offsets: vec![Vec::new(); params.sheep],
            qp: Vec::new(),
            params,
            seed: 0,
            draws: 0,
            waypoints: Vec::new(),
            coefficients,
            noise,
            certificate: None,
        })
    }

    pub fn sheep_count(&self) -> usize {
        self.params.sheep
    }

    pub fn horizon(&self) -> f64 {
        self.params.horizon
    }

    pub fn action_dim(&self) -> usize {
        2 * self.params.shepherd_basis_size
    }

    pub fn action_set(&self) -> ConvexSet {
        self.params.action_set()
    }

    /// Index of the sample-and-hold cell containing `t`.
    pub fn noise_cell(&self, t: f64) -> usize {
        let cells = self.params.noise_cells;
        let c = (t / self.params.horizon * cells as f64 + 1e-9).floor();
        (c.max(0.0) as usize).min(cells - 1)
    }

    /// Smooth path of sheep `i` without noise.
    pub fn sheep_path(&self, i: usize, t: f64) -> [f64; 2] {
        let n = self.params.sheep_basis_size;
        let b = basis_eval(self.params.basis, n, t, self.params.horizon);
        let c = &self.coefficients[i];
        [dot(&c[0], &b.p), dot(&c[1], &b.p)]
    }

    pub fn sheep_position(&self, i: usize, t: f64) -> [f64; 2] {
        let y = self.sheep_path(i, t);
        let cell = self.noise_cell(t);
        [y[0] + self.noise[i][0][cell], y[1] + self.noise[i][1][cell]]
    }

    /// Mean sheep coefficients mapped onto the shepherd basis.
    pub fn herd_center_action(&self) -> Vec<f64> {
        let n = self.params.shepherd_basis_size;
        let ni = self.params.sheep_basis_size;
        let mut x = vec![0.0; 2 * n];
        let scale = 1.0 / self.params.sheep as f64;
        let s = self.params.shepherd_scale();
        for c in &self.coefficients {
            for k in 0..2 {
                for j in 0..n.min(ni) {
                    x[k * n + j] += scale * s[j] * c[k][j];
                }
            }
        }
        x
    }

    /// One scenario draw from `rng`, without a viability check.
    pub fn draw(params: &ShepherdParams, seed: u64, rng: &mut ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        let p = params;
        let m = p.sheep;
        let lcount = p.waypoints;
        let waypoints: Vec<[f64; 2]> = (0..lcount).map(|_| [rng.gen(), rng.gen()]).collect();
        let mut offsets = vec![vec![[0.0; 2]; lcount]; m];
        for off in offsets.iter_mut().skip(1) {
            for o in off.iter_mut() {
                for v in o.iter_mut() {
                    *v = if p.offset > 0.0 { rng.gen_range(-p.offset..=p.offset) } else { 0.0 };
                }
            }
        }
        let mut noise = vec![[vec![0.0; p.noise_cells], vec![0.0; p.noise_cells]]; m];
        if p.noise_std > 0.0 {
            let normal = Normal::new(0.0, p.noise_std).expect("finite std");
            for w in noise.iter_mut() {
                for k in 0..2 {
                    for v in w[k].iter_mut() {
                        *v = normal.sample(rng);
                    }
                }
            }
        }

        let mut coefficients = Vec::with_capacity(m);
        let mut qp = Vec::with_capacity(m);
        for off in &offsets {
            let mut coords: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
            let mut reports = [PathQpReport {
                condition: 0.0,
                objective: 0.0,
                max_residual: 0.0,
            }; 2];
            for k in 0..2 {
                let mut pts = vec![(0.0, 0.0), (p.horizon, 1.0)];
                for l in 0..lcount {
                    let t = (l + 1) as f64 * p.horizon / (lcount + 1) as f64;
                    pts.push((t, waypoints[l][k] + off[l][k]));
                }
                let (c, rep) = min_acceleration_path(p.basis, p.sheep_basis_size, p.horizon, &pts)?;
                coords[k] = c;
                reports[k] = rep;
            }
            coefficients.push(coords);
            qp.push(reports);
        }
        Ok(Self {
            version: SCENARIO_VERSION,
            params: p.clone(),
            seed,
            draws: 1,
            radii: vec![p.radius; m],
            waypoints,
            offsets,
            coefficients,
            noise,
            qp,
            certificate: None,
        })
    }

    /// Draws scenarios from `seed` until one is certified viable on a grid of
    /// step `opts.grid_step`.
    pub fn generate(params: &ShepherdParams, seed: u64, opts: &GenerateOptions) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = TimeGrid::new(params.horizon, opts.grid_step)?;
        let mut last_residual = f64::NAN;
        let screen = grid.coarsen(opts.screen_intervals);
        for draw in 1..=opts.max_draws.max(1) {
            let mut sc = Self::draw(params, seed, &mut rng)?;
            sc.draws = draw;
            if opts.unchecked {
                return Ok(sc);
            }
            let mut vopts = opts.viability.clone();
            if let Some((coarse, _)) = &screen {
                // Subgrid nodes are grid nodes, so a miss there is a miss here.
                match sc.certify(coarse, &vopts) {
                    Ok(true) => vopts.init = sc.certificate.take().map(|c| c.xdagger),
                    Ok(false) => {
                        last_residual = sc.certificate.as_ref().map_or(f64::NAN, |c| c.residual);
                        continue;
                    }
                    Err(Error::Inconclusive { residual, .. }) => {
                        last_residual = residual;
                        continue;
                    }
                    Err(e) => return Err(e),
                }
            }
            match sc.certify(&grid, &vopts) {
                Ok(true) => return Ok(sc),
                Ok(false) => {
                    last_residual = sc.certificate.as_ref().map_or(f64::NAN, |c| c.residual);
                    sc.certificate = None;
                }
                Err(Error::Inconclusive { residual, .. }) => last_residual = residual,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Infeasible {
            residual: last_residual,
        })
    }

    /// Runs the viability check and stores the certificate when it passes.
    pub fn certify(&mut self, grid: &TimeGrid, opts: &ViabilityOptions) -> Result<bool> {
        let arc = Arc::new(self.clone());
        let env = ShepherdEnvironment::new(arc, Objective::None).with_grid(grid)?;
        let mut vopts = opts.clone();
        if vopts.init.is_none() {
            vopts.init = Some(self.herd_center_action());
        }
        let v = check_viability(&env, grid, &self.action_set(), &vopts)?;
        self.certificate = Some(ViabilityCertificate {
            xdagger: v.xdagger,
            residual: v.residual,
            grid_step: grid.step(),
        });
        Ok(v.viable)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(s)?;
        if sc.version != SCENARIO_VERSION {
            return Err(Error::Parse(format!(
                "unsupported scenario version {}",
                sc.version
            )));
        }
        sc.params.validate()?;
        Ok(sc)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stacks per-coordinate shepherd coefficients into an action vector.
pub fn encode(first: &[f64], second: &[f64]) -> Result<Vec<f64>> {
    check_dim(first.len(), second.len(), "coordinate coefficients")?;
    Ok(first.iter().chain(second).copied().collect())
}

/// Inverse of [`encode`].
pub fn decode(x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if !x.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "action length {} is odd",
            x.len()
        )));
    }
    let n = x.len() / 2;
    Ok((x[..n].to_vec(), x[n..].to_vec()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    None,
    /// `‖z(t) − y_1(t)‖²`.
    #[serde(alias = "black_sheep")]
    BlackSheep,
    /// `‖z̈(t)‖`.
    #[serde(rename = "minaccel", alias = "min_acceleration")]
    MinAcceleration,
}

#[derive(Debug)]
struct GridCache {
    grid: TimeGrid,
    /// Shepherd basis values per node.
    p: Vec<f64>,
    pdd: Vec<f64>,
    /// Sheep positions per node, `[node][sheep][coord]`.
    y: Vec<f64>,
}

/// Herd-following environment over a scenario.
#[derive(Debug, Clone)]
pub struct ShepherdEnvironment {
    scenario: Arc<ShepherdScenario>,
    objective: Objective,
    cache: Option<Arc<GridCache>>,
}

impl ShepherdEnvironment {
    pub fn new(scenario: Arc<ShepherdScenario>, objective: Objective) -> Self {
        Self {
            scenario,
            objective,
            cache: None,
        }
    }

    /// Precomputes basis values and sheep positions on `grid` nodes.
    pub fn with_grid(mut self, grid: &TimeGrid) -> Result<Self> {
        let sc = &self.scenario;
        if (grid.horizon() - sc.horizon()).abs() > 1e-12 * sc.horizon() {
            return Err(Error::GridMismatch(format!(
                "grid horizon {} differs from scenario horizon {}",
                grid.horizon(),
                sc.horizon()
            )));
        }
        let n = sc.params.shepherd_basis_size;
        let m = sc.sheep_count();
        let nodes = grid.len();
        let mut p = vec![0.0; nodes * n];
        let mut pdd = vec![0.0; nodes * n];
        let mut y = vec![0.0; nodes * m * 2];
        let mut scratch = NodeScratch::new(&sc.params);
        for k in 0..nodes {
            let t = grid.t(k);
            scratch.fill(sc, t);
            p[k * n..(k + 1) * n].copy_from_slice(&scratch.sp);
            pdd[k * n..(k + 1) * n].copy_from_slice(&scratch.spdd);
            y[k * 2 * m..(k + 1) * 2 * m].copy_from_slice(&scratch.y);
        }
        self.cache = Some(Arc::new(GridCache { grid: *grid, p, pdd, y }));
        Ok(self)
    }

    pub fn scenario(&self) -> &ShepherdScenario {
        &self.scenario
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    fn cached_node(&self, t: f64) -> Option<usize> {
        let c = self.cache.as_ref()?;
        let k = (t / c.grid.step()).round();
        if k < 0.0 || k as usize > c.grid.steps() {
            return None;
        }
        let k = k as usize;
        ((c.grid.t(k) - t).abs() <= 1e-12 * c.grid.horizon().max(1.0)).then_some(k)
    }

    /// Calls `body(p, pdd, y)` with shepherd basis values, accelerations, and
    /// flattened sheep positions at `t`.
    fn with_node<R>(&self, t: f64, body: impl FnOnce(&[f64], &[f64], &[f64]) -> R) -> R {
        let n = self.scenario.params.shepherd_basis_size;
        let m = self.scenario.sheep_count();
        if let Some(k) = self.cached_node(t) {
            let c = self.cache.as_ref().expect("cached node implies cache");
            return body(
                &c.p[k * n..(k + 1) * n],
                &c.pdd[k * n..(k + 1) * n],
                &c.y[k * 2 * m..(k + 1) * 2 * m],
            );
        }
        let mut scratch = NodeScratch::new(&self.scenario.params);
        scratch.fill(&self.scenario, t);
        body(&scratch.sp[..n], &scratch.spdd[..n], &scratch.y)
    }

    /// Shepherd position `z(t)` for action `x`.
    pub fn position(&self, t: f64, x: &[f64]) -> [f64; 2] {
        self.with_node(t, |p, _, _| z_of(x, p))
    }
}

struct NodeScratch {
    p: Vec<f64>,
    pd: Vec<f64>,
    pdd: Vec<f64>,
    y: Vec<f64>,
    /// Shepherd basis values and accelerations after scaling.
    sp: Vec<f64>,
    spdd: Vec<f64>,
    inv_scale: Vec<f64>,
}

impl NodeScratch {
    fn new(params: &ShepherdParams) -> Self {
        let len = params.shepherd_basis_size.max(params.sheep_basis_size);
        Self {
            p: vec![0.0; len],
            pd: vec![0.0; len],
            pdd: vec![0.0; len],
            y: vec![0.0; 2 * params.sheep],
            sp: vec![0.0; params.shepherd_basis_size],
            spdd: vec![0.0; params.shepherd_basis_size],
            inv_scale: params.shepherd_scale().iter().map(|s| 1.0 / s).collect(),
        }
    }

    fn fill(&mut self, sc: &ShepherdScenario, t: f64) {
        basis_eval_into(sc.params.basis, t, sc.params.horizon, &mut self.p, &mut self.pd, &mut self.pdd);
        let ni = sc.params.sheep_basis_size;
        let cell = sc.noise_cell(t);
        for (i, c) in sc.coefficients.iter().enumerate() {
            for k in 0..2 {
                self.y[2 * i + k] = dot(&c[k], &self.p[..ni]) + sc.noise[i][k][cell];
            }
        }
        for (j, w) in self.inv_scale.iter().enumerate() {
            self.sp[j] = self.p[j] * w;
            self.spdd[j] = self.pdd[j] * w;
        }
    }
}

fn z_of(x: &[f64], p: &[f64]) -> [f64; 2] {
    let n = p.len();
    [dot(&x[..n], p), dot(&x[n..2 * n], p)]
}

impl Environment for ShepherdEnvironment {
    fn action_dim(&self) -> usize {
        self.scenario.action_dim()
    }

    fn constraint_count(&self) -> usize {
        self.scenario.sheep_count()
    }

    fn has_objective(&self) -> bool {
        self.objective != Objective::None
    }

    fn values_into(&self, t: f64, x: &[f64], f: &mut [f64]) -> f64 {
        let radii = &self.scenario.radii;
        self.with_node(t, |p, pdd, y| {
            let z = z_of(x, p);
            for (i, fi) in f.iter_mut().enumerate() {
                let d0 = z[0] - y[2 * i];
                let d1 = z[1] - y[2 * i + 1];
                *fi = d0 * d0 + d1 * d1 - radii[i] * radii[i];
            }
            match self.objective {
                Objective::None => 0.0,
                Objective::BlackSheep => (z[0] - y[0]).powi(2) + (z[1] - y[1]).powi(2),
                Objective::MinAcceleration => {
                    let a = z_of(x, pdd);
                    a[0].hypot(a[1])
                }
            }
        })
    }

    fn subgradients_into(&self, t: f64, x: &[f64], g0: &mut [f64], jac: &mut [f64]) {
        let nn = self.action_dim();
        self.with_node(t, |p, pdd, y| {
            let n = p.len();
            let z = z_of(x, p);
            for i in 0..self.constraint_count() {
                let col = &mut jac[i * nn..(i + 1) * nn];
                for k in 0..2 {
                    let d = 2.0 * (z[k] - y[2 * i + k]);
                    for j in 0..n {
                        col[k * n + j] = d * p[j];
                    }
                }
            }
            match self.objective {
                Objective::None => g0.fill(0.0),
                Objective::BlackSheep => {
                    for k in 0..2 {
                        let d = 2.0 * (z[k] - y[k]);
                        for j in 0..n {
                            g0[k * n + j] = d * p[j];
                        }
                    }
                }
                Objective::MinAcceleration => {
                    let a = z_of(x, pdd);
                    let r = a[0].hypot(a[1]);
                    if r > 0.0 {
                        for k in 0..2 {
                            for j in 0..n {
                                g0[k * n + j] = a[k] / r * pdd[j];
                            }
                        }
                    } else {
                        g0.fill(0.0);
                    }
                }
            }
        })
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
        let radii = &self.scenario.radii;
        let m = self.constraint_count();
        self.with_node(t, |p, pdd, y| {
            let n = p.len();
            let z = z_of(x, p);
            for (i, fi) in f.iter_mut().enumerate() {
                let d0 = z[0] - y[2 * i];
                let d1 = z[1] - y[2 * i + 1];
                *fi = d0 * d0 + d1 * d1 - radii[i] * radii[i];
            }
            let mut wbuf = [0.0; 16];
            let mut heap;
            let w: &mut [f64] = if m <= wbuf.len() {
                &mut wbuf[..m]
            } else {
                heap = vec![0.0; m];
                &mut heap
            };
            weights(f, w);
            let mut s = [0.0; 2];
            for (i, wi) in w.iter().enumerate() {
                if *wi != 0.0 {
                    s[0] += 2.0 * wi * (z[0] - y[2 * i]);
                    s[1] += 2.0 * wi * (z[1] - y[2 * i + 1]);
                }
            }
            let mut accel = [0.0; 2];
            let f0 = match self.objective {
                Objective::None => 0.0,
                Objective::BlackSheep => {
                    s[0] += 2.0 * objective_weight * (z[0] - y[0]);
                    s[1] += 2.0 * objective_weight * (z[1] - y[1]);
                    (z[0] - y[0]).powi(2) + (z[1] - y[1]).powi(2)
                }
                Objective::MinAcceleration => {
                    let a = z_of(x, pdd);
                    let r = a[0].hypot(a[1]);
                    if r > 0.0 {
                        accel = [objective_weight * a[0] / r, objective_weight * a[1] / r];
                    }
                    r
                }
            };
            for k in 0..2 {
                let out = &mut grad[k * n..(k + 1) * n];
                if accel[k] != 0.0 {
                    for j in 0..n {
                        out[j] = s[k] * p[j] + accel[k] * pdd[j];
                    }
                } else {
                    for j in 0..n {
                        out[j] = s[k] * p[j];
                    }
                }
            }
            f0
        })
    }
}
