//! Herding experiments: configuration, runs over a horizon sweep, output
//! files and the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::{simulate, ControllerConfig, Mode, Scheme, TrajectoryLog};
use crate::error::{Error, Result};
use crate::exec::{map_slice, Execution};
use crate::metrics::{
    bound_corollary1, bound_theorem2, bound_theorem3, clipped_fit_norm, fit, online_cost, regret,
    saturated_fit, slack, RegretReport,
};
use crate::offline::{check_viability, solve_offline, OfflineOptions, OfflineSolution, TimeGrid, Viability};
use crate::shepherd::{GenerateOptions, Objective, ShepherdEnvironment, ShepherdParams, ShepherdScenario};

mod csv_io;
mod report;
mod svg;

pub use csv_io::{csv_bytes, read_csv, write_csv, CsvTrajectory};
pub use report::{report, Report, ReportRow};

pub const CONFIG_VERSION: u32 = 1;
pub const METRICS_VERSION: u32 = 1;

/// Lower tolerance on logged multipliers.
pub const MULTIPLIER_FLOOR: f64 = -1e-12;
/// Tolerance on the saturation floor of logged constraint values.
pub const SATURATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioSource {
    /// Generate from these parameters and the config seed.
    Params(ShepherdParams),
    /// Load a generated scenario file.
    File(PathBuf),
    /// Generate from default parameters and this seed.
    Seed(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub scenario: ScenarioSource,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub scheme: Scheme,
    pub epsilon: f64,
    pub step: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub objective: Objective,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Horizons to run; empty means `[horizon]`.
    #[serde(default)]
    pub sweep: Vec<f64>,
    #[serde(default = "default_stride")]
    pub sample_stride: usize,
}

fn default_seed() -> u64 {
    1
}

fn default_horizon() -> f64 {
    1.0
}

fn default_stride() -> usize {
    10
}

impl ExperimentConfig {
    pub fn new(scenario: ScenarioSource, mode: Mode, epsilon: f64, step: f64, horizon: f64) -> Self {
        Self {
            version: CONFIG_VERSION,
            scenario,
            seed: default_seed(),
            mode,
            scheme: Scheme::default(),
            epsilon,
            step,
            horizon,
            delta: None,
            objective: Objective::None,
            out: None,
            sweep: Vec::new(),
            sample_stride: default_stride(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn horizons(&self) -> Vec<f64> {
        if self.sweep.is_empty() {
            vec![self.horizon]
        } else {
            self.sweep.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Parse(format!(
                "unsupported config version {}",
                self.version
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if let Some(d) = self.delta {
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::InvalidParameter(format!("delta must be positive, got {d}")));
            }
        }
        if self.objective != Objective::None && !self.mode.uses_objective() {
            return Err(Error::InvalidParameter(format!(
                "mode {:?} ignores the objective",
                self.mode
            )));
        }
        if self.objective == Objective::None && self.mode == Mode::GradientOnly {
            return Err(Error::InvalidParameter(
                "gradient mode needs an objective".into(),
            ));
        }
        for t in self.horizons() {
            self.controller().validate(t)?;
            TimeGrid::new(t, self.step)?;
        }
        match &self.scenario {
            ScenarioSource::File(p) => {
                if !p.is_file() {
                    return Err(Error::InvalidParameter(format!(
                        "scenario file {} does not exist",
                        p.display()
                    )));
                }
            }
            ScenarioSource::Params(p) => p.validate()?,
            ScenarioSource::Seed(_) => {}
        }
        Ok(())
    }

    pub fn controller(&self) -> ControllerConfig {
        ControllerConfig::new(self.mode, self.epsilon, self.step)
            .with_scheme(self.scheme)
            .with_stride(self.sample_stride)
    }

    pub fn spec(&self, horizon: f64) -> RunSpec {
        RunSpec {
            controller: self.controller(),
            horizon,
            delta: self.delta,
            objective: self.objective,
        }
    }

    /// Scenario for one horizon of the sweep. File scenarios keep their own
    /// horizon, which must match.
    pub fn scenario_for(&self, horizon: f64) -> Result<ShepherdScenario> {
        let (params, seed) = match &self.scenario {
            ScenarioSource::File(p) => {
                let sc = ShepherdScenario::from_json(&fs::read_to_string(p)?)?;
                if (sc.horizon() - horizon).abs() > 1e-12 * horizon {
                    return Err(Error::InvalidParameter(format!(
                        "scenario {} has horizon {}, run asks for {horizon}",
                        p.display(),
                        sc.horizon()
                    )));
                }
                return Ok(sc);
            }
            ScenarioSource::Params(p) => (p.clone(), self.seed),
            ScenarioSource::Seed(s) => (ShepherdParams::default(), *s),
        };
        let params = ShepherdParams { horizon, ..params };
        ShepherdScenario::generate(
            &params,
            seed,
            &GenerateOptions {
                grid_step: self.step,
                ..GenerateOptions::default()
            },
        )
    }
}

/// Everything that defines one simulation besides the scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub controller: ControllerConfig,
    pub horizon: f64,
    pub delta: Option<f64>,
    pub objective: Objective,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value <= limit,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            limit,
            pass: value >= limit,
        }
    }
}

/// Contents of `metrics.json`. With the CSV it holds everything needed to
/// recompute each check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunMetrics {
    pub version: u32,
    pub seed: u64,
    pub draws: usize,
    pub horizon: f64,
    pub step: f64,
    pub epsilon: f64,
    pub mode: Mode,
    pub scheme: Scheme,
    pub objective: Objective,
    pub delta: Option<f64>,
    pub lipschitz_estimate: f64,
    pub fit: Vec<f64>,
    /// `max_t F_i(t)` over logged samples.
    pub max_fit: Vec<f64>,
    pub saturated_fit: Option<Vec<f64>>,
    pub clipped_fit_norm: f64,
    pub online_cost: f64,
    /// Per-component fit bound with its slack, feasibility mode only.
    pub fit_bounds: Option<Vec<f64>>,
    pub fit_slack: Option<Vec<f64>>,
    pub viability_residual: Option<f64>,
    pub lambda_max: Vec<f64>,
    pub lambda_min: f64,
    /// `4R² + 1`.
    pub multiplier_bound: f64,
    /// Whether `max λ ≤ ½(4R² + 1)` held too.
    pub half_multiplier_bound_held: bool,
    pub regret: Option<RegretReport>,
    pub regret_slack: Option<f64>,
    #[serde(rename = "K")]
    pub k: Option<f64>,
    pub offline_converged: Option<bool>,
    pub checks: Vec<Check>,
}

impl RunMetrics {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub scenario: Arc<ShepherdScenario>,
    pub log: TrajectoryLog,
    pub offline: Option<OfflineSolution>,
    pub metrics: RunMetrics,
}

/// Certificate for `grid`, re-checking when the scenario was certified on
/// another step.
pub fn certificate_on(scenario: &Arc<ShepherdScenario>, grid: &TimeGrid) -> Result<Viability> {
    if let Some(c) = &scenario.certificate {
        if (c.grid_step - grid.step()).abs() <= 1e-12 * grid.step() {
            return Ok(Viability {
                viable: c.residual <= crate::offline::VIABLE_TOL,
                xdagger: c.xdagger.clone(),
                residual: c.residual,
                iterations: 0,
                sweeps: 0,
            });
        }
    }
    let env = ShepherdEnvironment::new(scenario.clone(), Objective::None).with_grid(grid)?;
    let opts = crate::offline::ViabilityOptions {
        init: Some(match &scenario.certificate {
            Some(c) => c.xdagger.clone(),
            None => scenario.herd_center_action(),
        }),
        ..Default::default()
    };
    check_viability(&env, grid, &scenario.action_set(), &opts)
}

/// Simulates one run from `x(0) = 0`, `λ(0) = 0` and evaluates every check
/// that applies to its mode.
pub fn run(scenario: Arc<ShepherdScenario>, spec: &RunSpec, exec: Execution) -> Result<RunOutcome> {
    let cfg = spec.controller;
    let horizon = spec.horizon;
    if (scenario.horizon() - horizon).abs() > 1e-12 * horizon {
        return Err(Error::InvalidParameter(format!(
            "scenario horizon {} differs from run horizon {horizon}",
            scenario.horizon()
        )));
    }
    let grid = TimeGrid::new(horizon, cfg.step)?;
    let objective = if cfg.mode.uses_objective() {
        spec.objective
    } else {
        Objective::None
    };
    let env = ShepherdEnvironment::new(scenario.clone(), objective).with_grid(&grid)?;
    let set = scenario.action_set();
    let n = scenario.action_dim();
    let m = scenario.sheep_count();
    let x0 = vec![0.0; n];
    let lambda0 = vec![0.0; m];
    let mut log = simulate(&env, &cfg, &x0, &lambda0, horizon, &set)?;
    log.seed = Some(scenario.seed);

    let lhat = log.lipschitz_estimate;
    let f = fit(&log)?;
    let max_fit: Vec<f64> = (0..m)
        .map(|i| log.fit_accum.iter().map(|a| a[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let sat = spec.delta.map(|d| saturated_fit(&log, d)).transpose()?;
    let r = set.norm_bound().unwrap_or(f64::INFINITY);
    let multiplier_bound = bound_corollary1(r)?;
    let lambda_min = log
        .lambda
        .iter()
        .flatten()
        .fold(f64::INFINITY, |a, &b| a.min(b));
    let lambda_top = log.lambda_max.iter().fold(0.0_f64, |a, &b| a.max(b));

    let mut checks = Vec::new();
    let mut fit_bounds = None;
    let mut fit_slack = None;
    let mut viability_residual = None;
    if cfg.mode == Mode::FeasibilityOnly {
        let cert = certificate_on(&scenario, &grid)?;
        if !cert.viable {
            return Err(Error::Infeasible {
                residual: cert.residual,
            });
        }
        viability_residual = Some(cert.residual);
        let bounds = (0..m)
            .map(|i| bound_theorem2(cfg.epsilon, &x0, &lambda0, &cert.xdagger, cert.residual, i))
            .collect::<Result<Vec<_>>>()?;
        let slacks: Vec<f64> = bounds.iter().map(|b| slack(*b, cfg.step, horizon, lhat)).collect();
        for i in 0..m {
            checks.push(Check::at_most(
                format!("fit_{} <= bound + slack", i + 1),
                max_fit[i],
                bounds[i] + slacks[i],
            ));
            if let Some(s) = &sat {
                checks.push(Check::at_most(
                    format!("saturated fit_{} <= bound + slack", i + 1),
                    s[i],
                    bounds[i] + slacks[i],
                ));
            }
        }
        fit_bounds = Some(bounds);
        fit_slack = Some(slacks);
    }
    if let Some(d) = spec.delta {
        let floor = log
            .f
            .iter()
            .flatten()
            .map(|v| v.max(-d))
            .fold(f64::INFINITY, f64::min);
        checks.push(Check::at_least("saturated values >= -delta", floor, -d - SATURATION_TOL));
    }
    if cfg.mode.uses_multipliers() {
        checks.push(Check::at_least("multipliers >= 0", lambda_min, MULTIPLIER_FLOOR));
        checks.push(Check::at_most("multipliers <= 4R^2+1", lambda_top, multiplier_bound));
    }

    let mut offline = None;
    let mut regret_report = None;
    let mut regret_slack = None;
    if cfg.mode == Mode::SaddlePoint && objective != Objective::None {
        let cert = certificate_on(&scenario, &grid)?;
        if !cert.viable {
            return Err(Error::Infeasible {
                residual: cert.residual,
            });
        }
        let opts = OfflineOptions {
            certificate: Some(cert),
            execution: exec,
            ..OfflineOptions::default()
        };
        let sol = solve_offline(&env, &grid, &set, &opts)?;
        let rep = regret(&log, &sol)?;
        let bound = bound_theorem3(cfg.epsilon, &x0, &lambda0, &sol.xstar)?;
        let s = slack(bound, cfg.step, horizon, lhat);
        checks.push(Check::at_most("regret <= bound + slack", rep.regret, bound + s));
        checks.push(Check::at_least("regret >= -KT - slack", rep.regret, rep.floor - s));
        regret_slack = Some(s);
        regret_report = Some(rep);
        offline = Some(sol);
    }

    let metrics = RunMetrics {
        version: METRICS_VERSION,
        seed: scenario.seed,
        draws: scenario.draws,
        horizon,
        step: cfg.step,
        epsilon: cfg.epsilon,
        mode: cfg.mode,
        scheme: cfg.scheme,
        objective,
        delta: spec.delta,
        lipschitz_estimate: lhat,
        clipped_fit_norm: clipped_fit_norm(&f),
        fit: f,
        max_fit,
        saturated_fit: sat,
        online_cost: online_cost(&log)?,
        fit_bounds,
        fit_slack,
        viability_residual,
        lambda_max: log.lambda_max.clone(),
        lambda_min,
        multiplier_bound,
        half_multiplier_bound_held: lambda_top <= 0.5 * multiplier_bound,
        regret: regret_report,
        regret_slack,
        k: offline.as_ref().map(|o| o.K),
        offline_converged: offline.as_ref().map(|o| o.diagnostics.converged),
        checks,
    };
    Ok(RunOutcome {
        scenario,
        log,
        offline,
        metrics,
    })
}

/// Directory name of the run for horizon `t`.
pub fn run_dir_name(t: f64) -> String {
    format!("run_T{t}")
}

/// Writes `scenario.json`, `trajectory.csv`, `metrics.json` and, when
/// present, `offline.json` into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scenario.json"), outcome.scenario.to_json()?)?;
    write_csv(&dir.join("trajectory.csv"), &outcome.log)?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&outcome.metrics)?,
    )?;
    if let Some(o) = &outcome.offline {
        fs::write(dir.join("offline.json"), serde_json::to_string_pretty(o)?)?;
    }
    Ok(())
}

/// Generates, simulates and (when `out` is set) writes every horizon of the
/// sweep. Horizons run concurrently under `Execution::Parallel`.
pub fn run_experiment(cfg: &ExperimentConfig, exec: Execution) -> Result<Vec<RunOutcome>> {
    cfg.validate()?;
    let horizons = cfg.horizons();
    let results = map_slice(exec, &horizons, |&t| -> Result<RunOutcome> {
        let sc = Arc::new(cfg.scenario_for(t)?);
        let outcome = run(sc, &cfg.spec(t), Execution::Sequential)?;
        if let Some(out) = &cfg.out {
            write_run(&out.join(run_dir_name(t)), &outcome)?;
        }
        Ok(outcome)
    });
    results.into_iter().collect()
}

/// Generates one scenario and writes it to `path`.
pub fn generate_to(params: &ShepherdParams, seed: u64, step: f64, path: &Path) -> Result<ShepherdScenario> {
    let sc = ShepherdScenario::generate(
        params,
        seed,
        &GenerateOptions {
            grid_step: step,
            ..GenerateOptions::default()
        },
    )?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, sc.to_json()?)?;
    Ok(sc)
}

/// Solves the clairvoyant problem for a scenario on grid step `step`.
pub fn offline_for(
    scenario: Arc<ShepherdScenario>,
    objective: Objective,
    step: f64,
    exec: Execution,
) -> Result<OfflineSolution> {
    let grid = TimeGrid::new(scenario.horizon(), step)?;
    let cert = certificate_on(&scenario, &grid)?;
    if !cert.viable {
        return Err(Error::Infeasible {
            residual: cert.residual,
        });
    }
    let env = ShepherdEnvironment::new(scenario.clone(), objective).with_grid(&grid)?;
    solve_offline(
        &env,
        &grid,
        &scenario.action_set(),
        &OfflineOptions {
            certificate: Some(cert),
            execution: exec,
            ..OfflineOptions::default()
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(mode: Mode, objective: Objective, out: Option<PathBuf>) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(ScenarioSource::Seed(1), mode, 50.0, 1e-3, 1.0);
        cfg.objective = objective;
        cfg.out = out;
        cfg
    }

    #[test]
    fn config_json() {
        let cfg = quick(Mode::FeasibilityOnly, Objective::None, None);
        let s = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&s).unwrap(), cfg);
        let extra = s.replacen('{', r#"{"bogus": 1, "#, 1);
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let v2 = s.replace(r#""version":1"#, r#""version":2"#);
        assert!(ExperimentConfig::from_json(&v2).is_err());
        let minimal = r#"{"version": 1, "scenario": {"seed": 3}, "epsilon": 5, "step": 0.001, "horizon": 1}"#;
        let cfg = ExperimentConfig::from_json(minimal).unwrap();
        assert_eq!(cfg.mode, Mode::SaddlePoint);
        assert_eq!(cfg.horizons(), vec![1.0]);
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = quick(Mode::FeasibilityOnly, Objective::None, None);
        cfg.epsilon = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = quick(Mode::FeasibilityOnly, Objective::None, None);
        cfg.step = 0.3;
        assert!(cfg.validate().is_err());
        let mut cfg = quick(Mode::FeasibilityOnly, Objective::None, None);
        cfg.scenario = ScenarioSource::File("/nonexistent/scenario.json".into());
        assert!(cfg.validate().is_err());
        assert!(quick(Mode::FeasibilityOnly, Objective::BlackSheep, None).validate().is_err());
        assert!(quick(Mode::GradientOnly, Objective::None, None).validate().is_err());
    }

    #[test]
    fn feasibility_run_writes_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(Mode::FeasibilityOnly, Objective::None, Some(dir.path().to_path_buf()));
        cfg.sweep = vec![0.5, 1.0];
        cfg.delta = Some(0.1);
        let out = run_experiment(&cfg, Execution::default()).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert!(o.metrics.passed(), "{:?}", o.metrics.checks);
        }
        let rep = report(dir.path()).unwrap();
        assert!(rep.passed());
        for f in report::PLOT_FILES {
            assert!(dir.path().join(f).is_file());
        }
        assert_eq!(rep.fit_trend.len(), 2);
        assert!(rep.missing.iter().any(|m| m.starts_with("regret")));
        // stored and recomputed checks agree
        let stored: usize = out.iter().map(|o| o.metrics.checks.len()).sum();
        assert_eq!(stored, rep.rows.len());
    }

    #[test]
    fn identical_seeds_give_identical_csv() {
        let cfg = quick(Mode::FeasibilityOnly, Objective::None, None);
        let a = run_experiment(&cfg, Execution::Sequential).unwrap();
        let b = run_experiment(&cfg, Execution::default()).unwrap();
        assert_eq!(csv_bytes(&a[0].log).unwrap(), csv_bytes(&b[0].log).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let cfg = quick(Mode::SaddlePoint, Objective::BlackSheep, None);
        let o = &run_experiment(&cfg, Execution::default()).unwrap()[0];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        write_csv(&p, &o.log).unwrap();
        let c = read_csv(&p).unwrap();
        assert_eq!(c.t, o.log.times);
        assert_eq!(c.x, o.log.x);
        assert_eq!(c.fit, o.log.fit_accum);
        assert_eq!(c.cost_accum, o.log.cost_accum);
        assert!(o.metrics.regret.is_some());
    }

    #[test]
    fn empty_dir_has_no_results() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(report(dir.path()), Err(Error::NoResults(_))));
    }
}
