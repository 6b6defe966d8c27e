use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use saddle_track::dynamics::Mode;
use saddle_track::exec::Execution;
use saddle_track::experiment::{
    generate_to, offline_for, report, run_experiment, ExperimentConfig, RunOutcome, ScenarioSource,
};
use saddle_track::shepherd::{Objective, ShepherdParams, ShepherdScenario};
use saddle_track::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_NO_RESULTS: u8 = 5;

#[derive(Parser)]
#[command(name = "saddle-track", version, about = "Online constrained tracking with saddle point controllers")]
struct Cli {
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a viable herd scenario and write it as JSON.
    Generate(GenerateArgs),
    /// Simulate a controller, write trajectory CSV and metrics JSON per horizon.
    Simulate(SimulateArgs),
    /// Solve for the best fixed action in hindsight.
    Offline(OfflineArgs),
    /// Summarize a results directory and render plots.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Gradient,
    Feasibility,
    Saddle,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Gradient => Mode::GradientOnly,
            ModeArg::Feasibility => Mode::FeasibilityOnly,
            ModeArg::Saddle => Mode::SaddlePoint,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    None,
    Blacksheep,
    Minaccel,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::None => Objective::None,
            ObjectiveArg::Blacksheep => Objective::BlackSheep,
            ObjectiveArg::Minaccel => Objective::MinAcceleration,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    /// Grid step the viability certificate is computed on.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    /// Scenario parameters as JSON; defaults otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long, default_value = "scenario.json")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Experiment config JSON. Flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario file from `generate`.
    #[arg(long, conflicts_with = "seed")]
    scenario: Option<PathBuf>,
    /// Generate the scenario from default parameters and this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    step: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    /// Saturation level for the saturated fit.
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Comma-separated horizons, e.g. "1,2,4".
    #[arg(long, value_delimiter = ',')]
    sweep: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OfflineArgs {
    #[arg(long, conflicts_with = "seed")]
    scenario: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, value_enum, default_value = "blacksheep")]
    objective: ObjectiveArg,
    #[arg(long, default_value = "offline.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Results directory written by `simulate`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(conflicts_with = "out")]
    dir: Option<PathBuf>,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(e) = err.downcast_ref::<Error>() {
        return match e {
            Error::Divergence { .. } | Error::NonFinite { .. } => EXIT_DIVERGENCE,
            Error::Infeasible { .. } | Error::Inconclusive { .. } => EXIT_INFEASIBLE,
            Error::NoResults(_) => EXIT_NO_RESULTS,
            Error::InvalidParameter(_) | Error::Parse(_) | Error::Json(_) | Error::GridMismatch(_) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
    }
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    EXIT_FAILURE
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn nonempty(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.as_os_str().is_empty() {
        return Err(usage(format!("{what} path is empty")));
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> anyhow::Result<()> {
    nonempty(&a.out, "--out")?;
    let mut params = match &a.params {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ShepherdParams>(&text).map_err(Error::from)?
        }
        None => ShepherdParams::default(),
    };
    params.horizon = a.horizon;
    params.validate()?;
    let sc = generate_to(&params, a.seed, a.step, &a.out)?;
    let residual = sc.certificate.as_ref().map_or(f64::NAN, |c| c.residual);
    println!(
        "wrote {} (seed {}, {} draws, viable, residual {residual:.3e})",
        a.out.display(),
        a.seed,
        sc.draws
    );
    Ok(())
}

fn simulate_config(a: &SimulateArgs) -> anyhow::Result<ExperimentConfig> {
    if let Some(p) = &a.scenario {
        nonempty(p, "--scenario")?;
    }
    let mut cfg = match &a.config {
        Some(p) => {
            nonempty(p, "--config")?;
            ExperimentConfig::load(p)?
        }
        None => ExperimentConfig::new(ScenarioSource::Seed(1), Mode::SaddlePoint, 50.0, 1e-4, 1.0),
    };
    if let Some(p) = &a.scenario {
        cfg.scenario = ScenarioSource::File(p.clone());
    }
    if let Some(s) = a.seed {
        cfg.scenario = ScenarioSource::Seed(s);
        cfg.seed = s;
    }
    if let Some(m) = a.mode {
        cfg.mode = m.into();
    }
    if let Some(e) = a.epsilon {
        cfg.epsilon = e;
    }
    if let Some(h) = a.step {
        cfg.step = h;
    }
    if let Some(t) = a.horizon {
        cfg.horizon = t;
    }
    if let Some(d) = a.delta {
        cfg.delta = Some(d);
    }
    if let Some(o) = a.objective {
        cfg.objective = o.into();
    }
    if let Some(s) = &a.sweep {
        cfg.sweep = s.clone();
    }
    if let Some(o) = &a.out {
        nonempty(o, "--out")?;
        cfg.out = Some(o.clone());
    }
    if let ScenarioSource::File(p) = &cfg.scenario {
        // a file scenario fixes the horizon
        if !p.is_file() {
            return Err(usage(format!("scenario file {} does not exist", p.display())));
        }
        if a.horizon.is_none() && cfg.sweep.is_empty() {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            cfg.horizon = ShepherdScenario::from_json(&text)?.horizon();
        }
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("results"));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_run(o: &RunOutcome) {
    let m = &o.metrics;
    let top = m.max_fit.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let passed = m.checks.iter().filter(|c| c.pass).count();
    print!(
        "T = {}: eps = {}, mode {:?}, max fit {top:.4e}, L-hat {:.3e}",
        m.horizon, m.epsilon, m.mode, m.lipschitz_estimate
    );
    if let Some(r) = &m.regret {
        print!(", regret {:.4e} (bound {:.4e})", r.regret, r.bound);
    }
    println!(
        ", checks {passed}/{} {}",
        m.checks.len(),
        if m.passed() { "PASS" } else { "FAIL" }
    );
}

fn cmd_simulate(a: SimulateArgs, exec: Execution) -> anyhow::Result<()> {
    let cfg = simulate_config(&a)?;
    let out = run_experiment(&cfg, exec)?;
    for o in &out {
        print_run(o);
    }
    if let Some(dir) = &cfg.out {
        println!("results in {}", dir.display());
    }
    Ok(())
}

fn cmd_offline(a: OfflineArgs, exec: Execution) -> anyhow::Result<()> {
    nonempty(&a.out, "--out")?;
    let sc = match &a.scenario {
        Some(p) => {
            nonempty(p, "--scenario")?;
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ShepherdScenario::from_json(&text)?
        }
        None => {
            let params = ShepherdParams {
                horizon: a.horizon,
                ..ShepherdParams::default()
            };
            params.validate()?;
            ExperimentConfig::new(ScenarioSource::Params(params), Mode::SaddlePoint, 1.0, a.step, a.horizon)
                .with_seed(a.seed.unwrap_or(1))
                .scenario_for(a.horizon)?
        }
    };
    let objective: Objective = a.objective.into();
    if objective == Objective::None {
        bail!(usage("offline needs an objective"));
    }
    let sol = offline_for(Arc::new(sc), objective, a.step, exec)?;
    if let Some(parent) = a.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&a.out, serde_json::to_string_pretty(&sol).map_err(Error::from)?)?;
    println!(
        "wrote {}: cost {:.6e}, K {:.4e}, violation {:.2e}, converged {}",
        a.out.display(),
        sol.offline_cost,
        sol.K,
        sol.diagnostics.violation,
        sol.diagnostics.converged
    );
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let dir = a.out.or(a.dir).unwrap_or_else(|| PathBuf::from("results"));
    nonempty(&dir, "results")?;
    let rep = report(&dir)?;
    print!("{}", std::fs::read_to_string(dir.join("summary.txt"))?);
    for f in rep.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Simulate(a) => cmd_simulate(a, exec),
        Command::Offline(a) => cmd_offline(a, exec),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
