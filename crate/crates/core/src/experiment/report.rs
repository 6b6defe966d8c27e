//! Summary table and plots for a results directory. Every check is
//! recomputed from `trajectory.csv` and the bound data in `metrics.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::csv_io::{read_csv, CsvTrajectory};
use super::svg::{render, Plot, Series};
use super::{RunMetrics, MULTIPLIER_FLOOR, SATURATION_TOL};
use crate::dynamics::Mode;
use crate::error::{Error, Result};
use crate::metrics::slack;
use crate::shepherd::{Objective, ShepherdEnvironment, ShepherdScenario};

pub const PLOT_FILES: [&str; 4] = ["paths.svg", "fit.svg", "regret.svg", "multipliers.svg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub check: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// `(T, max_i F_i(T), max_i F_i(T)/√T)` over the runs, sorted by `T`.
    pub fit_trend: Vec<(f64, f64, f64)>,
    /// Series that could not be drawn, with the reason.
    pub missing: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

struct Run {
    name: String,
    dir: PathBuf,
    metrics: RunMetrics,
    csv: CsvTrajectory,
}

fn load_runs(dir: &Path) -> Result<Vec<Run>> {
    let mut dirs = Vec::new();
    if dir.join("metrics.json").is_file() {
        dirs.push(dir.to_path_buf());
    }
    if dir.is_dir() {
        let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.join("metrics.json").is_file())
            .collect();
        subs.sort();
        dirs.extend(subs);
    } else {
        return Err(Error::NoResults(format!("{} (not a directory)", dir.display())));
    }
    let mut runs = Vec::new();
    for d in dirs {
        let metrics: RunMetrics = serde_json::from_str(&fs::read_to_string(d.join("metrics.json"))?)?;
        let csv = read_csv(&d.join("trajectory.csv"))?;
        let name = d
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| ".".into());
        runs.push(Run {
            name,
            dir: d,
            metrics,
            csv,
        });
    }
    if runs.is_empty() {
        return Err(Error::NoResults(dir.display().to_string()));
    }
    runs.sort_by(|a, b| a.metrics.horizon.total_cmp(&b.metrics.horizon).then(a.name.cmp(&b.name)));
    Ok(runs)
}

fn row(run: &str, check: String, value: f64, limit: f64, at_most: bool) -> ReportRow {
    ReportRow {
        run: run.into(),
        check,
        value,
        limit,
        pass: if at_most { value <= limit } else { value >= limit },
    }
}

fn recompute(run: &Run) -> Vec<ReportRow> {
    let (m, c) = (&run.metrics, &run.csv);
    let mi = c.constraint_count();
    let mut rows = Vec::new();
    let sat = m.delta.map(|d| {
        let mut acc = vec![0.0; mi];
        for k in 1..c.len() {
            let dt = c.t[k] - c.t[k - 1];
            for (i, a) in acc.iter_mut().enumerate() {
                *a += 0.5 * dt * (c.f[k - 1][i].max(-d) + c.f[k][i].max(-d));
            }
        }
        acc
    });
    if let Some(bounds) = &m.fit_bounds {
        for (i, b) in bounds.iter().enumerate() {
            let lim = b + slack(*b, m.step, m.horizon, m.lipschitz_estimate);
            let top = c.fit.iter().map(|f| f[i]).fold(f64::NEG_INFINITY, f64::max);
            rows.push(row(&run.name, format!("fit_{} <= bound + slack", i + 1), top, lim, true));
            if let Some(s) = &sat {
                rows.push(row(&run.name, format!("saturated fit_{} <= bound + slack", i + 1), s[i], lim, true));
            }
        }
    }
    if let Some(d) = m.delta {
        let floor = c.f.iter().flatten().map(|v| v.max(-d)).fold(f64::INFINITY, f64::min);
        rows.push(row(&run.name, "saturated values >= -delta".into(), floor, -d - SATURATION_TOL, false));
    }
    if m.mode.uses_multipliers() {
        let lo = c.lambda.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = c.lambda.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        rows.push(row(&run.name, "multipliers >= 0".into(), lo, MULTIPLIER_FLOOR, false));
        rows.push(row(&run.name, "multipliers <= 4R^2+1".into(), hi, m.multiplier_bound, true));
    }
    if let (Some(r), Some(s)) = (&m.regret, m.regret_slack) {
        let online = c.cost_accum[c.len() - 1] - c.cost_accum[0];
        let regret = online - r.offline_cost;
        rows.push(row(&run.name, "regret <= bound + slack".into(), regret, r.bound + s, true));
        rows.push(row(&run.name, "regret >= -KT - slack".into(), regret, r.floor - s, false));
    }
    rows
}

fn path_plot(run: &Run, missing: &mut Vec<String>) -> Plot {
    let mut plot = Plot {
        title: format!("Paths ({}, T = {})", run.name, run.metrics.horizon),
        xlabel: "z_1".into(),
        ylabel: "z_2".into(),
        ..Default::default()
    };
    let sc = match fs::read_to_string(run.dir.join("scenario.json"))
        .map_err(Error::from)
        .and_then(|s| ShepherdScenario::from_json(&s))
    {
        Ok(sc) => Arc::new(sc),
        Err(e) => {
            missing.push(format!("paths: {}: {e}", run.name));
            plot.note = Some("scenario.json missing".into());
            return plot;
        }
    };
    if sc.action_dim() != run.csv.x[0].len() {
        missing.push(format!("paths: {}: scenario does not match trajectory", run.name));
        plot.note = Some("scenario does not match trajectory".into());
        return plot;
    }
    for i in 0..sc.sheep_count() {
        let pts = run
            .csv
            .t
            .iter()
            .map(|&t| {
                let p = sc.sheep_position(i, t);
                (p[0], p[1])
            })
            .collect();
        plot.series.push(Series::line(format!("sheep {}", i + 1), pts));
    }
    let env = ShepherdEnvironment::new(sc, Objective::None);
    let pts = run
        .csv
        .t
        .iter()
        .zip(&run.csv.x)
        .map(|(&t, x)| {
            let p = env.position(t, x);
            (p[0], p[1])
        })
        .collect();
    plot.series.push(Series::line("shepherd", pts).dashed());
    plot
}

/// Per-component curves for a single run, otherwise the max component per run.
fn component_plot(runs: &[Run], title: &str, ylabel: &str, pick: fn(&CsvTrajectory) -> &Vec<Vec<f64>>, name: &str) -> Plot {
    let mut plot = Plot {
        title: title.into(),
        xlabel: "t".into(),
        ylabel: ylabel.into(),
        ..Default::default()
    };
    if let [run] = runs {
        let data = pick(&run.csv);
        for i in 0..data.first().map_or(0, Vec::len) {
            let pts = run.csv.t.iter().zip(data).map(|(&t, v)| (t, v[i])).collect();
            plot.series.push(Series::line(format!("{name}_{}", i + 1), pts));
        }
    } else {
        for run in runs {
            let pts = run
                .csv
                .t
                .iter()
                .zip(pick(&run.csv))
                .map(|(&t, v)| (t, v.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))))
                .collect();
            plot.series.push(Series::line(format!("max {name}, T = {}", run.metrics.horizon), pts));
        }
    }
    plot
}

fn regret_plot(runs: &[Run], missing: &mut Vec<String>) -> Plot {
    let mut plot = Plot {
        title: "Regret vs horizon".into(),
        xlabel: "T".into(),
        ylabel: "regret".into(),
        ..Default::default()
    };
    let with: Vec<_> = runs.iter().filter(|r| r.metrics.regret.is_some()).collect();
    if with.is_empty() {
        missing.push("regret: no run has an objective with an offline solution".into());
        plot.note = Some("no regret data".into());
        return plot;
    }
    let mut meas = Vec::new();
    let mut top = Vec::new();
    let mut floor = Vec::new();
    for r in with {
        let rep = r.metrics.regret.as_ref().expect("filtered");
        let s = r.metrics.regret_slack.unwrap_or(0.0);
        let online = r.csv.cost_accum[r.csv.len() - 1] - r.csv.cost_accum[0];
        meas.push((r.metrics.horizon, online - rep.offline_cost));
        top.push((r.metrics.horizon, rep.bound + s));
        floor.push((r.metrics.horizon, rep.floor - s));
    }
    plot.series.push(Series::line("regret", meas).markers());
    plot.series.push(Series::line("bound + slack", top).markers().dashed());
    plot.series.push(Series::line("-KT - slack", floor).markers().dashed());
    plot
}

fn table(report: &Report) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<16} {:<34} {:>14} {:>14}  result", "run", "check", "value", "limit");
    for r in &report.rows {
        let _ = writeln!(
            s,
            "{:<16} {:<34} {:>14.6e} {:>14.6e}  {}",
            r.run,
            r.check,
            r.value,
            r.limit,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "\n{:>8} {:>14} {:>14}", "T", "max fit", "max fit/sqrt(T)");
    for (t, f, g) in &report.fit_trend {
        let _ = writeln!(s, "{t:>8} {f:>14.6e} {g:>14.6e}");
    }
    if !report.missing.is_empty() {
        let _ = writeln!(s, "\nmissing series:");
        for m in &report.missing {
            let _ = writeln!(s, "  {m}");
        }
    }
    let _ = writeln!(s, "\noverall: {}", if report.passed() { "PASS" } else { "FAIL" });
    s
}

/// Reads every run under `dir` (or `dir` itself), writes the four plots and
/// `summary.txt` into `dir`.
pub fn report(dir: &Path) -> Result<Report> {
    let runs = load_runs(dir)?;
    let mut rep = Report::default();
    for r in &runs {
        rep.rows.extend(recompute(r));
        let top = r
            .csv
            .fit
            .last()
            .map_or(f64::NAN, |f| f.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)));
        rep.fit_trend.push((r.metrics.horizon, top, top / r.metrics.horizon.sqrt()));
    }
    let plots = [
        path_plot(&runs[0], &mut rep.missing),
        component_plot(&runs, "Fit", "F(t)", |c| &c.fit, "fit"),
        regret_plot(&runs, &mut rep.missing),
        {
            let mut p = component_plot(&runs, "Multipliers", "lambda(t)", |c| &c.lambda, "lambda");
            if runs.iter().all(|r| r.metrics.mode == Mode::GradientOnly) {
                rep.missing.push("multipliers: gradient runs carry none".into());
                p.series.clear();
                p.note = Some("no multipliers".into());
            }
            p
        },
    ];
    for (name, plot) in PLOT_FILES.iter().zip(&plots) {
        let path = dir.join(name);
        fs::write(&path, render(plot))?;
        rep.files.push(path);
    }
    let path = dir.join("summary.txt");
    fs::write(&path, table(&rep))?;
    rep.files.push(path);
    Ok(rep)
}
