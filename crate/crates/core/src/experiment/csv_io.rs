//! Trajectory CSV: `t, x_0.., lambda_0.., f_0val, f_1.., fit_1.., cost_accum`.

use std::fs;
use std::path::Path;

use crate::dynamics::TrajectoryLog;
use crate::error::{Error, Result};

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

fn header(n: usize, m: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..n).map(|j| format!("x_{j}")));
    h.extend((0..m).map(|i| format!("lambda_{i}")));
    h.push("f_0val".into());
    h.extend((1..=m).map(|i| format!("f_{i}")));
    h.extend((1..=m).map(|i| format!("fit_{i}")));
    h.push("cost_accum".into());
    h
}

pub fn csv_bytes(log: &TrajectoryLog) -> Result<Vec<u8>> {
    if log.is_empty() {
        return Err(Error::EmptyLog);
    }
    let n = log.x[0].len();
    let m = log.constraint_count();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(n, m))?;
    let mut row = Vec::with_capacity(2 + n + 3 * m + 1);
    for k in 0..log.len() {
        row.clear();
        row.push(fmt_f64(log.times[k]));
        row.extend(log.x[k].iter().map(|v| fmt_f64(*v)));
        row.extend(log.lambda[k].iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(log.f0[k]));
        row.extend(log.f[k].iter().map(|v| fmt_f64(*v)));
        row.extend(log.fit_accum[k].iter().map(|v| fmt_f64(*v)));
        row.push(fmt_f64(log.cost_accum[k]));
        w.write_record(&row)?;
    }
    w.into_inner()
        .map_err(|e| Error::Io(e.into_error()))
}

pub fn write_csv(path: &Path, log: &TrajectoryLog) -> Result<()> {
    fs::write(path, csv_bytes(log)?)?;
    Ok(())
}

/// Columns of a trajectory CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTrajectory {
    pub t: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub f0: Vec<f64>,
    pub f: Vec<Vec<f64>>,
    pub fit: Vec<Vec<f64>>,
    pub cost_accum: Vec<f64>,
}

impl CsvTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn constraint_count(&self) -> usize {
        self.f.first().map_or(0, Vec::len)
    }
}

pub fn read_csv(path: &Path) -> Result<CsvTrajectory> {
    let mut r = csv::Reader::from_path(path)?;
    let head: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let count = |prefix: &str| head.iter().filter(|h| h.starts_with(prefix)).count();
    let n = count("x_");
    let m = count("lambda_");
    if head != header(n, m) {
        return Err(Error::Parse(format!(
            "{}: unexpected trajectory header",
            path.display()
        )));
    }
    let mut out = CsvTrajectory {
        t: Vec::new(),
        x: Vec::new(),
        lambda: Vec::new(),
        f0: Vec::new(),
        f: Vec::new(),
        fit: Vec::new(),
        cost_accum: Vec::new(),
    };
    for rec in r.records() {
        let rec = rec?;
        let v = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse(format!("{}: bad number {s:?}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        if v.len() != head.len() {
            return Err(Error::Parse(format!("{}: ragged row", path.display())));
        }
        let mut it = v.into_iter();
        out.t.push(it.next().unwrap_or(f64::NAN));
        out.x.push(it.by_ref().take(n).collect());
        out.lambda.push(it.by_ref().take(m).collect());
        out.f0.push(it.next().unwrap_or(f64::NAN));
        out.f.push(it.by_ref().take(m).collect());
        out.fit.push(it.by_ref().take(m).collect());
        out.cost_accum.push(it.next().unwrap_or(f64::NAN));
    }
    if out.is_empty() {
        return Err(Error::EmptyLog);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shortest_round_trip() {
        for v in [0.0, 1.0, -2.5, 0.1, 1e-7, 3.0e20, f64::MIN_POSITIVE, 1.0 / 3.0, -1e-300] {
            let s = fmt_f64(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
        assert_eq!(fmt_f64(0.1), "0.1");
        assert_eq!(fmt_f64(1e-7), "1e-7");
    }

    #[test]
    fn header_layout() {
        assert_eq!(
            header(2, 1),
            ["t", "x_0", "x_1", "lambda_0", "f_0val", "f_1", "fit_1", "cost_accum"]
        );
    }
}
