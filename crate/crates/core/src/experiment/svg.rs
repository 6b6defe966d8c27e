//! Minimal self-contained SVG line plots on a fixed 960×600 viewBox.

use std::fmt::Write;

const W: f64 = 960.0;
const H: f64 = 600.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 50.0;
const BOTTOM: f64 = 70.0;
const MAX_POINTS: usize = 2000;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub markers: bool,
    pub dashed: bool,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            label: label.into(),
            points,
            markers: false,
            dashed: false,
        }
    }

    pub fn markers(mut self) -> Self {
        self.markers = true;
        self
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct Plot {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    pub series: Vec<Series>,
    /// Shown in place of the data area when there is nothing to draw.
    pub note: Option<String>,
}

/// Tick positions covering `[lo, hi]` with a power-of-ten spacing.
pub fn decade_ticks(lo: f64, hi: f64) -> (f64, f64, Vec<f64>) {
    let (mut lo, mut hi) = (lo, hi);
    if !(hi > lo) {
        let pad = if lo == 0.0 { 1.0 } else { 0.1 * lo.abs() };
        lo -= pad;
        hi += pad;
    }
    let mut step = 10f64.powf((hi - lo).log10().floor());
    if (hi - lo) / step < 2.0 {
        step /= 10.0;
    }
    let a = (lo / step).floor();
    let b = (hi / step).ceil();
    let ticks = (a as i64..=b as i64).map(|k| k as f64 * step).collect();
    (a * step, b * step, ticks)
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if (1e-3..1e5).contains(&a) {
        let s = format!("{v:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn decimate(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    if points.len() <= MAX_POINTS {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(MAX_POINTS);
    let mut out: Vec<_> = points.iter().step_by(stride).copied().collect();
    if let Some(last) = points.last() {
        if out.last() != Some(last) {
            out.push(*last);
        }
    }
    out
}

pub fn render(plot: &Plot) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {W} {H}" width="{W}" height="{H}" font-family="sans-serif" font-size="13">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="28" text-anchor="middle" font-size="17">{}</text>"#,
        W / 2.0,
        esc(&plot.title)
    );
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let finite: Vec<(f64, f64)> = plot
        .series
        .iter()
        .flat_map(|se| se.points.iter().copied())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    if finite.is_empty() {
        let note = plot.note.clone().unwrap_or_else(|| "no data".into());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" fill="gray">{}</text>"#,
            W / 2.0,
            H / 2.0,
            esc(&note)
        );
        s.push_str("</svg>\n");
        return s;
    }
    let fold = |f: fn(&(f64, f64)) -> f64| {
        finite
            .iter()
            .map(f)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)))
    };
    let (x0, x1) = fold(|p| p.0);
    let (y0, y1) = fold(|p| p.1);
    let (xl, xh, xt) = decade_ticks(x0, x1);
    let (yl, yh, yt) = decade_ticks(y0, y1);
    let sx = |x: f64| LEFT + (x - xl) / (xh - xl) * pw;
    let sy = |y: f64| TOP + ph - (y - yl) / (yh - yl) * ph;

    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in &xt {
        let x = sx(*t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
            TOP + ph,
            TOP + ph + 18.0,
            label(*t)
        );
    }
    for t in &yt {
        let y = sy(*t);
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            label(*t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 20.0,
        esc(&plot.xlabel)
    );
    let _ = writeln!(
        s,
        r#"<text x="22" y="{:.2}" text-anchor="middle" transform="rotate(-90 22 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        esc(&plot.ylabel)
    );

    for (k, se) in plot.series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts = decimate(&se.points);
        let dash = if se.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        if pts.len() > 1 {
            let mut path = String::new();
            for (x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                let _ = write!(path, "{:.2},{:.2} ", sx(*x), sy(*y));
            }
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>"#,
                path.trim_end()
            );
        }
        if se.markers || pts.len() == 1 {
            for (x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                let _ = writeln!(
                    s,
                    r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                    sx(*x),
                    sy(*y)
                );
            }
        }
        let ly = TOP + 10.0 + 20.0 * k as f64;
        let lx = LEFT + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            ly + 4.0,
            esc(&se.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ticks_are_decades() {
        let (lo, hi, t) = decade_ticks(0.13, 0.87);
        assert!(lo <= 0.13 && hi >= 0.87);
        let step = t[1] - t[0];
        assert!((step.log10() - step.log10().round()).abs() < 1e-9);
        let (_, _, t) = decade_ticks(-3.0, 250.0);
        assert!(((t[1] - t[0]) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn degenerate_range() {
        let (lo, hi, t) = decade_ticks(2.0, 2.0);
        assert!(lo < 2.0 && hi > 2.0 && t.len() >= 2);
    }

    #[test]
    fn empty_plot_shows_note() {
        let p = Plot {
            title: "x".into(),
            note: Some("no regret data".into()),
            ..Default::default()
        };
        let s = render(&p);
        assert!(s.contains("viewBox=\"0 0 960 600\"") && s.contains("no regret data"));
    }
}
