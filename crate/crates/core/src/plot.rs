//! Line plots of logged series as standalone SVG files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// A named `(x, y)` series.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;

fn num(v: f64) -> String {
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

/// Render one series. Non-finite points are skipped.
pub fn render_svg(series: &Series, x_label: &str) -> String {
    let pts: Vec<(f64, f64)> = series
        .points
        .iter()
        .copied()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if pts.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        series.name
    );
    let _ = writeln!(
        s,
        "<polyline points=\"{m},{m} {m},{b} {r},{b}\" fill=\"none\" stroke=\"black\"/>",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            num(y + 4.0),
            num(v)
        );
    }
    for (v, x) in [(x0, sx(x0)), (x1, sx(x1))] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            num(x),
            num(H - MARGIN + 16.0),
            num(v)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        W / 2.0,
        H - 12.0
    );
    let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", num(sx(x)), num(sy(y)))).collect();
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
        path.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

/// Series from `losses.csv`: every numeric column except `step`, keyed by header.
pub fn loss_series(csv: &str) -> Vec<Series> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Vec::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    let wanted: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| matches!(**c, "sup" | "ip" | "tkd" | "dkd" | "total" | "lr"))
        .map(|(i, _)| i)
        .collect();
    let mut out: Vec<Series> = wanted
        .iter()
        .map(|&i| Series { name: format!("loss_{}", cols[i]), points: Vec::new() })
        .collect();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let Some(step) = f.first().and_then(|v| v.parse::<f64>().ok()) else {
            continue;
        };
        for (s, &i) in out.iter_mut().zip(&wanted) {
            if let Some(v) = f.get(i).and_then(|v| v.parse::<f64>().ok()) {
                s.points.push((step, v));
            }
        }
    }
    out.retain(|s| !s.points.is_empty());
    out
}

/// Series from `metrics.jsonl`: dice, jaccard, hd95 and asd against step.
pub fn metric_series(jsonl: &str) -> Vec<Series> {
    let keys = ["dice", "jaccard", "hd95", "asd"];
    let mut out: Vec<Series> = keys
        .iter()
        .map(|k| Series { name: format!("metric_{k}"), points: Vec::new() })
        .collect();
    for line in jsonl.lines().filter(|l| !l.trim().is_empty()) {
        let Ok(v) = serde_json::from_str::<serde_json::Value>(line) else {
            continue;
        };
        let Some(step) = v.get("step").and_then(|s| s.as_f64()) else {
            continue;
        };
        for (s, k) in out.iter_mut().zip(keys) {
            if let Some(y) = v.get(k).and_then(|y| y.as_f64()) {
                s.points.push((step, y));
            }
        }
    }
    out.retain(|s| !s.points.is_empty());
    out
}

/// Write one SVG per logged series of the run in `run_dir` into `out_dir`.
/// Returns the written paths; an empty or missing log writes nothing.
pub fn plot_run(run_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let read = |name: &str| fs::read_to_string(run_dir.join(name)).unwrap_or_default();
    let mut series = loss_series(&read("losses.csv"));
    series.extend(metric_series(&read("metrics.jsonl")));
    if series.is_empty() {
        log::warn!("no logged series under {}; nothing to plot", run_dir.display());
        return Ok(Vec::new());
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for s in &series {
        let p = out_dir.join(format!("{}.svg", s.name));
        fs::write(&p, render_svg(s, "step")).map_err(|e| Error::io(&p, e))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_loss_columns() {
        let csv = "step,sup,ip,tkd,dkd,total,lr,rng\n0,1,0.5,0.2,0.1,1.7,0.01,ab\n1,0.9,0.4,0.2,0.1,1.5,0.009,cd\n";
        let s = loss_series(csv);
        assert_eq!(s.len(), 6);
        assert_eq!(s[0].name, "loss_sup");
        assert_eq!(s[0].points, vec![(0.0, 1.0), (1.0, 0.9)]);
    }

    #[test]
    fn render_is_deterministic_and_handles_flat_series() {
        let s = Series { name: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] };
        assert_eq!(render_svg(&s, "step"), render_svg(&s, "step"));
        assert!(render_svg(&s, "step").starts_with("<svg"));
    }
}
