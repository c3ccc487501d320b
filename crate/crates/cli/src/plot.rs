//! Learning-curve aggregation across run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use softgrad::agent::{DirSink, EvalRecord, MetricRecord};

use crate::{usage, RunManifest, MANIFEST};

pub struct Run {
    pub dir: PathBuf,
    pub env: String,
    pub evals: Vec<EvalRecord>,
}

pub fn read_run(dir: &Path) -> anyhow::Result<Run> {
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| usage(format!("{} is not a run directory: {e}", dir.display())))?;
    let manifest: RunManifest =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest_path.display()))?;
    let metrics_path = dir.join(DirSink::METRICS);
    let metrics = fs::read_to_string(&metrics_path).with_context(|| format!("reading {}", metrics_path.display()))?;
    let mut evals = Vec::new();
    for (n, line) in metrics.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: MetricRecord = serde_json::from_str(line)
            .with_context(|| format!("{} line {}", metrics_path.display(), n + 1))?;
        if let MetricRecord::Eval(e) = record {
            evals.push(e);
        }
    }
    Ok(Run {
        dir: dir.to_path_buf(),
        env: manifest.config.env,
        evals,
    })
}

/// One row of the aggregated curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub env_step: usize,
    pub mean_eval_return: f64,
    pub runs: usize,
}

/// Averages eval returns over every run that evaluated at a given step.
pub fn aggregate(runs: &[Run]) -> Vec<CurvePoint> {
    let mut by_step: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for e in &run.evals {
            by_step.entry(e.env_step).or_default().push(e.eval_return_mean);
        }
    }
    by_step
        .into_iter()
        .map(|(env_step, v)| CurvePoint {
            env_step,
            mean_eval_return: v.iter().sum::<f64>() / v.len() as f64,
            runs: v.len(),
        })
        .collect()
}

fn write_csv(path: &Path, curve: &[CurvePoint]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["env_step", "mean_eval_return", "runs"])?;
    for p in curve {
        w.write_record([p.env_step.to_string(), p.mean_eval_return.to_string(), p.runs.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 60.0;

fn polyline(points: &[(f64, f64)], sx: &dyn Fn(f64) -> f64, sy: &dyn Fn(f64) -> f64) -> String {
    points
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn render_svg(env: &str, runs: &[Run], curve: &[CurvePoint]) -> String {
    let xs = curve.iter().map(|p| p.env_step as f64);
    let ys = runs.iter().flat_map(|r| r.evals.iter().map(|e| e.eval_return_mean));
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (mut y0, mut y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if !(y1 > y0) {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let span_x = if x1 > x0 { x1 - x0 } else { 1.0 };
    let sx = move |x: f64| MARGIN + (x - x0) / span_x * (WIDTH - 2.0 * MARGIN);
    let sy = move |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{env}: mean eval return over {} run(s)</text>"#,
        WIDTH / 2.0,
        runs.len()
    );
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (x, y) = (x0 + f * span_x, y0 + f * (y1 - y0));
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{x:.0}</text>"#,
            sx(x),
            bottom + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{y:.1}</text>"#,
            left - 6.0,
            sy(y) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">environment steps</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0
    );
    for run in runs {
        let pts: Vec<(f64, f64)> = run.evals.iter().map(|e| (e.env_step as f64, e.eval_return_mean)).collect();
        let _ = writeln!(
            svg,
            r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-opacity="0.3"/>"##,
            polyline(&pts, &sx, &sy)
        );
    }
    let mean: Vec<(f64, f64)> = curve.iter().map(|p| (p.env_step as f64, p.mean_eval_return)).collect();
    let _ = writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="2.5"/>"##,
        polyline(&mean, &sx, &sy)
    );
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_plot(dirs: &[PathBuf], out: &Path) -> anyhow::Result<()> {
    let runs = dirs.iter().map(|d| read_run(d)).collect::<anyhow::Result<Vec<_>>>()?;
    let env = runs[0].env.clone();
    if let Some(other) = runs.iter().find(|r| r.env != env) {
        return Err(usage(format!(
            "runs mix environments: {} is `{}` but {} is `{}`",
            runs[0].dir.display(),
            env,
            other.dir.display(),
            other.env
        )));
    }
    let curve = aggregate(&runs);
    if curve.is_empty() {
        return Err(usage("no evaluation records in the given runs"));
    }
    let csv_path = out.with_extension("csv");
    let svg_path = out.with_extension("svg");
    write_csv(&csv_path, &curve)?;
    fs::write(&svg_path, render_svg(&env, &runs, &curve)).with_context(|| format!("writing {}", svg_path.display()))?;
    println!(
        "{} points from {} run(s) written to {} and {}",
        curve.len(),
        runs.len(),
        csv_path.display(),
        svg_path.display()
    );
    Ok(())
}
