use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use copr_core::config::ReportConfig;
use copr_core::metrics::metrics_at;
use copr_core::trainer::CurvePoint;
use copr_core::{RunConfig, ScoreMatrix};
use serde::Serialize;

use crate::fsutil::{check_file, read_csv, resolve_out, write_csv};
use crate::run::{fmt_opt, RunManifest, CURVES_FILE, SCORES_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const SVG_FILE: &str = "curves.svg";

#[derive(Debug, Serialize)]
struct SummaryRow {
    run: String,
    method: String,
    k: usize,
    #[serde(rename = "AA")]
    aa: f64,
    #[serde(rename = "AIA")]
    aia: f64,
    #[serde(rename = "FM")]
    fm: Option<f64>,
    #[serde(rename = "BWT")]
    bwt: Option<f64>,
}

struct LoadedRun {
    manifest: RunManifest,
    scores: ScoreMatrix,
    curves: Vec<CurvePoint>,
}

fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest = RunManifest::load(dir)?;
    if manifest.finished_unix.is_none() {
        bail!("training did not finish");
    }
    let path = dir.join(SCORES_FILE);
    let file = std::fs::File::open(&path).with_context(|| format!("reading {}", path.display()))?;
    let scores = ScoreMatrix::read_csv(file)?;
    if scores.len() != manifest.tasks || !scores.is_complete() {
        bail!(
            "score matrix has {} of {} complete rows",
            scores.len(),
            manifest.tasks
        );
    }
    let curves_path = dir.join(CURVES_FILE);
    let curves = if curves_path.exists() {
        read_csv(&curves_path)?
    } else {
        Vec::new()
    };
    Ok(LoadedRun {
        manifest,
        scores,
        curves,
    })
}

pub fn report(runs: &[PathBuf], config: Option<&Path>, out: &Path, overwrite: bool) -> Result<()> {
    let settings = match config {
        Some(p) => RunConfig::load(p)?.report,
        None => ReportConfig::default(),
    };
    let mut loaded = Vec::new();
    for dir in runs {
        let dir = resolve_out(dir);
        match load_run(&dir) {
            Ok(run) => loaded.push(run),
            Err(e) => eprintln!("warning: skipping {}: {e:#}", dir.display()),
        }
    }
    if loaded.is_empty() {
        bail!("no complete runs to report");
    }

    let out = resolve_out(out);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let summary_path = out.join(SUMMARY_FILE);
    let svg_path = out.join(SVG_FILE);
    check_file(&summary_path, overwrite)?;
    check_file(&svg_path, overwrite)?;

    let mut rows = Vec::with_capacity(loaded.len());
    for run in &loaded {
        let m = metrics_at(&run.scores, run.scores.len())?;
        rows.push(SummaryRow {
            run: run.manifest.run_id.clone(),
            method: run.manifest.method.name().into(),
            k: m.k,
            aa: m.aa,
            aia: m.aia,
            fm: m.fm,
            bwt: m.bwt,
        });
    }
    write_csv(&summary_path, &rows)?;
    println!("{:<32} {:<8} {:>2} {:>7} {:>7} {:>7} {:>7}", "run", "method", "k", "AA", "AIA", "FM", "BWT");
    for r in &rows {
        println!(
            "{:<32} {:<8} {:>2} {:>7.4} {:>7.4} {:>7} {:>7}",
            r.run,
            r.method,
            r.k,
            r.aa,
            r.aia,
            fmt_opt(r.fm),
            fmt_opt(r.bwt)
        );
    }

    if !settings.svg {
        return Ok(());
    }
    let series = curve_series(&loaded);
    if series.is_empty() {
        println!("notice: no learning curves recorded (train.eval_every = 0); {SVG_FILE} omitted");
        if svg_path.exists() {
            std::fs::remove_file(&svg_path)?;
        }
        return Ok(());
    }
    let svg = render_svg(&series, settings.svg_width, settings.svg_height);
    std::fs::write(&svg_path, svg).with_context(|| format!("writing {}", svg_path.display()))?;
    println!("wrote {}", svg_path.display());
    Ok(())
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

/// One series per (run, evaluated task), ordered by step.
fn curve_series(runs: &[LoadedRun]) -> Vec<Series> {
    let mut out = Vec::new();
    for run in runs {
        let tasks = run.curves.iter().map(|c| c.eval_task).max().unwrap_or(0);
        for j in 1..=tasks {
            let mut points: Vec<(f64, f64)> = run
                .curves
                .iter()
                .filter(|c| c.eval_task == j)
                .map(|c| (c.step as f64, c.score))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            if !points.is_empty() {
                out.push(Series {
                    label: format!("{} ({}) task {j}", run.manifest.run_id, run.manifest.method.name()),
                    points,
                });
            }
        }
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Score in [0, 1] against training step, with a legend on the right.
fn render_svg(series: &[Series], width: u32, height: u32) -> String {
    let (w, h) = (f64::from(width), f64::from(height));
    let legend_w = 220.0;
    let (left, right, top, bottom) = (50.0, w - legend_w, 20.0, h - 40.0);
    let x_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let sx = |x: f64| left + (right - left) * x / x_max;
    let sy = |y: f64| bottom - (bottom - top) * y.clamp(0.0, 1.0);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for i in 0..=4 {
        let v = f64::from(i) / 4.0;
        let y = sy(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{left}" y1="{y:.1}" x2="{right}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"##,
            left - 4.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}" stroke="black"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{left}" y="{:.1}">0</text><text x="{right}" y="{:.1}" text-anchor="end">{x_max}</text><text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#,
        bottom + 14.0,
        bottom + 14.0,
        (left + right) / 2.0,
        bottom + 30.0
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = top + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            right + 10.0,
            right + 24.0,
            right + 28.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
