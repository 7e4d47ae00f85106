//! Report files, result tables and Tippett plot export.

use std::fmt::Write as _;
use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::evaluation::{EvaluationReport, TippettCurves};
use crate::scoring::Strategy;

/// Bumped whenever the report layout changes.
pub const SCHEMA_VERSION: u32 = 1;

/// One cell of the strategy-by-dataset Cllr table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub strategy: Strategy,
    pub cllr: f64,
    /// Cllr rounded to three decimals, as printed.
    pub cllr_text: String,
}

/// Top-level JSON report written by `evaluate` and `run`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub schema_version: u32,
    /// Full configuration that produced the report.
    pub config: serde_json::Value,
    pub table: Vec<TableRow>,
    pub evaluations: Vec<EvaluationReport>,
}

impl ReportFile {
    pub fn new(config: serde_json::Value, dataset: &str, evaluations: Vec<EvaluationReport>) -> Self {
        let table = evaluations
            .iter()
            .map(|e| TableRow {
                dataset: dataset.to_owned(),
                strategy: e.strategy,
                cllr: e.cllr,
                cllr_text: format!("{:.3}", e.cllr),
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            config,
            table,
            evaluations,
        }
    }

    pub fn evaluation(&self, strategy: Strategy) -> Option<&EvaluationReport> {
        self.evaluations.iter().find(|e| e.strategy == strategy)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Plain-text table: one row per strategy, one column per dataset.
    pub fn render_table(&self) -> String {
        let mut datasets: Vec<&str> = Vec::new();
        for row in &self.table {
            if !datasets.contains(&row.dataset.as_str()) {
                datasets.push(&row.dataset);
            }
        }
        let mut strategies: Vec<Strategy> = self.table.iter().map(|r| r.strategy).collect();
        strategies.sort();
        strategies.dedup();
        let width = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(7);
        let mut out = format!("{:<12}", "Strategy");
        for d in &datasets {
            let _ = write!(out, " {d:>width$}");
        }
        out.push('\n');
        for s in strategies {
            let _ = write!(out, "{:<12}", s.display_name());
            for d in &datasets {
                let cell = self
                    .table
                    .iter()
                    .find(|r| r.strategy == s && r.dataset == *d)
                    .map_or("-", |r| r.cllr_text.as_str());
                let _ = write!(out, " {cell:>width$}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_tippett_csv<W: Write>(curves: &TippettCurves, mut out: W) -> io::Result<()> {
    writeln!(out, "log10_lr,p_same_geq,p_different_geq")?;
    for ((x, s), d) in curves.grid.iter().zip(&curves.p_same_geq).zip(&curves.p_different_geq) {
        writeln!(out, "{x},{s},{d}")?;
    }
    out.flush()
}

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 600.0;
const LEFT: f64 = 80.0;
const RIGHT: f64 = 30.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

/// Tippett plot as a standalone SVG document: same-source curve solid,
/// different-source curve dashed.
pub fn tippett_svg(curves: &TippettCurves, title: &str) -> String {
    let (x_min, x_max) = match (curves.grid.first(), curves.grid.last()) {
        (Some(&a), Some(&b)) if b > a => (a, b),
        (Some(&a), _) => (a - 1.0, a + 1.0),
        _ => (-1.0, 1.0),
    };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |p: f64| TOP + (1.0 - p) * plot_h;
    let polyline = |ys: &[f64]| {
        curves
            .grid
            .iter()
            .zip(ys)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="14">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(title)
    );
    // axes
    let _ = writeln!(
        svg,
        r#"<path d="M{LEFT},{TOP} V{:.2} H{:.2}" fill="none" stroke="black"/>"#,
        TOP + plot_h,
        LEFT + plot_w
    );
    for i in 0..=4 {
        let p = i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{y:.2}" x2="{LEFT}" y2="{y:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{p:.2}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py(p) + 5.0,
            y = py(p),
        );
    }
    let (first_tick, last_tick) = (x_min.ceil() as i64, x_max.floor() as i64);
    let stride = ((last_tick - first_tick) / 10).max(1);
    let mut tick = first_tick;
    while tick <= last_tick {
        let x = px(tick as f64);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{tick}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 22.0,
        );
        tick += stride;
    }
    if x_min < 0.0 && x_max > 0.0 {
        let x = px(0.0);
        let _ = writeln!(
            svg,
            r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#999999" stroke-dasharray="2,4"/>"##,
            TOP + plot_h
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">log10 LR</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 20.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">Cumulative proportion</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="{}"/>"##,
        polyline(&curves.p_same_geq)
    );
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#d62728" stroke-width="2" stroke-dasharray="8,5" points="{}"/>"##,
        polyline(&curves.p_different_geq)
    );
    // legend
    let lx = LEFT + plot_w - 190.0;
    let _ = writeln!(
        svg,
        r##"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#1f77b4" stroke-width="2"/><text x="{:.2}" y="{:.2}">same source</text>"##,
        TOP + 20.0,
        lx + 30.0,
        TOP + 20.0,
        lx + 38.0,
        TOP + 25.0
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{lx:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2" stroke-dasharray="8,5"/><text x="{:.2}" y="{:.2}">different source</text>"##,
        TOP + 42.0,
        lx + 30.0,
        TOP + 42.0,
        lx + 38.0,
        TOP + 47.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
