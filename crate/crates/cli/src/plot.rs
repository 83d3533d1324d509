//! Static SVG charts drawn from a run's `metrics.csv`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use coworld::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Rows of `metrics.csv` keyed by header.
pub struct MetricsTable {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers()?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { headers, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    fn index(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    /// `(step, value)` pairs for rows of `phase` (any phase when `None`)
    /// that have a numeric entry in `column`.
    pub fn series(&self, column: &str, phase: Option<&str>) -> Vec<(f64, f64)> {
        let (Some(c), Some(s)) = (self.index(column), self.index("step")) else {
            return vec![];
        };
        let p = self.index("phase");
        self.rows
            .iter()
            .filter(|r| match (phase, p) {
                (Some(want), Some(p)) => r.get(p).map(String::as_str) == Some(want),
                _ => true,
            })
            .filter_map(|r| {
                let x = r.get(s)?.parse::<f64>().ok()?;
                let y = r.get(c)?.parse::<f64>().ok()?;
                (x.is_finite() && y.is_finite()).then_some((x, y))
            })
            .collect()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str, y: (f64, f64)) {
    let _ = write!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>
<line x1="{MARGIN}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
<text x="{}" y="{}" text-anchor="end">{:.3}</text>
"##,
        WIDTH / 2.0,
        escape(title),
        HEIGHT - MARGIN,
        WIDTH - MARGIN,
        HEIGHT - MARGIN,
        HEIGHT - MARGIN,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label),
        MARGIN - 4.0,
        HEIGHT - MARGIN,
        y.0,
        MARGIN - 4.0,
        MARGIN + 4.0,
        y.1,
    );
}

fn legend(svg: &mut String, labels: &[&str]) {
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/><text x="{}" y="{}">{}</text>"#,
            WIDTH - MARGIN - 120.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            WIDTH - MARGIN - 106.0,
            y,
            escape(label)
        );
    }
}

fn no_data(svg: &mut String) {
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" fill="gray">no data</text>"#,
        WIDTH / 2.0,
        HEIGHT / 2.0
    );
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    frame(&mut svg, title, x_label, y_label, (y0, y1));
    let _ = writeln!(
        svg,
        r#"<text x="{MARGIN}" y="{}" text-anchor="start">{x0}</text><text x="{}" y="{}" text-anchor="end">{x1}</text>"#,
        HEIGHT - MARGIN + 16.0,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 16.0
    );
    if all().next().is_none() {
        no_data(&mut svg);
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &s.points {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, px(x), py(y));
        }
    }
    legend(&mut svg, &series.iter().map(|s| s.label.as_str()).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bars: one group per entry of `groups`, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, groups: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let (lo, hi) = bounds(series.iter().flat_map(|s| s.1.iter().copied()).chain([0.0]));
    let py = |y: f64| HEIGHT - MARGIN - (y - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);
    let mut svg = String::new();
    frame(&mut svg, title, "evaluation", y_label, (lo, hi));
    if groups.is_empty() {
        no_data(&mut svg);
    }
    let slot = (WIDTH - 2.0 * MARGIN) / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let left = MARGIN + slot * g as f64 + slot * 0.1;
        for (i, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(g) else { continue };
            let (top, bottom) = (py(v.max(0.0)), py(v.min(0.0)));
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                left + bar * i as f64,
                bar,
                (bottom - top).max(0.5),
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            left + slot * 0.4,
            HEIGHT - MARGIN + 16.0,
            escape(name)
        );
    }
    legend(&mut svg, &series.iter().map(|s| s.0).collect::<Vec<_>>());
    svg.push_str("</svg>\n");
    svg
}

fn write_svg(dir: &Path, name: &str, svg: String, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
    out.push(path);
    Ok(())
}

/// Writes `returns.svg`, `value_gap.svg`, `alignment.svg` and `losses.svg`.
pub fn render_metrics(metrics: &MetricsTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = vec![];
    let series = |label: &str, column: &str, phase: Option<&str>| Series {
        label: label.to_string(),
        points: metrics.series(column, phase),
    };

    let returns = line_chart(
        "Evaluation return",
        "update",
        "mean return",
        &[series("target agent", "eval_return", Some("eval"))],
    );
    write_svg(out_dir, "returns.svg", returns, &mut written)?;

    let estimated = metrics.series("value_estimated", Some("eval"));
    let actual = metrics.series("value_true", Some("eval"));
    let groups: Vec<String> = estimated.iter().map(|p| format!("{}", p.0)).collect();
    let gap = bar_chart(
        "Value estimate vs. discounted return",
        "value",
        &groups,
        &[
            ("estimated", estimated.iter().map(|p| p.1).collect()),
            ("true", actual.iter().map(|p| p.1).collect()),
        ],
    );
    write_svg(out_dir, "value_gap.svg", gap, &mut written)?;

    let alignment = line_chart(
        "Latent alignment",
        "update",
        "KL",
        &[
            series("domain KL (training)", "domain_kl_loss", Some("target")),
            series("alignment divergence (eval)", "alignment_kl", Some("eval")),
        ],
    );
    write_svg(out_dir, "alignment.svg", alignment, &mut written)?;

    let losses = line_chart(
        "World model loss",
        "update",
        "loss",
        &[
            series("pretrain", "wm_total", Some("pretrain")),
            series("target", "wm_total", Some("target")),
            series("source", "wm_total", Some("source")),
        ],
    );
    write_svg(out_dir, "losses.svg", losses, &mut written)?;
    Ok(written)
}
