//! Standalone SVG line plots of run logs.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{LabError, Result};
use crate::metrics::{plateau_escape_time, LossStream};
use crate::train::RunLog;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlotMetric {
    TrainLoss,
    Eval,
    NcDist,
}

pub const PLOT_METRICS: [&str; 3] = ["train_loss", "eval", "nc_dist"];

impl std::str::FromStr for PlotMetric {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_loss" => Ok(PlotMetric::TrainLoss),
            "eval" => Ok(PlotMetric::Eval),
            "nc_dist" => Ok(PlotMetric::NcDist),
            other => Err(LabError::usage(format!(
                "unknown metric `{other}`; available: {}",
                PLOT_METRICS.join(", ")
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlotOptions {
    pub log_y: bool,
    pub width: f64,
    pub height: f64,
    /// Series longer than this are thinned by taking every k-th point.
    pub max_points: usize,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self { log_y: false, width: 720.0, height: 440.0, max_points: 2000 }
    }
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 30.0, 50.0); // left, right, top, bottom

fn stream_for(log: &RunLog, task: &str, metric: PlotMetric) -> LossStream {
    match metric {
        PlotMetric::TrainLoss => log.train_stream(task),
        PlotMetric::Eval => log.eval_stream(task),
        PlotMetric::NcDist => log.nc_stream(task),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one series per task. Training loss is drawn solid, evaluation metrics dashed, and
/// each task's plateau escape (from its training loss) as a dotted vertical line.
pub fn render_svg(log: &RunLog, metric: PlotMetric, opts: &PlotOptions) -> String {
    let tasks = log.tasks();
    let series: Vec<(String, LossStream)> = tasks.iter().map(|t| (t.clone(), stream_for(log, t, metric))).collect();
    let tf = |v: f64| if opts.log_y { v.max(1e-12).log10() } else { v };
    let pts = series.iter().flat_map(|(_, s)| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(s, v) in pts {
        if v.is_finite() {
            x0 = x0.min(s as f64);
            x1 = x1.max(s as f64);
            y0 = y0.min(tf(v));
            y1 = y1.max(tf(v));
        }
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let (ml, mr, mt, mb) = MARGIN;
    let (pw, ph) = (opts.width - ml - mr, opts.height - mt - mb);
    let sx = |s: f64| ml + (s - x0) / (x1 - x0) * pw;
    let sy = |v: f64| mt + (1.0 - (tf(v) - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#,
        w = opts.width,
        h = opts.height
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r##"<g stroke="#333" fill="none"><line x1="{ml}" y1="{yb}" x2="{xr}" y2="{yb}"/><line x1="{ml}" y1="{mt}" x2="{ml}" y2="{yb}"/></g>"##,
        yb = mt + ph,
        xr = ml + pw
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xs = x0 + f * (x1 - x0);
        let yt = y0 + f * (y1 - y0);
        let label = if opts.log_y { format!("1e{yt:.1}") } else { format!("{yt:.3}") };
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.0}</text>"#, ml + f * pw, mt + ph + 16.0, xs);
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#, ml - 6.0, mt + (1.0 - f) * ph + 4.0);
    }
    let metric_name = PLOT_METRICS[metric as usize];
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">step</text>"#, ml + pw / 2.0, opts.height - 8.0);
    let _ = writeln!(svg, r#"<text x="{ml}" y="18">{metric_name}</text>"#);

    let dash = if metric == PlotMetric::TrainLoss { "" } else { r#" stroke-dasharray="6 4""# };
    for (i, (task, s)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let stride = s.points.len().div_ceil(opts.max_points.max(1)).max(1);
        let path: Vec<String> = s
            .points
            .iter()
            .step_by(stride)
            .filter(|p| p.1.is_finite())
            .map(|&(st, v)| format!("{:.1},{:.1}", sx(st as f64), sy(v)))
            .collect();
        if !path.is_empty() {
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.2"{dash} points="{}"><title>{}</title></polyline>"#,
                path.join(" "),
                escape(task)
            );
        }
        let train = log.train_stream(task);
        let budget = train.points.last().map_or(0, |p| p.0);
        if let Some(tp) = plateau_escape_time(&train, budget) {
            let x = sx(tp as f64);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{mt}" x2="{x:.1}" y2="{:.1}" stroke="{color}" stroke-dasharray="2 3"><title>{} escape at {tp}</title></line>"#,
                mt + ph,
                escape(task)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            ml + pw - 4.0,
            mt + 14.0 + 14.0 * i as f64,
            escape(task)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn emit_plot(log: &RunLog, metric: PlotMetric, opts: &PlotOptions, out: &Path) -> Result<()> {
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(out, render_svg(log, metric, opts))?;
    Ok(())
}
