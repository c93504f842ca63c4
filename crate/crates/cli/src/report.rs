//! Line charts (SVG) and a summary of final and extreme values for metrics
//! CSVs and mixing-ratio sweeps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dalip_core::mixlaw::{eval_law, fit, FitOptions, MixObservation};
use dalip_core::twintower::{EPOCH_HEADER, STEP_HEADER};
use serde::Serialize;
use serde_json::{json, Value};

use crate::CliError;

pub const MIXING_HEADER: &str = "domain,ratio,accuracy";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RunKind {
    Steps,
    Epochs,
    Mixing,
}

impl RunKind {
    fn key(self) -> &'static str {
        match self {
            RunKind::Steps => "steps",
            RunKind::Epochs => "epochs",
            RunKind::Mixing => "mixing",
        }
    }
}

/// One input CSV. Missing optional values are stored as NaN.
#[derive(Debug, Clone)]
pub struct Run {
    pub path: PathBuf,
    pub kind: RunKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Domain of each row, for mixing sweeps.
    pub domains: Vec<String>,
}

fn parse_error(path: &Path, line: u64, reason: impl Into<String>) -> CliError {
    CliError::Core(dalip_core::Error::Parse {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    })
}

pub fn read_run(path: &Path) -> Result<Run, CliError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_error(path, 0, e.to_string()))?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let header_line = headers.iter().collect::<Vec<_>>().join(",");
    let kind = match header_line.as_str() {
        STEP_HEADER => RunKind::Steps,
        EPOCH_HEADER => RunKind::Epochs,
        MIXING_HEADER => RunKind::Mixing,
        other => {
            return Err(parse_error(
                path,
                1,
                format!("unrecognized header {other:?}; expected one of {STEP_HEADER:?}, {EPOCH_HEADER:?}, {MIXING_HEADER:?}"),
            ))
        }
    };
    let mut run = Run {
        path: path.to_path_buf(),
        kind,
        columns: headers.iter().map(str::to_string).collect(),
        rows: Vec::new(),
        domains: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_error(path, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let mut row = Vec::with_capacity(record.len());
        for (i, field) in record.iter().enumerate() {
            if kind == RunKind::Mixing && i == 0 {
                run.domains.push(field.to_string());
                row.push(f64::NAN);
                continue;
            }
            let optional = kind == RunKind::Epochs && i >= 2;
            let value = if field.is_empty() && optional {
                f64::NAN
            } else {
                field
                    .trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| parse_error(path, line, format!("column {}: not a finite number: {field:?}", run.columns[i])))?
            };
            row.push(value);
        }
        run.rows.push(row);
    }
    Ok(run)
}

/// Distinct legend labels: file stems, widened with the parent directory
/// when two inputs share a stem.
fn labels(runs: &[Run]) -> Vec<String> {
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let with_parent = |p: &Path| match p.parent().and_then(|d| d.file_name()) {
        Some(d) => format!("{}/{}", d.to_string_lossy(), stem(p)),
        None => stem(p),
    };
    let stems: Vec<String> = runs.iter().map(|r| stem(&r.path)).collect();
    let mut out: Vec<String> = runs
        .iter()
        .zip(&stems)
        .map(|(r, s)| if stems.iter().filter(|t| *t == s).count() > 1 { with_parent(&r.path) } else { s.clone() })
        .collect();
    for i in 0..out.len() {
        if out[..i].contains(&out[i]) {
            out[i] = format!("{}#{}", out[i], i + 1);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Debug, Clone)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Extremes {
    #[serde(rename = "final")]
    pub last: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

fn extremes(values: impl Iterator<Item = f64>) -> Extremes {
    let finite: Vec<f64> = values.filter(|v| v.is_finite()).collect();
    Extremes {
        last: finite.last().copied(),
        min: finite.iter().copied().reduce(f64::min),
        max: finite.iter().copied().reduce(f64::max),
    }
}

pub struct Built {
    /// `(file name, svg)` in a fixed order.
    pub charts: Vec<(String, String)>,
    pub summary: Value,
    pub warnings: Vec<String>,
}

/// Charts and summary for `runs`. Metrics CSVs get one chart per column;
/// mixing sweeps get one chart with the fitted law overlaid.
pub fn build(runs: &[Run], opts: &FitOptions, primary: Option<&str>) -> Built {
    let labels = labels(runs);
    let mut charts = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut warnings = Vec::new();
    for kind in [RunKind::Steps, RunKind::Epochs, RunKind::Mixing] {
        let members: Vec<(&Run, &String)> = runs.iter().zip(&labels).filter(|(r, _)| r.kind == kind).collect();
        if members.is_empty() {
            continue;
        }
        let mut section = serde_json::Map::new();
        if kind == RunKind::Mixing {
            let (chart, value) = mixing_chart(&members, opts, primary, &mut warnings);
            charts.push(("mixing_accuracy.svg".to_string(), render_svg(&chart)));
            section = value;
        } else {
            let columns = members[0].0.columns.clone();
            for (c, metric) in columns.iter().enumerate().skip(1) {
                if kind == RunKind::Steps && metric == "epoch" {
                    continue;
                }
                let mut per_run = BTreeMap::new();
                let mut series = Vec::new();
                for (run, label) in &members {
                    let points: Vec<(f64, f64)> = run.rows.iter().map(|r| (r[0], r[c])).filter(|p| p.1.is_finite()).collect();
                    per_run.insert((*label).clone(), extremes(run.rows.iter().map(|r| r[c])));
                    series.push(Series {
                        label: (*label).clone(),
                        points,
                        dashed: false,
                    });
                }
                let chart = Chart {
                    title: format!("{} {}", kind.key(), metric),
                    x_label: columns[0].clone(),
                    y_label: metric.clone(),
                    series,
                };
                charts.push((format!("{}_{}.svg", kind.key(), metric), render_svg(&chart)));
                section.insert(metric.clone(), serde_json::to_value(per_run).expect("serializable"));
            }
        }
        summary.insert(kind.key().to_string(), Value::Object(section));
    }
    Built {
        charts,
        summary: Value::Object(summary),
        warnings,
    }
}

const OVERLAY_POINTS: usize = 101;

fn mixing_chart(
    members: &[(&Run, &String)],
    opts: &FitOptions,
    primary: Option<&str>,
    warnings: &mut Vec<String>,
) -> (Chart, serde_json::Map<String, Value>) {
    let mut series = Vec::new();
    let mut accuracy = BTreeMap::new();
    let mut fits = BTreeMap::new();
    for (run, label) in members {
        let mut domains: Vec<&String> = run.domains.iter().collect();
        domains.sort();
        domains.dedup();
        for d in &domains {
            let mut points: Vec<(f64, f64)> = run
                .rows
                .iter()
                .zip(&run.domains)
                .filter(|(_, rd)| rd == d)
                .map(|(r, _)| (r[1], r[2]))
                .collect();
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let name = format!("{label}:{d}");
            accuracy.insert(name.clone(), extremes(points.iter().map(|p| p.1)));
            series.push(Series {
                label: name,
                points,
                dashed: false,
            });
        }
        let obs: Vec<MixObservation> = run
            .rows
            .iter()
            .zip(&run.domains)
            .map(|(r, d)| MixObservation {
                domain: d.clone(),
                ratio: r[1],
                accuracy: r[2],
            })
            .collect();
        if obs.is_empty() {
            fits.insert((*label).clone(), Value::Null);
            continue;
        }
        match fit(&obs, opts, primary) {
            Ok(fitted) => {
                for d in &fitted.domains {
                    let ratios: Vec<f64> = obs.iter().filter(|o| o.domain == d.domain).map(|o| o.ratio).collect();
                    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let points = (0..OVERLAY_POINTS)
                        .map(|i| {
                            let r = lo + (hi - lo) * i as f64 / (OVERLAY_POINTS - 1) as f64;
                            (r, eval_law(d, r))
                        })
                        .collect();
                    series.push(Series {
                        label: format!("{label}:{} fit", d.domain),
                        points,
                        dashed: true,
                    });
                }
                fits.insert((*label).clone(), serde_json::to_value(&fitted.domains).expect("serializable"));
            }
            Err(e) => {
                warnings.push(format!("{label}: no fitted overlay: {e}"));
                fits.insert((*label).clone(), Value::Null);
            }
        }
    }
    let mut section = serde_json::Map::new();
    section.insert("accuracy".into(), serde_json::to_value(accuracy).expect("serializable"));
    section.insert("fits".into(), json!(fits));
    let chart = Chart {
        title: "accuracy vs mixing ratio".into(),
        x_label: "ratio".into(),
        y_label: "accuracy".into(),
        series,
    };
    (chart, section)
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 55.0;
const TICKS: usize = 5;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn tick_label(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-3..1e4).contains(&a) {
        format!("{v:.2e}")
    } else {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        if s == "-0" { "0".to_string() } else { s.to_string() }
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Deterministic SVG: fixed size, fixed precision, series in input order.
pub fn render_svg(chart: &Chart) -> String {
    let (x0, x1) = range(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(chart.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| TOP + plot_h - (y - y0) / (y1 - y0) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + plot_w / 2.0,
        escape(&chart.title)
    );
    let _ = writeln!(
        s,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{LEFT:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}"/><line x1="{LEFT:.2}" y1="{TOP:.2}" x2="{LEFT:.2}" y2="{:.2}"/></g>"#,
        TOP + plot_h,
        LEFT + plot_w,
        TOP + plot_h,
        TOP + plot_h
    );
    for i in 0..TICKS {
        let t = i as f64 / (TICKS - 1) as f64;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (px, py) = (sx(xv), sy(yv));
        let _ = writeln!(
            s,
            r#"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="black"/><text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + plot_h,
            TOP + plot_h + 5.0,
            TOP + plot_h + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            s,
            r#"<line x1="{:.2}" y1="{py:.2}" x2="{LEFT:.2}" y2="{py:.2}" stroke="black"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 5.0,
            LEFT - 8.0,
            py + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0,
        escape(&chart.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0,
        escape(&chart.y_label)
    );
    for (i, series) in chart.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        if !series.points.is_empty() {
            let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                pts.join(" ")
            );
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + plot_w + 15.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"{dash}/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&series.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn header_only_gives_axes_and_null_summary() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "metrics_epochs.csv", &format!("{EPOCH_HEADER}\n"));
        let built = build(&[read_run(&p).unwrap()], &FitOptions::default(), None);
        assert_eq!(built.charts.len(), 5);
        for (_, svg) in &built.charts {
            assert!(svg.contains(r#"class="axes""#));
            assert!(!svg.contains("<polyline"));
        }
        for metric in built.summary["epochs"].as_object().unwrap().values() {
            let m = &metric["metrics_epochs"];
            assert!(m["final"].is_null() && m["min"].is_null() && m["max"].is_null(), "{m}");
        }
    }

    #[test]
    fn two_runs_share_a_chart_with_two_legend_entries() {
        let dir = tempfile::tempdir().unwrap();
        let body = format!("{EPOCH_HEADER}\n1,2.0,0.1,0.5,0.1,0.1\n2,1.5,0.3,0.7,,\n");
        let a = write(dir.path(), "a/metrics_epochs.csv", &body);
        let b = write(dir.path(), "b/metrics_epochs.csv", &body);
        let runs = [read_run(&a).unwrap(), read_run(&b).unwrap()];
        let built = build(&runs, &FitOptions::default(), None);
        let (_, top1) = built.charts.iter().find(|(n, _)| n == "epochs_top1.svg").unwrap();
        assert_eq!(top1.matches(r#"class="legend""#).count(), 2);
        assert_eq!(top1.matches("<polyline").count(), 2);
        assert!(top1.contains("a/metrics_epochs") && top1.contains("b/metrics_epochs"));
        let first = &built.summary["epochs"]["top1_first"]["a/metrics_epochs"];
        assert_eq!(first["final"], json!(0.1));
        assert_eq!(built.summary["epochs"]["mean_loss"]["b/metrics_epochs"]["min"], json!(1.5));
    }

    #[test]
    fn mixing_sweep_gets_a_fitted_overlay() {
        let dir = tempfile::tempdir().unwrap();
        let mut body = format!("{MIXING_HEADER}\n");
        for i in 0..=10 {
            let r = i as f64 / 10.0;
            let _ = writeln!(body, "general,{r},{}", 49.74 - 19.65 * (-9.46 * r).exp());
            let _ = writeln!(body, "plant,{r},{}", 89.9 - 71.6 * (-0.36 * (1.0 - r)).exp());
        }
        let p = write(dir.path(), "sweep.csv", &body);
        let built = build(&[read_run(&p).unwrap()], &FitOptions::default(), None);
        assert!(built.warnings.is_empty(), "{:?}", built.warnings);
        let (_, svg) = &built.charts[0];
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert_eq!(svg.matches("stroke-dasharray").count(), 4);
        let fits = built.summary["mixing"]["fits"]["sweep"].as_array().unwrap();
        let gamma = fits[0]["gamma"].as_f64().unwrap();
        assert!((gamma + 9.46).abs() < 1e-3, "{gamma}");
    }

    #[test]
    fn malformed_rows_name_their_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.csv", &format!("{STEP_HEADER}\n0,1,0.1,2,1,1,0.07\n1,1,0.1,oops,1,1,0.07\n"));
        match read_run(&p) {
            Err(CliError::Core(dalip_core::Error::Parse { line, .. })) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let p = write(dir.path(), "h.csv", "a,b\n1,2\n");
        assert!(matches!(read_run(&p), Err(CliError::Core(dalip_core::Error::Parse { line: 1, .. }))));
        let p = write(dir.path(), "short.csv", &format!("{STEP_HEADER}\n0,1,0.1\n"));
        assert!(matches!(read_run(&p), Err(CliError::Core(dalip_core::Error::Parse { line: 2, .. }))));
    }

    #[test]
    fn rendering_is_stable() {
        let chart = Chart {
            title: "t".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series {
                label: "<s>".into(),
                points: vec![(0.0, 1.0), (1.0, 3.0)],
                dashed: false,
            }],
        };
        let a = render_svg(&chart);
        assert_eq!(a, render_svg(&chart));
        assert!(a.contains("&lt;s&gt;"));
        assert!(a.contains(&format!("{LEFT:.2},{:.2}", HEIGHT - BOTTOM)));
    }

    #[test]
    fn tick_labels_are_compact() {
        assert_eq!(tick_label(0.5), "0.5");
        assert_eq!(tick_label(2.0), "2");
        assert_eq!(tick_label(0.0), "0");
        assert_eq!(tick_label(3e-5), "3.00e-5");
    }
}
