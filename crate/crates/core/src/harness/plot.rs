//! SVG line charts of metric CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Which columns to draw: one SVG per `y` column, one polyline per
/// distinct value of the `group` columns.
#[derive(Clone, Debug, PartialEq)]
pub struct PlotSpec {
    pub x: String,
    pub y: Vec<String>,
    pub group: Vec<String>,
    pub title: Option<String>,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            x: "snr_db".into(),
            y: vec!["ser".into()],
            group: vec!["detector_mode".into(), "decoder_mode".into()],
            title: None,
        }
    }
}

fn list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

impl PlotSpec {
    /// `key = value` lines with keys `x`, `y`, `group` and `title`.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut spec = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parse_err = |reason: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key = value".into()))?;
            let v = v.trim();
            match k.trim() {
                "x" => spec.x = v.to_string(),
                "y" => spec.y = list(v),
                "group" => spec.group = list(v),
                "title" => spec.title = Some(v.to_string()),
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        if spec.y.is_empty() {
            return Err(Error::config("y", "no metric column to plot"));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// One named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Mean of `y` per (group, x), groups in first-appearance order and points
/// sorted by x. Empty `y` cells are skipped.
pub fn series(
    headers: &[String],
    rows: &[Vec<String>],
    spec: &PlotSpec,
    y: &str,
) -> Result<Vec<Series>> {
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config("plot", format!("unknown column `{name}`")))
    };
    let xi = col(&spec.x)?;
    let yi = col(y)?;
    let gi: Vec<usize> = spec.group.iter().map(|g| col(g)).collect::<Result<_>>()?;
    let mut order: Vec<String> = Vec::new();
    let mut sums: BTreeMap<(usize, u64), (f64, f64, usize)> = BTreeMap::new();
    for row in rows {
        let cell = row[yi].trim();
        if cell.is_empty() {
            continue;
        }
        let num = |s: &str, c: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("plot", format!("non-numeric `{s}` in column `{c}`")))
        };
        let xv = num(&row[xi], &spec.x)?;
        let yv = num(cell, y)?;
        let label = gi
            .iter()
            .map(|&g| row[g].as_str())
            .filter(|v| !v.is_empty() && *v != "none")
            .collect::<Vec<_>>()
            .join("/");
        let g = match order.iter().position(|l| *l == label) {
            Some(g) => g,
            None => {
                order.push(label);
                order.len() - 1
            }
        };
        let e = sums.entry((g, xv.to_bits())).or_insert((xv, 0.0, 0));
        e.1 += yv;
        e.2 += 1;
    }
    let mut out: Vec<Series> = order
        .into_iter()
        .map(|label| Series {
            label,
            points: Vec::new(),
        })
        .collect();
    for ((g, _), (xv, s, c)) in sums {
        out[g].points.push((xv, s / c as f64));
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const LOG_FLOOR: f64 = 1e-6;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn is_log_metric(y: &str) -> bool {
    matches!(y, "ser" | "ber")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders one chart. Error-rate columns use a log10 y axis.
pub fn render_svg(series: &[Series], x_label: &str, y_label: &str, title: &str) -> String {
    let log = is_log_metric(y_label);
    let ty = |v: f64| if log { v.max(LOG_FLOOR).log10() } else { v };
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(ty(y));
        y1 = y1.max(ty(y));
    }
    if log {
        y0 = y0.floor();
        y1 = y1.ceil();
    }
    if x1 <= x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 <= y0 {
        y0 -= if log { 1.0 } else { 0.05 };
        y1 += if log { 1.0 } else { 0.05 };
    }
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (ty(y) - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let x = x0 + (x1 - x0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(x),
            TOP + ph + 18.0,
            trim_number(x)
        );
    }
    let y_ticks: Vec<(f64, String)> = if log {
        (y0 as i64..=y1 as i64).map(|e| (e as f64, format!("1e{e}"))).collect()
    } else {
        (0..=4)
            .map(|i| {
                let v = y0 + (y1 - y0) * i as f64 / 4.0;
                (v, trim_number(v))
            })
            .collect()
    };
    for (v, label) in y_ticks {
        let py = TOP + (1.0 - (v - y0) / (y1 - y0)) * ph;
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{label}</text>"#,
            LEFT - 6.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            coords.join(" ")
        );
        let ly = TOP + 16.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn trim_number(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.to_string() }
}

fn read_table(csv_path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut reader = csv::Reader::from_path(csv_path).map_err(|e| csv_error(csv_path, e))?;
    let headers = reader
        .headers()
        .map_err(|e| csv_error(csv_path, e))?
        .iter()
        .map(String::from)
        .collect();
    let rows = reader
        .records()
        .map(|r| {
            r.map(|r| r.iter().map(String::from).collect())
                .map_err(|e| csv_error(csv_path, e))
        })
        .collect::<Result<_>>()?;
    Ok((headers, rows))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            reason: format!("{other:?}"),
        },
    }
}

/// Writes `<stem>_<y>.svg` into `out_dir` for each `y` of the spec and
/// returns the written paths. A CSV without data rows produces no files.
pub fn emit_plots(csv_path: &Path, spec: &PlotSpec, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (headers, rows) = read_table(csv_path)?;
    for c in std::iter::once(&spec.x).chain(&spec.y).chain(&spec.group) {
        if !headers.contains(c) {
            return Err(Error::config("plot", format!("unknown column `{c}`")));
        }
    }
    if rows.is_empty() {
        log::warn!("{} has no records; nothing to plot", csv_path.display());
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let stem = csv_path
        .file_stem()
        .map_or_else(|| "plot".to_string(), |s| s.to_string_lossy().into_owned());
    let mut written = Vec::new();
    for y in &spec.y {
        let s = series(&headers, &rows, spec, y)?;
        if s.is_empty() {
            log::warn!("column `{y}` has no values; skipped");
            continue;
        }
        let title = spec
            .title
            .clone()
            .unwrap_or_else(|| format!("{} vs {}", y.to_uppercase(), spec.x));
        let path = out_dir.join(format!("{stem}_{y}.svg"));
        std::fs::write(&path, render_svg(&s, &spec.x, y, &title)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> (Vec<String>, Vec<Vec<String>>) {
        let headers = ["snr_db", "detector_mode", "decoder_mode", "ser", "ber"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut rows = Vec::new();
        for (mode, base) in [("F", 0.2), ("MB", 0.1)] {
            for snr in [10, 12, 14] {
                for block in 0..2 {
                    rows.push(vec![
                        snr.to_string(),
                        mode.to_string(),
                        "none".to_string(),
                        (base / (snr as f64) + 0.01 * block as f64).to_string(),
                        String::new(),
                    ]);
                }
            }
        }
        (headers, rows)
    }

    #[test]
    fn two_modes_three_points() {
        let (h, rows) = table();
        let s = series(&h, &rows, &PlotSpec::default(), "ser").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].label, "F");
        assert_eq!(s[1].label, "MB");
        assert!(s.iter().all(|l| l.points.len() == 3));
        // mean over the two blocks
        assert!((s[0].points[0].1 - (0.02 + 0.005)).abs() < 1e-12);
        let svg = render_svg(&s, "snr_db", "ser", "t");
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("1e-"));
    }

    #[test]
    fn unknown_column_rejected() {
        let (h, rows) = table();
        let spec = PlotSpec {
            y: vec!["latency".into()],
            ..Default::default()
        };
        assert!(matches!(series(&h, &rows, &spec, "latency"), Err(Error::Config { .. })));
        // a column with no values yields no series
        assert!(series(&h, &rows, &PlotSpec::default(), "ber").unwrap().is_empty());
    }

    #[test]
    fn spec_parsing() {
        let p = Path::new("spec.plot");
        let s = PlotSpec::parse("x = snr_db\ny = ser, ece # two charts\ngroup = detector_mode\n", p).unwrap();
        assert_eq!(s.y, vec!["ser", "ece"]);
        assert_eq!(s.group, vec!["detector_mode"]);
        assert!(matches!(PlotSpec::parse("colour = red\n", p), Err(Error::Parse { line: 1, .. })));
    }
}
