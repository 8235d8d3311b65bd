//! Artifact plumbing shared by the subcommands: output-directory resolution,
//! reproducibility headers, parsing of aggregated experiment CSVs, and a
//! minimal SVG chart renderer for the figure-data exports.
//!
//! Every file the tool writes starts with `# key: value` header lines that
//! echo the tool version, the invoked command and the fully resolved
//! configuration. The `# timestamp:` line is informational; determinism
//! comparisons strip it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clamsim::error::{Error, Result};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "CLAMSIM_OUT_DIR";

/// Resolves the output directory: explicit flag, else `$CLAMSIM_OUT_DIR`,
/// else the working directory.
pub fn resolve_out_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Builder for the reproducibility header of a CLI-written artifact.
pub struct Header {
    lines: Vec<String>,
}

impl Header {
    /// Starts a header with the tool version, a timestamp and the command.
    pub fn new(command: &str) -> Self {
        Self {
            lines: vec![
                format!("# clamsim: {}", env!("CARGO_PKG_VERSION")),
                format!(
                    "# timestamp: {}",
                    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
                ),
                format!("# command: {command}"),
            ],
        }
    }

    /// Appends one `# key: value` line.
    pub fn field(mut self, key: &str, value: impl std::fmt::Display) -> Self {
        self.lines.push(format!("# {key}: {value}"));
        self
    }

    /// Renders the header lines, each newline-terminated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(line);
            out.push('\n');
        }
        out
    }
}

/// Formats an SNR for headers and CSV cells (`off` = noiseless).
pub fn snr_field(snr: Option<f64>) -> String {
    match snr {
        Some(v) => format!("{v}"),
        None => "off".to_string(),
    }
}

/// Parses an SNR cell produced by [`snr_field`].
pub fn parse_snr(s: &str) -> std::result::Result<Option<f64>, String> {
    if s == "off" {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| format!("expected `off` or a dB value, got {s:?}"))
}

/// Writes an artifact file, creating parent directories, and echoes its path
/// on stdout so scripted callers can pick it up.
pub fn write_artifact(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// Aggregated experiment CSV input
// ---------------------------------------------------------------------------

/// Column layout of the aggregated CSV written by `experiment run`.
const AGGREGATED_COLUMNS: &str = "method,snr_db,quantity,n_trials,n_values,n_missed,rmse,median";

/// One parsed row of an aggregated experiment CSV.
#[derive(Debug, Clone)]
pub struct AggregatedRow {
    pub method: String,
    pub snr_db: Option<f64>,
    pub quantity: String,
    pub rmse: f64,
    pub median: f64,
}

/// Parses an aggregated experiment CSV (header comments skipped). The column
/// line must match the `experiment run` schema exactly.
pub fn parse_aggregated_csv(path: &Path) -> Result<Vec<AggregatedRow>> {
    let text = std::fs::read_to_string(path)?;
    let malformed = |detail: String| Error::MalformedArtifact {
        kind: "aggregated experiment CSV",
        detail: format!("{}: {detail}", path.display()),
    };
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    match lines.next() {
        Some(header) if header == AGGREGATED_COLUMNS => {}
        other => {
            return Err(malformed(format!(
                "expected column line {AGGREGATED_COLUMNS:?}, found {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(malformed(format!("row {line:?} does not have 8 fields")));
        }
        rows.push(AggregatedRow {
            method: fields[0].to_string(),
            snr_db: parse_snr(fields[1]).map_err(|e| malformed(e))?,
            quantity: fields[2].to_string(),
            rmse: fields[6]
                .parse()
                .map_err(|_| malformed(format!("bad rmse field {:?}", fields[6])))?,
            median: fields[7]
                .parse()
                .map_err(|_| malformed(format!("bad median field {:?}", fields[7])))?,
        });
    }
    if rows.is_empty() {
        return Err(malformed("no data rows".into()));
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// SVG rendering
// ---------------------------------------------------------------------------

const CHART_W: f64 = 640.0;
const CHART_H: f64 = 480.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

/// One polyline of a line chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Marker shape of a scatter series.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Marker {
    Circle,
    Cross,
}

/// One point set of the polar scatter chart; angles in degrees.
#[derive(Debug, Clone)]
pub struct PolarSeries {
    pub label: String,
    pub marker: Marker,
    pub points: Vec<(f64, f64)>,
}

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{CHART_W}\" height=\"{CHART_H}\" \
         viewBox=\"0 0 {CHART_W} {CHART_H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        CHART_W / 2.0,
        escape(title)
    );
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Formats an axis tick without trailing zeros.
fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let abs = v.abs();
    if (1e-3..1e5).contains(&abs) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:e}")
    }
}

/// Evenly spaced ticks covering [lo, hi] with a 1/2/5-decade step.
fn linear_ticks(lo: f64, hi: f64) -> Vec<f64> {
    if !(hi > lo) {
        return vec![lo];
    }
    let raw = (hi - lo) / 4.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|&s| s >= raw)
        .unwrap_or(mag * 10.0);
    let mut ticks = Vec::new();
    let mut t = (lo / step).ceil() * step;
    while t <= hi + step * 1e-9 {
        ticks.push(t);
        t += step;
    }
    ticks
}

/// Renders a line chart; `log_y` switches the y axis to decades. Points with
/// a nonpositive y are floored to a tenth of the smallest positive y when the
/// axis is logarithmic.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series], log_y: bool) -> String {
    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    for s in series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
    }
    if xs.is_empty() {
        return svg_open(title) + "</svg>\n";
    }
    let (x_lo, x_hi) = span(&xs);
    let floor = ys.iter().copied().filter(|v| *v > 0.0).fold(f64::INFINITY, f64::min);
    let log_y = log_y && floor.is_finite();
    let map_y = |y: f64| -> f64 {
        if log_y {
            y.max(floor / 10.0).log10()
        } else {
            y
        }
    };
    let mapped: Vec<f64> = ys.iter().map(|&y| map_y(y)).collect();
    let (y_lo, y_hi) = span(&mapped);

    let plot_w = CHART_W - MARGIN_L - MARGIN_R;
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_lo) / (x_hi - x_lo).max(1e-300) * plot_w;
    let py = |y: f64| CHART_H - MARGIN_B - (map_y(y) - y_lo) / (y_hi - y_lo).max(1e-300) * plot_h;

    let mut s = svg_open(title);
    // Axes and ticks.
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{plot_w}\" height=\"{plot_h}\" \
         fill=\"none\" stroke=\"black\"/>"
    );
    for t in linear_ticks(x_lo, x_hi) {
        let x = px(t);
        let y0 = CHART_H - MARGIN_B;
        let _ = writeln!(s, "<line x1=\"{x}\" y1=\"{y0}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>", y0 + 5.0);
        let _ = writeln!(
            s,
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            y0 + 18.0,
            tick_label(t)
        );
    }
    let y_ticks = if log_y {
        let lo = y_lo.floor() as i64;
        let hi = y_hi.ceil() as i64;
        (lo..=hi).map(|d| d as f64).filter(|d| (y_lo..=y_hi).contains(d)).collect()
    } else {
        linear_ticks(y_lo, y_hi)
    };
    for t in y_ticks {
        let y = CHART_H - MARGIN_B - (t - y_lo) / (y_hi - y_lo).max(1e-300) * plot_h;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{MARGIN_L}\" y2=\"{y}\" stroke=\"black\"/>",
            MARGIN_L - 5.0
        );
        let label = if log_y { format!("1e{}", t as i64) } else { tick_label(t) };
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{label}</text>",
            MARGIN_L - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + plot_w / 2.0,
        CHART_H - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0,
        escape(y_label)
    );
    // Polylines with point markers and a legend.
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> =
            sr.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            path.join(" ")
        );
        for &(x, y) in &sr.points {
            let _ = writeln!(
                s,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                px(x),
                py(y)
            );
        }
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let lx = MARGIN_L + plot_w - 160.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.5\"/>",
            lx + 20.0
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\">{}</text>",
            lx + 26.0,
            ly + 4.0,
            escape(&sr.label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Renders a semicircular polar scatter: azimuth 0..180 degrees sweeps from
/// the +x direction (right) through +y (up) to -x (left); the radius is the
/// plotted quantity (delay in microseconds for the localization figure).
pub fn polar_scatter(title: &str, radius_label: &str, series: &[PolarSeries]) -> String {
    let r_max = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-12);
    let ticks = linear_ticks(0.0, r_max);
    let r_lim = ticks.last().copied().unwrap_or(r_max).max(r_max);

    let cx = CHART_W / 2.0;
    let cy = CHART_H - MARGIN_B;
    let r_px = (CHART_W / 2.0 - MARGIN_R - 40.0).min(CHART_H - MARGIN_T - MARGIN_B - 10.0);
    let to_xy = |az_deg: f64, r: f64| -> (f64, f64) {
        let rad = az_deg.to_radians();
        let rr = r / r_lim * r_px;
        (cx + rr * rad.cos(), cy - rr * rad.sin())
    };

    let mut s = svg_open(title);
    // Radial grid: semicircles plus spokes every 30 degrees.
    for &t in &ticks {
        if t <= 0.0 {
            continue;
        }
        let rr = t / r_lim * r_px;
        let _ = writeln!(
            s,
            "<path d=\"M {} {cy} A {rr} {rr} 0 0 1 {} {cy}\" fill=\"none\" stroke=\"#cccccc\"/>",
            cx + rr,
            cx - rr
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-size=\"10\" fill=\"#666666\">{}</text>",
            cx + rr * (75f64).to_radians().cos() + 2.0,
            cy - rr * (75f64).to_radians().sin(),
            tick_label(t)
        );
    }
    for spoke in (0..=180).step_by(30) {
        let (x, y) = to_xy(spoke as f64, r_lim);
        let _ = writeln!(s, "<line x1=\"{cx}\" y1=\"{cy}\" x2=\"{x}\" y2=\"{y}\" stroke=\"#cccccc\"/>");
        let (lx, ly) = to_xy(spoke as f64, r_lim * 1.06);
        let _ = writeln!(
            s,
            "<text x=\"{lx}\" y=\"{ly}\" text-anchor=\"middle\" font-size=\"10\">{spoke}&#176;</text>"
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{cx}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
        cy + 30.0,
        escape(radius_label)
    );
    // Scatter points and legend.
    for (i, sr) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for &(az, r) in &sr.points {
            let (x, y) = to_xy(az, r);
            match sr.marker {
                Marker::Circle => {
                    let _ = writeln!(
                        s,
                        "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"none\" \
                         stroke=\"{color}\" stroke-width=\"1.5\"/>"
                    );
                }
                Marker::Cross => {
                    let _ = writeln!(
                        s,
                        "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"{color}\" \
                         stroke-width=\"1.5\"/>",
                        x - 4.0,
                        y - 4.0,
                        x + 4.0,
                        y + 4.0,
                        x - 4.0,
                        y + 4.0,
                        x + 4.0,
                        y - 4.0
                    );
                }
            }
        }
        let ly = MARGIN_T + 14.0 + 16.0 * i as f64;
        let lx = MARGIN_L;
        match sr.marker {
            Marker::Circle => {
                let _ = writeln!(
                    s,
                    "<circle cx=\"{}\" cy=\"{ly}\" r=\"4\" fill=\"none\" stroke=\"{color}\" \
                     stroke-width=\"1.5\"/>",
                    lx + 8.0
                );
            }
            Marker::Cross => {
                let _ = writeln!(
                    s,
                    "<path d=\"M {} {} L {} {} M {} {} L {} {}\" stroke=\"{color}\" \
                     stroke-width=\"1.5\"/>",
                    lx + 4.0,
                    ly - 4.0,
                    lx + 12.0,
                    ly + 4.0,
                    lx + 4.0,
                    ly + 4.0,
                    lx + 12.0,
                    ly - 4.0
                );
            }
        }
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\">{}</text>", lx + 18.0, ly + 4.0, escape(&sr.label));
    }
    s.push_str("</svg>\n");
    s
}

fn span(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}
