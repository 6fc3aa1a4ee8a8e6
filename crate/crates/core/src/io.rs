//! File formats: matrices as headerless CSV or a `{rows, cols, data}` JSON
//! envelope, versioned run manifests and trace documents, and the SNR-per-
//! layer table with its SVG line chart.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Latents, Partition};
use crate::trace::DenoiseTrace;

/// Major version of every versioned document written here.
pub const SCHEMA_MAJOR: u32 = 1;
pub const SCHEMA_VERSION: &str = "1.0";

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Row-major CSV, one matrix row per line, no header. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 20);
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").expect("writing to a String");
        }
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            line.split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {cell:?}: {e}", n + 1)))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Format("empty matrix file".into()));
    }
    let m = Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))?;
    if !m.is_finite() {
        return Err(Error::Format("non-finite matrix entry".into()));
    }
    Ok(m)
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    write_text(path, &matrix_to_csv(m))
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    matrix_from_csv(&read_text(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix_json(path: &Path, m: &Matrix) -> Result<()> {
    write_json(path, m)
}

pub fn read_matrix_json(path: &Path) -> Result<Matrix> {
    read_json(path)
}

/// One `column,cluster` line per token.
pub fn write_partition_csv(path: &Path, partition: &Partition) -> Result<()> {
    let mut out = String::new();
    for (j, k) in partition.labels().iter().enumerate() {
        writeln!(out, "{j},{k}").expect("writing to a String");
    }
    write_text(path, &out)
}

pub fn read_partition_csv(path: &Path) -> Result<Partition> {
    let text = read_text(path)?;
    let mut labels = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{}: line {}: expected column,cluster", path.display(), n + 1));
        let (col, cluster) = line.split_once(',').ok_or_else(bad)?;
        let col: usize = col.trim().parse().map_err(|_| bad())?;
        if col != labels.len() {
            return Err(Error::Format(format!("{}: columns out of order at line {}", path.display(), n + 1)));
        }
        labels.push(cluster.trim().parse().map_err(|_| bad())?);
    }
    Partition::from_labels(&labels)
}

/// Writes `signal_{k}.csv` and `noise_{k}_{j}.csv` (`j != k`) into `dir`;
/// returns the paths keyed by file stem.
pub fn write_latents(dir: &Path, latents: &Latents) -> Result<BTreeMap<String, PathBuf>> {
    let mut paths = BTreeMap::new();
    let k_count = latents.num_clusters();
    for k in 0..k_count {
        let name = format!("signal_{k}");
        let path = dir.join(format!("{name}.csv"));
        write_matrix_csv(&path, latents.signal(k))?;
        paths.insert(name, path);
        for j in (0..k_count).filter(|&j| j != k) {
            let name = format!("noise_{k}_{j}");
            let path = dir.join(format!("{name}.csv"));
            write_matrix_csv(&path, latents.noise(k, j).expect("off-diagonal"))?;
            paths.insert(name, path);
        }
    }
    Ok(paths)
}

pub fn read_latents(dir: &Path, num_clusters: usize) -> Result<Latents> {
    let mut signal = Vec::with_capacity(num_clusters);
    let mut noise = Vec::with_capacity(num_clusters);
    for k in 0..num_clusters {
        let a = read_matrix_csv(&dir.join(format!("signal_{k}.csv")))?;
        let row = (0..num_clusters)
            .map(|j| {
                if j == k {
                    Ok(Matrix::zeros(a.rows(), a.cols()))
                } else {
                    read_matrix_csv(&dir.join(format!("noise_{k}_{j}.csv")))
                }
            })
            .collect::<Result<_>>()?;
        signal.push(a);
        noise.push(row);
    }
    Latents::new(signal, noise)
}

fn check_schema(version: &str) -> Result<()> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(SCHEMA_MAJOR) {
        return Err(Error::Schema {
            found: version.to_string(),
            expected: SCHEMA_MAJOR,
        });
    }
    Ok(())
}

/// Everything needed to reproduce one command run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub schema_version: String,
    pub command: String,
    /// Effective command line, config-file entries included.
    #[serde(default)]
    pub argv: Vec<String>,
    /// Root seed; absent for commands that draw nothing at random.
    pub seed: Option<u64>,
    /// Seconds since the Unix epoch at start and end of the run.
    pub started_at: u64,
    pub finished_at: u64,
    pub params: serde_json::Value,
    /// Artifact paths keyed by role.
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Outcome summary, e.g. a verdict.
    #[serde(default)]
    pub result: serde_json::Value,
}

impl ExperimentManifest {
    pub fn new(command: impl Into<String>, seed: Option<u64>, params: serde_json::Value) -> Self {
        let now = unix_now();
        ExperimentManifest {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.into(),
            argv: Vec::new(),
            seed,
            started_at: now,
            finished_at: now,
            params,
            artifacts: BTreeMap::new(),
            result: serde_json::Value::Null,
        }
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished_at = unix_now();
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Probe {
            schema_version: String,
        }
        let text = read_text(path)?;
        let probe: Probe = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        check_schema(&probe.schema_version)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Serialize, Deserialize)]
struct TraceDocument {
    schema_version: String,
    trace: DenoiseTrace,
}

pub fn write_trace(path: &Path, trace: &DenoiseTrace) -> Result<()> {
    write_json(
        path,
        &TraceDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            trace: trace.clone(),
        },
    )
}

pub fn read_trace(path: &Path) -> Result<DenoiseTrace> {
    let doc: serde_json::Value = read_json(path)?;
    let version = doc
        .get("schema_version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format(format!("{}: missing schema_version", path.display())))?;
    check_schema(version)?;
    let doc: TraceDocument = serde_json::from_value(doc).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    Ok(doc.trace)
}

/// `layer,cluster,snr` table, header included, `inf` for the sentinel.
pub fn snr_table_csv(trace: &DenoiseTrace) -> String {
    let mut out = String::from("layer,cluster,snr\n");
    for (l, row) in trace.snr().iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            if v.is_infinite() {
                writeln!(out, "{l},{k},inf")
            } else {
                writeln!(out, "{l},{k},{v:?}")
            }
            .expect("writing to a String");
        }
    }
    out
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// SNR against layer, one polyline per cluster. Infinite values are left
/// out; a trace with no finite value gives an empty chart.
pub fn render_svg(trace: &DenoiseTrace, log_scale: bool) -> String {
    let layers = trace.num_layers();
    let transform = |v: f64| if log_scale { v.log10() } else { v };
    let values: Vec<f64> = trace
        .snr()
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite() && (!log_scale || *v > 0.0))
        .map(transform)
        .collect();
    let (mut lo, mut hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let plot_w = SVG_WIDTH - 2.0 * MARGIN;
    let plot_h = SVG_HEIGHT - 2.0 * MARGIN;
    let x = |l: usize| MARGIN + if layers == 0 { plot_w / 2.0 } else { plot_w * l as f64 / layers as f64 };
    let y = |v: f64| MARGIN + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<path d="M{MARGIN},{MARGIN} V{} H{}" fill="none" stroke="black"/>"#,
        SVG_HEIGHT - MARGIN,
        SVG_WIDTH - MARGIN
    );
    for l in 0..=layers {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{l}</text>"#,
            x(l),
            SVG_HEIGHT - MARGIN + 16.0
        );
    }
    for (frac, anchor) in [(0.0, lo), (0.5, (lo + hi) / 2.0), (1.0, hi)] {
        let label = if log_scale { 10f64.powf(anchor) } else { anchor };
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label:.3}</text>"#,
            MARGIN - 6.0,
            MARGIN + plot_h * (1.0 - frac) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">layer</text>"#,
        MARGIN + plot_w / 2.0,
        SVG_HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        MARGIN + plot_h / 2.0,
        MARGIN + plot_h / 2.0,
        if log_scale { "SNR (log scale)" } else { "SNR" }
    );

    for k in 0..trace.num_clusters() {
        let color = PALETTE[k % PALETTE.len()];
        let points: Vec<String> = trace
            .snr()
            .iter()
            .enumerate()
            .filter(|(_, row)| row[k].is_finite() && (!log_scale || row[k] > 0.0))
            .map(|(l, row)| format!("{:.2},{:.2}", x(l), y(transform(row[k]))))
            .collect();
        if points.len() > 1 {
            let _ = writeln!(
                svg,
                r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
                points.join(" ")
            );
        }
        for p in &points {
            let (px, py) = p.split_once(',').expect("formatted above");
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="2.5" fill="{color}"/>"#);
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">cluster {k}</text>"#,
            SVG_WIDTH - MARGIN + 6.0,
            MARGIN + 14.0 * k as f64
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the SNR table and, when `svg` is given, the chart.
pub fn emit_fig3_artifacts(trace: &DenoiseTrace, csv: &Path, svg: Option<&Path>, log_scale: bool) -> Result<()> {
    if trace.snr().is_empty() {
        return Err(Error::param("trace has no recorded layers"));
    }
    write_text(csv, &snr_table_csv(trace))?;
    if let Some(path) = svg {
        write_text(path, &render_svg(trace, log_scale))?;
    }
    Ok(())
}
