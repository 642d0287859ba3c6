//! Deterministic report-bundle plumbing.
//!
//! Every artifact writer here is a pure function of its inputs: pretty JSON
//! with a trailing newline, CSV exactly as produced by the analysis types,
//! and an SVG chart whose geometry is computed with fixed-precision
//! formatting. Nothing records a timestamp, hostname, or absolute path, so
//! two runs of the same configuration produce byte-identical bundles.
//!
//! The bundle's provenance record (`run_manifest.json`) is written last: it
//! holds the SHA-256 of the canonical config plus a digest of every other
//! file in the bundle, which makes drift between reruns detectable with a
//! single file comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::DatasetMode;

/// Name of the provenance record; excluded from its own artifact digests.
pub const RUN_MANIFEST_NAME: &str = "run_manifest.json";
pub const REPORT_FORMAT: &str = "neurolens.report";
pub const REPORT_VERSION: u32 = 1;

#[derive(thiserror::Error, Debug)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report serialization failed: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad chart input: {0}")]
    Chart(String),
}

pub type Result<T> = std::result::Result<T, ReportError>;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        write!(out, "{b:02x}").expect("write to string");
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

/// Write text to `path`, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text.as_bytes()).map_err(io_err(path))
}

/// Pretty JSON with a trailing newline — the one JSON style every bundle
/// artifact uses.
pub fn json_string<T: Serialize>(value: &T) -> Result<String> {
    Ok(format!("{}\n", serde_json::to_string_pretty(value)?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &json_string(value)?)
}

/// JSON-lines: one compact record per line.
pub fn jsonl_string<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    Ok(out)
}

/// The bundle's provenance record. Deliberately free of timestamps and
/// machine identity; `config_sha256` covers the canonical config (which
/// excludes the output location).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub mode: DatasetMode,
    pub seed: u64,
    pub config_sha256: String,
    /// Bundle-relative path (`/`-separated) → SHA-256 of the file bytes.
    pub artifacts: BTreeMap<String, String>,
}

/// Digest every file under `root` except the manifest itself, keyed by
/// `/`-separated relative path (sorted by the map).
pub fn hash_bundle(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut artifacts = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(root)
                .expect("walk stays under root")
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if rel == RUN_MANIFEST_NAME {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(io_err(&path))?;
            artifacts.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(artifacts)
}

/// Hash the finished bundle and drop the provenance record into it. Call
/// after every other artifact is on disk.
pub fn write_run_manifest(
    root: &Path,
    mode: DatasetMode,
    seed: u64,
    config_sha256: &str,
) -> Result<RunManifest> {
    let manifest = RunManifest {
        format: REPORT_FORMAT.to_string(),
        version: REPORT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        mode,
        seed,
        config_sha256: config_sha256.to_string(),
        artifacts: hash_bundle(root)?,
    };
    write_json(&root.join(RUN_MANIFEST_NAME), &manifest)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// SVG bar charts
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#4c78a8", "#f58518", "#54a24b", "#e45756", "#72b7b2", "#b279a2"];

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            other => out.push(other),
        }
    }
    out
}

struct ChartData {
    series: Vec<String>,
    rows: Vec<(String, Vec<Option<f64>>)>,
}

/// Parse a bundle CSV: a header row, then one row per group. The first
/// `label_cols` columns form the row label (joined with a space); remaining
/// columns are numeric series, with `---` or an empty cell marking a gap.
fn parse_chart_csv(csv_text: &str, label_cols: usize) -> Result<ChartData> {
    let bad = |msg: String| ReportError::Chart(msg);
    if label_cols == 0 {
        return Err(bad("label_cols must be at least 1".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_reader(csv_text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(h) => h.map_err(|e| bad(format!("csv parse error: {e}")))?,
        None => return Err(bad("empty csv".into())),
    };
    if header.len() <= label_cols {
        return Err(bad(format!(
            "need at least one value column after {label_cols} label column(s), got {} columns",
            header.len()
        )));
    }
    let series: Vec<String> = header.iter().skip(label_cols).map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in records {
        let record = record.map_err(|e| bad(format!("csv parse error: {e}")))?;
        let label = record.iter().take(label_cols).collect::<Vec<_>>().join(" ");
        let mut values = Vec::with_capacity(series.len());
        for cell in record.iter().skip(label_cols) {
            let cell = cell.trim();
            if cell.is_empty() || cell == "---" {
                values.push(None);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    bad(format!("row {label:?}: cell {cell:?} is not a number"))
                })?;
                values.push(Some(v));
            }
        }
        rows.push((label, values));
    }
    if rows.is_empty() {
        return Err(bad("csv has a header but no data rows".into()));
    }
    Ok(ChartData { series, rows })
}

/// Render a grouped bar chart from a bundle CSV. Pure function of its
/// inputs: identical CSV and title yield identical SVG bytes.
pub fn csv_bar_chart_svg(csv_text: &str, title: &str, label_cols: usize) -> Result<String> {
    let data = parse_chart_csv(csv_text, label_cols)?;
    let n_groups = data.rows.len();
    let n_series = data.series.len();

    let values: Vec<f64> = data
        .rows
        .iter()
        .flat_map(|(_, vs)| vs.iter().flatten().copied())
        .collect();
    let raw_min = values.iter().copied().fold(0.0_f64, f64::min);
    let raw_max = values.iter().copied().fold(0.0_f64, f64::max);
    let span = (raw_max - raw_min).max(1e-9);
    let y_min = if raw_min < 0.0 { raw_min - 0.08 * span } else { 0.0 };
    let y_max = if raw_max > 0.0 { raw_max + 0.08 * span } else { 0.08 * span };
    let range = y_max - y_min;

    let (width, height) = (860.0, 440.0);
    let (left, right, top, bottom) = (70.0, 180.0, 50.0, 70.0);
    let plot_w = width - left - right;
    let plot_h = height - top - bottom;
    let y_of = |v: f64| top + (y_max - v) / range * plot_h;

    let slot = plot_w / n_groups as f64;
    let bar_w = slot * 0.8 / n_series as f64;
    // Per-bar value labels get unreadable past this density.
    let draw_values = n_groups * n_series <= 40;

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"Helvetica, Arial, sans-serif\">\n"
    );
    let _ = write!(svg, "<rect width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n");
    let _ = write!(
        svg,
        "<text x=\"{:.2}\" y=\"28\" text-anchor=\"middle\" font-size=\"15\" \
         font-weight=\"bold\" fill=\"#1a1a1a\">{}</text>\n",
        left + plot_w / 2.0,
        xml_escape(title)
    );

    // Horizontal gridlines and y-axis tick labels.
    for i in 0..=4 {
        let v = y_min + range * (i as f64) / 4.0;
        let y = y_of(v);
        let _ = write!(
            svg,
            "<line x1=\"{left}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" \
             stroke=\"#dddddd\" stroke-width=\"1\"/>\n",
            left + plot_w
        );
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\" font-size=\"11\" \
             fill=\"#444444\">{v:.2}</text>\n",
            left - 8.0,
            y + 4.0
        );
    }

    // Bars.
    for (g, (label, vals)) in data.rows.iter().enumerate() {
        let slot_x = left + slot * g as f64;
        for (s, val) in vals.iter().enumerate() {
            let Some(v) = *val else { continue };
            let x = slot_x + slot * 0.1 + bar_w * s as f64;
            let y0 = y_of(0.0);
            let yv = y_of(v);
            let (y, h) = if yv <= y0 { (yv, y0 - yv) } else { (y0, yv - y0) };
            let color = PALETTE[s % PALETTE.len()];
            let _ = write!(
                svg,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{bar_w:.2}\" height=\"{h:.2}\" \
                 fill=\"{color}\"/>\n"
            );
            if draw_values {
                let ty = if v >= 0.0 { yv - 4.0 } else { yv + 12.0 };
                let _ = write!(
                    svg,
                    "<text x=\"{:.2}\" y=\"{ty:.2}\" text-anchor=\"middle\" font-size=\"10\" \
                     fill=\"#333333\">{v:.2}</text>\n",
                    x + bar_w / 2.0
                );
            }
        }
        // Group label, angled when long so neighbors stay legible.
        let cx = slot_x + slot / 2.0;
        let ly = top + plot_h + 18.0;
        if label.len() > 10 {
            let _ = write!(
                svg,
                "<text x=\"{cx:.2}\" y=\"{ly:.2}\" text-anchor=\"end\" font-size=\"11\" \
                 fill=\"#1a1a1a\" transform=\"rotate(-30 {cx:.2} {ly:.2})\">{}</text>\n",
                xml_escape(label)
            );
        } else {
            let _ = write!(
                svg,
                "<text x=\"{cx:.2}\" y=\"{ly:.2}\" text-anchor=\"middle\" font-size=\"11\" \
                 fill=\"#1a1a1a\">{}</text>\n",
                xml_escape(label)
            );
        }
    }

    // Zero line on top of the bars when negatives are present.
    if y_min < 0.0 {
        let y0 = y_of(0.0);
        let _ = write!(
            svg,
            "<line x1=\"{left}\" y1=\"{y0:.2}\" x2=\"{:.2}\" y2=\"{y0:.2}\" \
             stroke=\"#666666\" stroke-width=\"1\"/>\n",
            left + plot_w
        );
    }

    // Legend.
    for (s, name) in data.series.iter().enumerate() {
        let x = left + plot_w + 16.0;
        let y = top + 16.0 * s as f64;
        let color = PALETTE[s % PALETTE.len()];
        let _ = write!(
            svg,
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n"
        );
        let _ = write!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"11\" fill=\"#1a1a1a\">{}</text>\n",
            x + 14.0,
            y + 9.0,
            xml_escape(name)
        );
    }

    svg.push_str("</svg>\n");
    Ok(svg)
}
