//! Report files: JSON envelopes, matrix CSV/SVG, compression CSV.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::compress::CompressionReport;
use crate::error::{Error, Result};
use crate::eval::FidelityMatrix;

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn csv_bytes(rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.write_record(&row).map_err(|e| Error::Cache(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| Error::Cache(format!("csv: {e}")))
}

/// Rows are proxies, columns targets; absent cells are empty.
pub fn matrix_csv(m: &FidelityMatrix) -> Result<Vec<u8>> {
    let mut rows = Vec::with_capacity(m.model_ids.len() + 1);
    let mut header = vec!["proxy\\target".to_string()];
    header.extend(m.model_ids.iter().cloned());
    rows.push(header);
    for r in &m.model_ids {
        let mut row = vec![r.clone()];
        row.extend(m.model_ids.iter().map(|c| m.value(r, c).map(|v| v.to_string()).unwrap_or_default()));
        rows.push(row);
    }
    csv_bytes(rows)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Heatmap with value annotations. Color runs white to blue over the range of
/// present values; absent cells are grey.
pub fn matrix_svg(m: &FidelityMatrix) -> String {
    const CELL: usize = 64;
    const MARGIN: usize = 150;
    let k = m.model_ids.len();
    let values: Vec<f64> = m.cells.iter().filter_map(|c| c.report.as_ref().map(|r| r.value)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let size = MARGIN + k * CELL + 20;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{}" y="14" text-anchor="middle">target ({})</text>"#, MARGIN + k * CELL / 2, m.metric.name());
    for (j, c) in m.model_ids.iter().enumerate() {
        let x = MARGIN + j * CELL + CELL / 2;
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, MARGIN - 8, escape(c));
    }
    for (i, r) in m.model_ids.iter().enumerate() {
        let y = MARGIN + i * CELL;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, MARGIN - 8, y + CELL / 2 + 4, escape(r));
        for (j, c) in m.model_ids.iter().enumerate() {
            let x = MARGIN + j * CELL;
            let (fill, label) = match m.value(r, c) {
                Some(v) => {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 1.0 };
                    let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
                    (format!("#{:02x}{:02x}{:02x}", shade(33.0), shade(102.0), shade(172.0)), format!("{v:.3}"))
                }
                None => ("#cccccc".to_string(), "n/a".to_string()),
            };
            let _ = writeln!(s, r##"<rect x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="{fill}" stroke="#ffffff"/>"##);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{label}</text>"#, x + CELL / 2, y + CELL / 2 + 4);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One row per subject.
pub fn compression_csv(reports: &[CompressionReport]) -> Result<Vec<u8>> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut rows = vec![[
        "subject",
        "target",
        "proxy",
        "examples",
        "acc0",
        "mdta_oracle",
        "mdta_proxy",
        "mdta_random",
        "ratio_proxy",
        "ratio_random",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect::<Vec<_>>()];
    for r in reports {
        rows.push(vec![
            r.subject_id.clone(),
            r.target_model_id.clone(),
            r.proxy_model_id.clone().unwrap_or_default(),
            r.oracle.example_count.to_string(),
            r.oracle.acc0.to_string(),
            r.oracle.mdta.to_string(),
            opt(r.proxy.as_ref().map(|p| p.mdta)),
            r.random.mdta.to_string(),
            opt(r.proxy_removal_ratio),
            opt(r.random_removal_ratio),
        ]);
    }
    csv_bytes(rows)
}
