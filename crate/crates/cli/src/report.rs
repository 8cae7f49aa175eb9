//! Run reporting helpers: file digests, number formatting, and the
//! dependency-free SVG loss chart.

use std::path::Path;

use sha2::{Digest, Sha256};

use graft_core::error::Result;
use graft_core::trainer::MetricsLog;

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(graft_core::datasets::hex(&hasher.finalize()))
}

/// 1234567 → "1,234,567"
pub fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Minimal SVG line chart of training loss over steps.
pub fn loss_svg(metrics: &MetricsLog) -> String {
    let (w, h, pad) = (640.0f64, 360.0f64, 40.0f64);
    let points: Vec<(f64, f64)> = metrics
        .rows
        .iter()
        .map(|r| (r.step as f64, r.loss))
        .collect();
    if points.is_empty() {
        return format!(
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}"><text x="20" y="30">no data</text></svg>"#
        );
    }
    let x_max = points.last().unwrap().0.max(1.0);
    let x_min = points.first().unwrap().0;
    let y_max = points.iter().map(|p| p.1).fold(f64::MIN, f64::max);
    let y_min = points.iter().map(|p| p.1).fold(f64::MAX, f64::min);
    let y_span = (y_max - y_min).max(1e-9);
    let x_span = (x_max - x_min).max(1.0);
    let path: Vec<String> = points
        .iter()
        .map(|(x, y)| {
            let px = pad + (x - x_min) / x_span * (w - 2.0 * pad);
            let py = h - pad - (y - y_min) / y_span * (h - 2.0 * pad);
            format!("{px:.1},{py:.1}")
        })
        .collect();
    format!(
        concat!(
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"##,
            r##"<rect width="{w}" height="{h}" fill="white"/>"##,
            r##"<polyline points="{points}" fill="none" stroke="#2060c0" stroke-width="1.5"/>"##,
            r##"<line x1="{pad}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"##,
            r##"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y0}" stroke="black"/>"##,
            r##"<text x="{pad}" y="{label_y}" font-size="12">step {x_min:.0}..{x_max:.0}</text>"##,
            r##"<text x="4" y="{pad}" font-size="12">loss {y_min:.4}..{y_max:.4}</text>"##,
            "</svg>"
        ),
        w = w,
        h = h,
        points = path.join(" "),
        pad = pad,
        y0 = h - pad,
        x1 = w - pad,
        label_y = h - pad / 2.0,
        x_min = x_min,
        x_max = x_max,
        y_min = y_min,
        y_max = y_max,
    )
}
