//! Sidecar run reports: ordered key = value text that round-trips exactly,
//! plus a small SVG plotter for tours projected onto the first two axes.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::Tour;

/// An ordered list of key = value entries; keys may repeat (per-cell rows).
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub entries: Vec<(String, String)>,
}

impl Report {
    pub fn new() -> Report {
        Report::default()
    }

    /// Appends one entry.
    pub fn put(&mut self, key: &str, value: impl std::fmt::Display) {
        debug_assert!(!key.contains('=') && !key.contains('#') && !key.contains('\n'));
        self.entries.push((key.to_string(), value.to_string()));
    }

    /// Appends a float with full round-trip precision.
    pub fn put_f64(&mut self, key: &str, value: f64) {
        self.put(key, format_args!("{value:.17e}"));
    }

    /// First value stored under the key.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.get(key).and_then(|v| v.parse().ok())
    }

    /// Every value stored under the key, in order.
    pub fn get_all(&self, key: &str) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn parse(path: &str, text: &str) -> Result<Report> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(h) => &raw[..h],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_string(),
                line: i + 1,
                msg: "expected 'key = value'".into(),
            })?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(Report { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Report> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p)?;
        Report::parse(&p.display().to_string(), &text)
    }
}

/// Stroke palette cycled over tours.
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn xy(t: &Tour) -> impl Iterator<Item = (f64, f64)> + '_ {
    t.waypoints.iter().map(|w| {
        (
            w.coords.first().copied().unwrap_or(0.0),
            w.coords.get(1).copied().unwrap_or(0.0),
        )
    })
}

/// Draws the tours projected onto the first two axes as closed polylines
/// with waypoint dots, in a square canvas of the given pixel size.
pub fn svg_plot(tours: &[Tour], size: f64) -> String {
    let mut lo = (f64::INFINITY, f64::INFINITY);
    let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for t in tours {
        for (x, y) in xy(t) {
            lo.0 = lo.0.min(x);
            lo.1 = lo.1.min(y);
            hi.0 = hi.0.max(x);
            hi.1 = hi.1.max(y);
        }
    }
    if !lo.0.is_finite() {
        lo = (0.0, 0.0);
        hi = (1.0, 1.0);
    }
    let extent = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-9);
    let pad = 0.05 * extent;
    let scale = size / (extent + 2.0 * pad);
    let px = |x: f64| (x - lo.0 + pad) * scale;
    // SVG y grows downward.
    let py = |y: f64| size - (y - lo.1 + pad) * scale;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {size:.1} {size:.1}\">"
    );
    let _ = writeln!(
        out,
        "<rect width=\"{size:.1}\" height=\"{size:.1}\" fill=\"white\"/>"
    );
    for (ti, t) in tours.iter().enumerate() {
        let color = PALETTE[ti % PALETTE.len()];
        if t.waypoints.len() >= 2 {
            let mut pts = String::new();
            for (x, y) in xy(t) {
                let _ = write!(pts, "{:.3},{:.3} ", px(x), py(y));
            }
            let _ = writeln!(
                out,
                "<polygon points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"{:.3}\"/>",
                pts.trim_end(),
                size / 400.0
            );
        }
        for (x, y) in xy(t) {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"{:.3}\" fill=\"{color}\"/>",
                px(x),
                py(y),
                size / 200.0
            );
        }
    }
    out.push_str("</svg>\n");
    out
}
