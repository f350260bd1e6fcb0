//! Standalone SVG rendering of ECG leads plus a sidecar CSV of exactly the
//! plotted samples. Pure formatting: fixed-precision coordinates, no
//! timestamps, so identical input gives identical bytes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ecgtwin_core::data::record::{EcgRecord, LEAD_NAMES};
use ecgtwin_core::{Error, Result};

const PANEL_W: f64 = 900.0;
const PANEL_H: f64 = 150.0;
const PANEL_GAP: f64 = 24.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 20.0;

fn lead_index(name: &str) -> Result<usize> {
    LEAD_NAMES
        .iter()
        .position(|n| *n == name)
        .ok_or_else(|| {
            Error::validation(format!(
                "unknown lead '{name}'; valid leads: {}",
                LEAD_NAMES.join(", ")
            ))
        })
}

/// Writes `<out>` as SVG and the same samples as CSV next to it, returning
/// both paths.
pub fn plot_leads(rec: &EcgRecord, leads: &[String], out: &Path) -> Result<(PathBuf, PathBuf)> {
    if leads.is_empty() {
        return Err(Error::validation("at least one lead is required"));
    }
    let indices: Vec<usize> = leads
        .iter()
        .map(|n| lead_index(n))
        .collect::<Result<Vec<_>>>()?;
    let n = rec.samples_per_lead;
    if n < 2 {
        return Err(Error::validation(format!(
            "record {} has {} samples per lead; nothing to draw",
            rec.id, n
        )));
    }

    let height = MARGIN_TOP + leads.len() as f64 * (PANEL_H + PANEL_GAP) + MARGIN_BOTTOM;
    let width = MARGIN_LEFT + PANEL_W + 20.0;
    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{MARGIN_LEFT:.0}\" y=\"24\" font-size=\"16\">{} ({})</text>\n",
        rec.id,
        rec.label.as_str(),
    );

    for (panel, (&idx, name)) in indices.iter().zip(leads).enumerate() {
        let top = MARGIN_TOP + panel as f64 * (PANEL_H + PANEL_GAP);
        let samples = rec.lead(idx);
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in samples {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
        if !(hi > lo) {
            lo -= 1.0;
            hi += 1.0;
        }
        let _ = write!(
            svg,
            "<text x=\"10\" y=\"{:.2}\" font-size=\"14\">{name}</text>\n\
             <rect x=\"{MARGIN_LEFT:.0}\" y=\"{top:.2}\" width=\"{PANEL_W:.0}\" height=\"{PANEL_H:.0}\" \
             fill=\"none\" stroke=\"#cccccc\"/>\n<polyline fill=\"none\" stroke=\"black\" \
             stroke-width=\"0.8\" points=\"",
            top + PANEL_H / 2.0,
        );
        for (i, &v) in samples.iter().enumerate() {
            let x = MARGIN_LEFT + PANEL_W * i as f64 / (n - 1) as f64;
            let y = top + PANEL_H * (hi - v as f64) / (hi - lo);
            if i > 0 {
                svg.push(' ');
            }
            let _ = write!(svg, "{x:.2},{y:.2}");
        }
        svg.push_str("\"/>\n");
    }
    svg.push_str("</svg>\n");

    let mut csv = String::from("lead,sample,value\n");
    for (&idx, name) in indices.iter().zip(leads) {
        for (i, v) in rec.lead(idx).iter().enumerate() {
            let _ = writeln!(csv, "{name},{i},{v}");
        }
    }

    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let csv_path = out.with_extension("csv");
    std::fs::write(out, svg)?;
    std::fs::write(&csv_path, csv)?;
    Ok((out.to_path_buf(), csv_path))
}
