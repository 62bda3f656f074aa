//! Artifact writers: density rasters, per-element tables, iteration logs,
//! and the run summary. Every format is deterministic byte-for-byte given
//! the same inputs; floats print with Rust's shortest-roundtrip `Display`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::design::BackgroundGrid;
use crate::error::{Error, Result};
use crate::mesh::{MtoMesh, Theta};

/// Write the density raster as binary 8-bit grayscale, one pixel per
/// background cell, top row first. Dark means solid: pixel 0 is density 1.
pub fn write_design_pgm(path: &Path, grid: &BackgroundGrid) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", grid.ncx, grid.ncy).into_bytes();
    bytes.reserve(grid.ncx * grid.ncy);
    for cy in (0..grid.ncy).rev() {
        for cx in 0..grid.ncx {
            let v = grid.values[grid.index(cx, cy)].clamp(0.0, 1.0);
            bytes.push(((1.0 - v) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a raster produced by [`write_design_pgm`] back into densities,
/// returning `(ncx, ncy, values)` in bottom-up cell order.
pub fn read_design_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::InvalidConfig(format!("{}: {msg}", path.display()));

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with `#` starting a comment that runs to end of line.
    let mut pos = 0;
    let mut token = |bytes: &[u8]| -> Option<String> {
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        // Exactly one whitespace byte separates the maxval token from the
        // pixel data, so consume it here rather than on the next call.
        if pos < bytes.len() {
            pos += 1;
        }
        (start + 1 <= pos).then(|| String::from_utf8_lossy(&bytes[start..pos - 1]).into_owned())
    };

    if token(&bytes).as_deref() != Some("P5") {
        return Err(bad("not a binary grayscale raster (magic must be P5)"));
    }
    let mut dim = |name: &str, bytes: &[u8]| -> Result<usize> {
        token(bytes)
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| bad(&format!("missing or invalid {name}")))
    };
    let ncx = dim("width", &bytes)?;
    let ncy = dim("height", &bytes)?;
    let maxval = dim("maxval", &bytes)?;
    if maxval > 255 {
        return Err(bad("maxval above 255 is unsupported"));
    }
    let data = &bytes[pos..];
    if data.len() != ncx * ncy {
        return Err(bad(&format!(
            "expected {} pixels, found {}",
            ncx * ncy,
            data.len()
        )));
    }

    let mut values = vec![0.0; ncx * ncy];
    for (row, chunk) in data.chunks(ncx).enumerate() {
        let cy = ncy - 1 - row;
        for (cx, &pix) in chunk.iter().enumerate() {
            values[cy * ncx + cx] = 1.0 - f64::from(pix) / maxval as f64;
        }
    }
    Ok((ncx, ncy, values))
}

/// Per-element mesh state table for one cycle.
pub fn mesh_csv(mesh: &MtoMesh, cycle: usize) -> String {
    let mut out = String::from("cycle,element,p,d,background_m\n");
    for (e, el) in mesh.elements.iter().enumerate() {
        let _ = writeln!(
            out,
            "{cycle},{e},{},{},{}",
            el.p, el.d, mesh.background_m
        );
    }
    out
}

/// Per-element indicator table for one adaptation pass.
pub fn indicators_csv(
    cycle: usize,
    gamma_a: &[f64],
    gamma_d: &[f64],
    qr_error: &[f64],
    thetas: &[Theta],
) -> String {
    let mut out = String::from("cycle,element,gamma_a,gamma_d,qr_error,theta\n");
    for e in 0..gamma_a.len() {
        let _ = writeln!(
            out,
            "{cycle},{e},{},{},{},{}",
            gamma_a[e], gamma_d[e], qr_error[e], thetas[e]
        );
    }
    out
}

/// One optimizer iteration as logged.
#[derive(Debug, Clone, Serialize)]
pub struct LogRow {
    pub cycle: usize,
    pub iteration: usize,
    pub objective: f64,
    pub volume: f64,
    pub threshold: f64,
    pub stopped: bool,
}

/// Iteration log across all cycles.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from("cycle,iteration,J,volume,threshold,stopped\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.cycle, r.iteration, r.objective, r.volume, r.threshold, r.stopped
        );
    }
    out
}

/// Per-cycle statistics for the run summary.
#[derive(Debug, Clone, Serialize)]
pub struct CycleSummary {
    pub cycle: usize,
    pub free_dofs: usize,
    pub design_points: usize,
    pub iterations: usize,
    pub objective: f64,
    pub volume: f64,
}

/// Whole-run summary; optional ratios appear only when their comparison
/// run or reference solve happened.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub final_objective: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective_ratio_to_baseline: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objective_ratio_to_reference: Option<f64>,
    pub wall_seconds: f64,
    pub cycles: Vec<CycleSummary>,
}

pub fn write_summary(path: &Path, summary: &RunSummary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
