//! 8-bit PGM previews and metrics tables.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::Grid;

/// Value range mapped linearly onto `0..=255`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lo: f64,
    pub hi: f64,
}

impl Window {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || hi < lo {
            return Err(invalid(format!("window [{lo}, {hi}] must be finite and ordered")));
        }
        Ok(Window { lo, hi })
    }

    /// Smallest window holding every value.
    pub fn covering(values: &[f64]) -> Result<Self> {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Err(invalid("cannot derive a window from an empty image"));
        }
        Window::new(lo, hi)
    }

    /// `floor(255 (v - lo) / (hi - lo) + 1/2)` clamped to the byte range,
    /// i.e. round half up. A degenerate window maps everything to 128.
    pub fn quantize(&self, v: f64) -> u8 {
        if self.hi == self.lo {
            return 128;
        }
        let t = 255.0 * (v - self.lo) / (self.hi - self.lo);
        (t + 0.5).floor().clamp(0.0, 255.0) as u8
    }
}

/// Binary PGM bytes (P5, maxval 255), rows top to bottom. `comment` lines
/// go into the header.
pub fn encode_pgm(grid: Grid, values: &[f64], window: Window, comment: Option<&str>) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(shape(format!("image has {} values, grid has {}", values.len(), grid.len())));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("cannot export non-finite value at voxel {i}")));
    }
    let mut out = b"P5\n".to_vec();
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    write!(out, "{} {}\n255\n", grid.nx, grid.ny)?;
    out.extend(values.iter().map(|&v| window.quantize(v)));
    Ok(out)
}

/// Writes an image as PGM; `window` defaults to the value range.
pub fn export_pgm(path: &Path, grid: Grid, values: &[f64], window: Option<Window>, comment: Option<&str>) -> Result<()> {
    let w = match window {
        Some(w) => w,
        None => Window::covering(values)?,
    };
    std::fs::write(path, encode_pgm(grid, values, w, comment)?)?;
    Ok(())
}

/// Parses a P5 file written by [`encode_pgm`]: `(width, height, comments, pixels)`.
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<String>, Vec<u8>)> {
    let mut pos = 0;
    let mut line = || -> Result<String> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| invalid("truncated PGM header"))?;
        let s = String::from_utf8_lossy(&bytes[pos..pos + end]).into_owned();
        pos += end + 1;
        Ok(s)
    };
    if line()? != "P5" {
        return Err(invalid("not a binary PGM file"));
    }
    let mut comments = Vec::new();
    let mut dims = line()?;
    while let Some(c) = dims.strip_prefix('#') {
        comments.push(c.trim_start().to_string());
        dims = line()?;
    }
    let parsed: Vec<usize> = dims.split_whitespace().filter_map(|t| t.parse().ok()).collect();
    let [w, h] = parsed[..] else {
        return Err(invalid(format!("bad PGM dimensions line '{dims}'")));
    };
    if line()? != "255" {
        return Err(invalid("only maxval 255 is supported"));
    }
    let pixels = bytes[pos..].to_vec();
    if pixels.len() != w * h {
        return Err(shape(format!("PGM holds {} pixels, header says {w}x{h}", pixels.len())));
    }
    Ok((w, h, comments, pixels))
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: String,
    pub foreground_voxels: usize,
    pub mean_rel_rho: f64,
    pub mean_rel_t1: f64,
    pub mean_rel_t2: f64,
    /// `||A Pi(q_hat) - y||` under the Bloch model.
    pub data_residual: f64,
    pub iterations: usize,
}

pub const METRICS_HEADER: &str = "method,foreground_voxels,mean_rel_rho,mean_rel_t1,mean_rel_t2,data_residual,iterations";

/// CSV text with a leading `# config_hash=` line; floats use a fixed
/// 17-digit exponent format so equal values give equal bytes.
pub fn metrics_csv(rows: &[MetricsRow], config_hash: &str) -> String {
    let mut s = format!("# config_hash={config_hash}\n{METRICS_HEADER}\n");
    for r in rows {
        s += &format!(
            "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{}\n",
            r.method, r.foreground_voxels, r.mean_rel_rho, r.mean_rel_t1, r.mean_rel_t2, r.data_residual, r.iterations
        );
    }
    s
}

pub fn export_csv(path: &Path, rows: &[MetricsRow], config_hash: &str) -> Result<()> {
    std::fs::write(path, metrics_csv(rows, config_hash))?;
    Ok(())
}

/// Reads a file written by [`export_csv`]: `(config_hash, rows)`.
pub fn read_metrics_csv(path: &Path) -> Result<(String, Vec<MetricsRow>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let hash = lines
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .ok_or_else(|| invalid(format!("{} lacks a config hash line", path.display())))?
        .to_string();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(invalid(format!("{} has an unexpected header", path.display())));
    }
    let bad = |l: &str| invalid(format!("malformed metrics row '{l}'"));
    let rows = lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(l));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(l));
            Ok(MetricsRow {
                method: f[0].to_string(),
                foreground_voxels: f[1].parse().map_err(|_| bad(l))?,
                mean_rel_rho: num(2)?,
                mean_rel_t1: num(3)?,
                mean_rel_t2: num(4)?,
                data_residual: num(5)?,
                iterations: f[6].parse().map_err(|_| bad(l))?,
            })
        })
        .collect::<Result<_>>()?;
    Ok((hash, rows))
}
