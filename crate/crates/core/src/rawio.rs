//! Raw little-endian arrays with a JSON sidecar header.
//!
//! `name.bin` holds the values, `name.json` holds
//! `{"dtype", "shape", "order": "row-major", "complex", "meta"?}`.
//! Complex arrays interleave `(re, im)`; `shape` never includes the
//! interleaving axis.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::grid::Grid;
use crate::params::ParamMap;
use crate::series::ImageSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub order: String,
    pub complex: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl RawHeader {
    pub fn new(dtype: DType, shape: Vec<usize>, complex: bool) -> Self {
        RawHeader { dtype, shape, order: "row-major".into(), complex, meta: None }
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn element_count(&self) -> usize {
        self.shape.iter().product::<usize>() * if self.complex { 2 } else { 1 }
    }

    pub fn meta_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .as_ref()
            .and_then(|m| m.get(key))
            .ok_or_else(|| invalid(format!("raw header is missing meta field '{key}'")))?;
        Ok(serde_json::from_value(v.clone())?)
    }
}

/// Path of the data file for a base path (`foo`, `foo.bin` or `foo.json`).
pub fn data_path(base: &Path) -> PathBuf {
    with_suffix(base, "bin")
}

pub fn header_path(base: &Path) -> PathBuf {
    with_suffix(base, "json")
}

/// `dir/name_tag` for a base path `dir/name[.bin|.json]`.
pub fn sibling(base: &Path, tag: &str) -> PathBuf {
    let stem = with_suffix(base, "bin").with_extension("");
    let mut s = stem.into_os_string();
    s.push("_");
    s.push(tag);
    PathBuf::from(s)
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let stem = match base.extension().and_then(|e| e.to_str()) {
        Some("bin" | "json") => base.with_extension(""),
        _ => base.to_path_buf(),
    };
    let mut s = stem.into_os_string();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn encode(values: &[f64], dtype: DType) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(values.len() * dtype.size());
    match dtype {
        DType::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
        DType::U8 => {
            for &v in values {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(invalid(format!("value {v} does not fit u8")));
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8], dtype: DType) -> Vec<f64> {
    match dtype {
        DType::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        DType::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        DType::U8 => bytes.iter().map(|&b| b as f64).collect(),
    }
}

pub fn write_header(base: &Path, header: &RawHeader) -> Result<()> {
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(header_path(base), text)?;
    Ok(())
}

pub fn read_header(base: &Path) -> Result<RawHeader> {
    let text = fs::read_to_string(header_path(base))?;
    let h: RawHeader = serde_json::from_str(&text)?;
    if h.order != "row-major" {
        return Err(invalid(format!("unsupported array order '{}'", h.order)));
    }
    Ok(h)
}

/// Writes real values; `header.complex` must be false.
pub fn write_real(base: &Path, header: &RawHeader, values: &[f64]) -> Result<()> {
    if header.complex {
        return Err(invalid("write_real called with a complex header"));
    }
    if header.element_count() != values.len() {
        return Err(shape(format!("header shape {:?} does not match {} values", header.shape, values.len())));
    }
    fs::write(data_path(base), encode(values, header.dtype)?)?;
    write_header(base, header)
}

pub fn write_complex(base: &Path, header: &RawHeader, values: &[Complex64]) -> Result<()> {
    if !header.complex {
        return Err(invalid("write_complex called with a real header"));
    }
    if header.element_count() != 2 * values.len() {
        return Err(shape(format!("header shape {:?} does not match {} values", header.shape, values.len())));
    }
    let flat: Vec<f64> = values.iter().flat_map(|z| [z.re, z.im]).collect();
    fs::write(data_path(base), encode(&flat, header.dtype)?)?;
    write_header(base, header)
}

fn read_values(base: &Path) -> Result<(RawHeader, Vec<f64>)> {
    let h = read_header(base)?;
    let bytes = fs::read(data_path(base))?;
    if bytes.len() != h.element_count() * h.dtype.size() {
        return Err(Error::ShapeMismatch(format!(
            "{}: {} bytes on disk, header expects {}",
            data_path(base).display(),
            bytes.len(),
            h.element_count() * h.dtype.size()
        )));
    }
    let v = decode(&bytes, h.dtype);
    Ok((h, v))
}

pub fn read_real(base: &Path) -> Result<(RawHeader, Vec<f64>)> {
    let (h, v) = read_values(base)?;
    if h.complex {
        return Err(invalid(format!("{} holds complex data", base.display())));
    }
    Ok((h, v))
}

pub fn read_complex(base: &Path) -> Result<(RawHeader, Vec<Complex64>)> {
    let (h, v) = read_values(base)?;
    if !h.complex {
        return Err(invalid(format!("{} holds real data", base.display())));
    }
    Ok((h, v.chunks_exact(2).map(|c| Complex64::new(c[0], c[1])).collect()))
}

/// Packs booleans LSB-first into bytes.
pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub fn unpack_bits(bytes: &[u8], n: usize) -> Result<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return Err(shape(format!("{} packed bytes cannot hold exactly {n} bits", bytes.len())));
    }
    Ok((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn write_bitmap(base: &Path, header: &RawHeader, bits: &[bool]) -> Result<()> {
    if header.dtype != DType::U8 {
        return Err(invalid("bitmaps are stored as u8"));
    }
    let n: usize = header.shape.iter().product();
    if n != bits.len() {
        return Err(shape(format!("bitmap shape {:?} does not match {} bits", header.shape, bits.len())));
    }
    fs::write(data_path(base), pack_bits(bits))?;
    write_header(base, header)
}

pub fn read_bitmap(base: &Path) -> Result<(RawHeader, Vec<bool>)> {
    let h = read_header(base)?;
    let n: usize = h.shape.iter().product();
    let bytes = fs::read(data_path(base))?;
    let bits = unpack_bits(&bytes, n)?;
    Ok((h, bits))
}

/// Writes an image series as a `[L, ny, nx]` complex array.
pub fn save_series(base: &Path, u: &ImageSeries) -> Result<()> {
    let h = RawHeader::new(DType::F64, vec![u.frames, u.grid.ny, u.grid.nx], true)
        .with_meta(serde_json::json!({ "kind": "image_series" }));
    write_complex(base, &h, &u.data)
}

pub fn load_series(base: &Path) -> Result<ImageSeries> {
    let (h, data) = read_complex(base)?;
    let [frames, ny, nx] = h.shape[..] else {
        return Err(shape("image series must have shape [frames, ny, nx]"));
    };
    ImageSeries::new(Grid::new(nx, ny)?, frames, data)
}

/// Writes a parameter map as a `[3, ny, nx]` real array (rho, T1, T2).
pub fn save_param_map(base: &Path, q: &ParamMap, extra: Option<serde_json::Value>) -> Result<()> {
    let mut meta = serde_json::json!({ "kind": "param_map", "channels": ["rho", "t1", "t2"] });
    if let (Some(serde_json::Value::Object(e)), serde_json::Value::Object(m)) = (extra, &mut meta) {
        m.extend(e);
    }
    let h = RawHeader::new(DType::F64, vec![3, q.grid.ny, q.grid.nx], false).with_meta(meta);
    let flat: Vec<f64> = q.rho.iter().chain(&q.t1).chain(&q.t2).copied().collect();
    write_real(base, &h, &flat)
}

pub fn load_param_map(base: &Path) -> Result<ParamMap> {
    let (h, flat) = read_real(base)?;
    let [3, ny, nx] = h.shape[..] else {
        return Err(shape("parameter map must have shape [3, ny, nx]"));
    };
    let n = nx * ny;
    ParamMap::new(Grid::new(nx, ny)?, flat[..n].to_vec(), flat[n..2 * n].to_vec(), flat[2 * n..].to_vec())
}

/// Writes a real `[ny, nx]` image.
pub fn save_image(base: &Path, grid: Grid, values: &[f64], meta: serde_json::Value) -> Result<()> {
    let h = RawHeader::new(DType::F64, vec![grid.ny, grid.nx], false).with_meta(meta);
    write_real(base, &h, values)
}

/// Reads a real array of shape `[ny, nx]` (or `[n]` with `n = ny*nx`) for the grid.
pub fn load_image(base: &Path, grid: Grid) -> Result<Vec<f64>> {
    let (h, v) = read_real(base)?;
    if v.len() != grid.len() || (h.shape.len() == 2 && h.shape != [grid.ny, grid.nx]) {
        return Err(shape(format!("image of shape {:?} does not fit a {}x{} grid", h.shape, grid.ny, grid.nx)));
    }
    Ok(v)
}
