use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::Grid;

/// `L` complex image frames on a common grid, stored frame-major:
/// `data[frame * grid.len() + voxel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSeries {
    pub grid: Grid,
    pub frames: usize,
    pub data: Vec<Complex64>,
}

impl ImageSeries {
    pub fn new(grid: Grid, frames: usize, data: Vec<Complex64>) -> Result<Self> {
        if frames == 0 {
            return Err(invalid("an image series needs at least one frame"));
        }
        if data.len() != frames * grid.len() {
            return Err(shape(format!("{} values for {frames} frames of {} voxels", data.len(), grid.len())));
        }
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("image series contains non-finite values"));
        }
        Ok(ImageSeries { grid, frames, data })
    }

    pub fn zeros(grid: Grid, frames: usize) -> Self {
        ImageSeries { grid, frames, data: vec![Complex64::new(0.0, 0.0); frames * grid.len()] }
    }

    #[inline]
    pub fn frame(&self, l: usize) -> &[Complex64] {
        let n = self.grid.len();
        &self.data[l * n..(l + 1) * n]
    }

    #[inline]
    pub fn frame_mut(&mut self, l: usize) -> &mut [Complex64] {
        let n = self.grid.len();
        &mut self.data[l * n..(l + 1) * n]
    }

    /// Time series of one voxel.
    pub fn voxel_series(&self, i: usize) -> Vec<Complex64> {
        let n = self.grid.len();
        (0..self.frames).map(|l| self.data[l * n + i]).collect()
    }

    pub fn set_voxel_series(&mut self, i: usize, s: &[Complex64]) {
        let n = self.grid.len();
        for (l, &z) in s.iter().enumerate() {
            self.data[l * n + i] = z;
        }
    }

    /// Voxel-major copy: `out[i * frames + l]`.
    pub fn to_voxel_major(&self) -> Vec<Complex64> {
        let n = self.grid.len();
        let mut out = vec![Complex64::new(0.0, 0.0); self.data.len()];
        for l in 0..self.frames {
            for i in 0..n {
                out[i * self.frames + l] = self.data[l * n + i];
            }
        }
        out
    }

    pub fn from_voxel_major(grid: Grid, frames: usize, vm: &[Complex64]) -> Self {
        let n = grid.len();
        let mut data = vec![Complex64::new(0.0, 0.0); vm.len()];
        for i in 0..n {
            for l in 0..frames {
                data[l * n + i] = vm[i * frames + l];
            }
        }
        ImageSeries { grid, frames, data }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }
}

/// Binary sampling mask over the full (unshifted) Fourier grid.
///
/// Row `ky = 0` holds the DC line; k-space uses the standard FFT layout
/// without a centering shift.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub grid: Grid,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn new(grid: Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(shape(format!("mask has {} entries, grid has {}", bits.len(), grid.len())));
        }
        Ok(Mask { grid, bits })
    }

    pub fn full(grid: Grid) -> Self {
        Mask { grid, bits: vec![true; grid.len()] }
    }

    pub fn empty(grid: Grid) -> Self {
        Mask { grid, bits: vec![false; grid.len()] }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// Sampled linear indices in ascending (row-major) order.
    pub fn sampled(&self) -> Vec<usize> {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
    }

    /// Keeps the listed k-space rows (all `kx`).
    pub fn from_rows(grid: Grid, rows: &[usize]) -> Self {
        let mut bits = vec![false; grid.len()];
        for &r in rows {
            bits[r * grid.nx..(r + 1) * grid.nx].iter_mut().for_each(|b| *b = true);
        }
        Mask { grid, bits }
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Subsampled k-space: per frame, the coefficients at the sampled locations of
/// that frame's mask, in ascending row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceData {
    pub grid: Grid,
    pub masks: Vec<Mask>,
    pub coeffs: Vec<Vec<Complex64>>,
}

impl KSpaceData {
    pub fn new(grid: Grid, masks: Vec<Mask>, coeffs: Vec<Vec<Complex64>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(invalid("k-space data needs at least one frame"));
        }
        if masks.len() != coeffs.len() {
            return Err(shape(format!("{} masks for {} coefficient frames", masks.len(), coeffs.len())));
        }
        for (l, (m, c)) in masks.iter().zip(&coeffs).enumerate() {
            if m.grid != grid {
                return Err(shape(format!("mask {l} grid differs from data grid")));
            }
            if m.popcount() != c.len() {
                return Err(shape(format!(
                    "frame {l}: {} coefficients but mask samples {}",
                    c.len(),
                    m.popcount()
                )));
            }
        }
        Ok(KSpaceData { grid, masks, coeffs })
    }

    #[inline]
    pub fn frames(&self) -> usize {
        self.masks.len()
    }

    pub fn sample_count(&self) -> usize {
        self.coeffs.iter().map(Vec::len).sum()
    }

    pub fn norm(&self) -> f64 {
        self.coeffs.iter().flatten().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `sqrt(sum |self - other|^2)` over sampled locations.
    pub fn distance(&self, other: &KSpaceData) -> Result<f64> {
        if self.masks != other.masks {
            return Err(shape("k-space data sets use different masks"));
        }
        Ok(self
            .coeffs
            .iter()
            .flatten()
            .zip(other.coeffs.iter().flatten())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt())
    }

    pub fn scaled(&self, c: f64) -> KSpaceData {
        KSpaceData {
            grid: self.grid,
            masks: self.masks.clone(),
            coeffs: self.coeffs.iter().map(|f| f.iter().map(|z| z * c).collect()).collect(),
        }
    }
}
