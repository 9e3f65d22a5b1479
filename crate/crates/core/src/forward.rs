//! The measurement operator `A = P F`: per-frame unitary 2D FFT followed by
//! Cartesian row subsampling, its adjoint (zero filling), mask generation and
//! measurement noise.

use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::Grid;
use crate::rawio::{self, DType, RawHeader};
use crate::rng::{domain, SeededRng};
use crate::series::{ImageSeries, KSpaceData, Mask};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Unitary 2D FFT on a fixed grid (`1/sqrt(nx ny)` in both directions).
#[derive(Clone)]
pub struct Fft2 {
    grid: Grid,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("grid", &self.grid).finish()
    }
}

impl Fft2 {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            grid,
            row_fwd: planner.plan_fft_forward(grid.nx),
            row_inv: planner.plan_fft_inverse(grid.nx),
            col_fwd: planner.plan_fft_forward(grid.ny),
            col_inv: planner.plan_fft_inverse(grid.ny),
            scale: 1.0 / (grid.len() as f64).sqrt(),
        }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn run(&self, buf: &mut [Complex64], inverse: bool) {
        assert_eq!(buf.len(), self.grid.len(), "FFT buffer does not match grid");
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let (rows, cols) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        rows.process(buf);
        if ny > 1 {
            let mut t = vec![ZERO; buf.len()];
            for y in 0..ny {
                for x in 0..nx {
                    t[x * ny + y] = buf[y * nx + x];
                }
            }
            cols.process(&mut t);
            for y in 0..ny {
                for x in 0..nx {
                    buf[y * nx + x] = t[x * ny + y];
                }
            }
        }
        buf.iter_mut().for_each(|z| *z *= self.scale);
    }

    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, false);
    }

    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, true);
    }
}

pub fn fft2_unitary(grid: Grid, image: &[Complex64]) -> Vec<Complex64> {
    let mut b = image.to_vec();
    Fft2::new(grid).forward(&mut b);
    b
}

pub fn ifft2_unitary(grid: Grid, kspace: &[Complex64]) -> Vec<Complex64> {
    let mut b = kspace.to_vec();
    Fft2::new(grid).inverse(&mut b);
    b
}

/// Per-frame Cartesian masks with their nominal undersampling factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPattern {
    pub factor: usize,
    pub masks: Vec<Mask>,
}

impl SamplingPattern {
    pub fn full(grid: Grid, frames: usize) -> Self {
        SamplingPattern { factor: 1, masks: vec![Mask::full(grid); frames] }
    }

    pub fn frames(&self) -> usize {
        self.masks.len()
    }
}

/// Keeps `ceil(ny / factor)` k-space rows per frame: the DC row plus rows
/// drawn without replacement from the seeded mask stream. With
/// `complementary` every frame draws its own rows; otherwise all frames
/// share frame 0's rows.
pub fn make_cartesian_masks(
    grid: Grid,
    factor: usize,
    frames: usize,
    seed: u64,
    complementary: bool,
) -> Result<SamplingPattern> {
    if factor == 0 || factor > grid.ny {
        return Err(invalid(format!("undersampling factor {factor} must lie in [1, {}]", grid.ny)));
    }
    if frames == 0 {
        return Err(invalid("need at least one frame"));
    }
    let keep = grid.ny.div_ceil(factor);
    let rng = SeededRng::new(seed);
    let masks = (0..frames)
        .map(|l| {
            let stream = domain::MASKS + if complementary { l as u64 } else { 0 };
            let mut r = rng.stream(stream);
            let mut rows = vec![0usize];
            rows.extend(sample(&mut r, grid.ny - 1, keep - 1).into_iter().map(|k| k + 1));
            Mask::from_rows(grid, &rows)
        })
        .collect();
    Ok(SamplingPattern { factor, masks })
}

/// `A` and `A^H` for a fixed set of masks, with the FFT plans cached.
#[derive(Debug, Clone)]
pub struct FourierOp {
    fft: Fft2,
    masks: Vec<Mask>,
    sampled: Vec<Vec<usize>>,
}

impl FourierOp {
    pub fn new(grid: Grid, masks: Vec<Mask>) -> Result<Self> {
        if masks.is_empty() {
            return Err(invalid("operator needs at least one frame"));
        }
        if let Some(l) = masks.iter().position(|m| m.grid != grid) {
            return Err(shape(format!("mask {l} does not match the grid")));
        }
        let sampled = masks.iter().map(Mask::sampled).collect();
        Ok(FourierOp { fft: Fft2::new(grid), masks, sampled })
    }

    pub fn for_data(y: &KSpaceData) -> Self {
        FourierOp::new(y.grid, y.masks.clone()).expect("k-space data is validated at construction")
    }

    pub fn grid(&self) -> Grid {
        self.fft.grid
    }

    pub fn frames(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    pub fn forward_frame(&self, l: usize, image: &[Complex64]) -> Vec<Complex64> {
        let mut b = image.to_vec();
        self.fft.forward(&mut b);
        self.sampled[l].iter().map(|&k| b[k]).collect()
    }

    pub fn adjoint_frame(&self, l: usize, coeffs: &[Complex64]) -> Vec<Complex64> {
        let mut b = vec![ZERO; self.grid().len()];
        for (&k, &c) in self.sampled[l].iter().zip(coeffs) {
            b[k] = c;
        }
        self.fft.inverse(&mut b);
        b
    }

    pub fn forward(&self, u: &ImageSeries) -> Result<KSpaceData> {
        self.check_series(u)?;
        let coeffs = (0..u.frames).into_par_iter().map(|l| self.forward_frame(l, u.frame(l))).collect();
        Ok(KSpaceData { grid: self.grid(), masks: self.masks.clone(), coeffs })
    }

    pub fn adjoint(&self, y: &KSpaceData) -> Result<ImageSeries> {
        if y.masks != self.masks {
            return Err(shape("k-space masks differ from the operator's masks"));
        }
        let frames: Vec<Vec<Complex64>> =
            (0..y.frames()).into_par_iter().map(|l| self.adjoint_frame(l, &y.coeffs[l])).collect();
        Ok(ImageSeries { grid: self.grid(), frames: y.frames(), data: frames.concat() })
    }

    /// `A^H (A u - y)` together with `||A u - y||`.
    pub fn gradient(&self, u: &ImageSeries, y: &KSpaceData) -> Result<(ImageSeries, f64)> {
        self.check_series(u)?;
        let parts: Vec<(Vec<Complex64>, f64)> = (0..u.frames)
            .into_par_iter()
            .map(|l| {
                let mut r = self.forward_frame(l, u.frame(l));
                r.iter_mut().zip(&y.coeffs[l]).for_each(|(a, b)| *a -= b);
                let n2 = r.iter().map(|z| z.norm_sqr()).sum::<f64>();
                (self.adjoint_frame(l, &r), n2)
            })
            .collect();
        let n2: f64 = parts.iter().map(|p| p.1).sum();
        let data = parts.into_iter().flat_map(|p| p.0).collect();
        Ok((ImageSeries { grid: self.grid(), frames: u.frames, data }, n2.sqrt()))
    }

    fn check_series(&self, u: &ImageSeries) -> Result<()> {
        if u.grid != self.grid() || u.frames != self.frames() {
            return Err(shape(format!(
                "series is {}x{}x{}, operator expects {}x{}x{}",
                u.frames,
                u.grid.ny,
                u.grid.nx,
                self.frames(),
                self.grid().ny,
                self.grid().nx
            )));
        }
        Ok(())
    }
}

pub fn apply_forward(u: &ImageSeries, pat: &SamplingPattern) -> Result<KSpaceData> {
    FourierOp::new(u.grid, pat.masks.clone())?.forward(u)
}

pub fn apply_adjoint(y: &KSpaceData) -> ImageSeries {
    FourierOp::for_data(y).adjoint(y).expect("masks match by construction")
}

/// The pseudo-inverse `A^dagger`; equals the adjoint under the unitary FFT.
pub fn zero_fill(y: &KSpaceData) -> ImageSeries {
    apply_adjoint(y)
}

/// Adds i.i.d. complex Gaussian noise (std `sigma` per real component) at
/// the sampled locations. Frame `l` draws from its own noise stream.
pub fn add_noise(y: &KSpaceData, sigma: f64, seed: u64) -> Result<KSpaceData> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("noise level must be finite and nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(y.clone());
    }
    let rng = SeededRng::new(seed);
    let coeffs = y
        .coeffs
        .iter()
        .enumerate()
        .map(|(l, frame)| {
            let mut r = rng.stream(domain::NOISE + l as u64);
            frame
                .iter()
                .map(|z| {
                    let re: f64 = StandardNormal.sample(&mut r);
                    let im: f64 = StandardNormal.sample(&mut r);
                    z + Complex64::new(sigma * re, sigma * im)
                })
                .collect()
        })
        .collect();
    Ok(KSpaceData { grid: y.grid, masks: y.masks.clone(), coeffs })
}

/// Robust noise estimate from the outer (high-frequency) half of the sampled
/// k-space: median absolute value of the real and imaginary parts / 0.6745.
pub fn estimate_noise_sigma(y: &KSpaceData) -> f64 {
    let g = y.grid;
    let radius = |k: usize| {
        let (kx, ky) = g.coords(k);
        let fx = kx.min(g.nx - kx) as f64 / (g.nx as f64 / 2.0).max(1.0);
        let fy = ky.min(g.ny - ky) as f64 / (g.ny as f64 / 2.0).max(1.0);
        fx.max(fy)
    };
    let mut parts: Vec<f64> = Vec::new();
    for (m, c) in y.masks.iter().zip(&y.coeffs) {
        for (&k, z) in m.sampled().iter().zip(c) {
            if radius(k) >= 0.5 {
                parts.push(z.re.abs());
                parts.push(z.im.abs());
            }
        }
    }
    if parts.is_empty() {
        return 0.0;
    }
    parts.sort_by(f64::total_cmp);
    let n = parts.len();
    let med = if n % 2 == 1 { parts[n / 2] } else { 0.5 * (parts[n / 2 - 1] + parts[n / 2]) };
    med / 0.674_489_750_196_081_7
}

/// Writes the coefficients embedded in full `[L, ny, nx]` k-space (zeros off
/// the mask) to `base`, and the packed masks to `base.mask`.
pub fn save_kspace(base: &Path, y: &KSpaceData) -> Result<()> {
    let g = y.grid;
    let mask_base = rawio::sibling(base, "mask");
    let mask_name = mask_base.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let header = RawHeader::new(DType::F64, vec![y.frames(), g.ny, g.nx], true)
        .with_meta(serde_json::json!({ "kind": "kspace", "mask": mask_name }));
    let mut full = vec![ZERO; y.frames() * g.len()];
    for (l, (m, c)) in y.masks.iter().zip(&y.coeffs).enumerate() {
        for (&k, &z) in m.sampled().iter().zip(c) {
            full[l * g.len() + k] = z;
        }
    }
    rawio::write_complex(base, &header, &full)?;
    let bits: Vec<bool> = y.masks.iter().flat_map(|m| m.bits.iter().copied()).collect();
    let mh = RawHeader::new(DType::U8, vec![y.frames(), g.ny, g.nx], false)
        .with_meta(serde_json::json!({ "kind": "mask", "packing": "lsb-first" }));
    rawio::write_bitmap(&mask_base, &mh, &bits)
}

pub fn load_kspace(base: &Path) -> Result<KSpaceData> {
    let (h, full) = rawio::read_complex(base)?;
    let [frames, ny, nx] = h.shape[..] else {
        return Err(shape("k-space array must have shape [frames, ny, nx]"));
    };
    let g = Grid::new(nx, ny)?;
    let mask_name: String = h.meta_field("mask")?;
    let mask_base = base.with_file_name(mask_name);
    let (mh, bits) = rawio::read_bitmap(&mask_base)?;
    if mh.shape != h.shape {
        return Err(shape("mask shape differs from k-space shape"));
    }
    let mut masks = Vec::with_capacity(frames);
    let mut coeffs = Vec::with_capacity(frames);
    for l in 0..frames {
        let m = Mask::new(g, bits[l * g.len()..(l + 1) * g.len()].to_vec())?;
        coeffs.push(m.sampled().iter().map(|&k| full[l * g.len() + k]).collect());
        masks.push(m);
    }
    KSpaceData::new(g, masks, coeffs)
}
