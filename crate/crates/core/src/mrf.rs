//! Dictionary matching (MRF) and the BLIP projected Landweber iteration.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::FingerprintDictionary;
use crate::error::{invalid, shape, Result};
use crate::forward::FourierOp;
use crate::params::ParamMap;
use crate::series::{ImageSeries, KSpaceData};

/// Voxels matched per GEMM block.
const BLOCK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchResult {
    pub t1: f64,
    pub t2: f64,
    pub rho: f64,
    /// `Re <u, b_hat>` of the winning entry.
    pub correlation: f64,
    pub dict_index: usize,
}

impl MatchResult {
    fn from_best(dict: &FingerprintDictionary, unorm: f64, j: usize, corr: f64) -> Self {
        let (t1, t2) = dict.params[j];
        let rho = if corr > 0.0 { unorm / dict.entries[j].norm } else { 0.0 };
        MatchResult { t1, t2, rho, correlation: corr, dict_index: j }
    }

    /// The matched series `correlation^+ * b_hat`: the Euclidean projection
    /// of the input onto the cone spanned by the dictionary.
    pub fn projection(&self, dict: &FingerprintDictionary) -> Vec<Complex64> {
        let c = self.correlation.max(0.0);
        dict.normalized_entry(self.dict_index).iter().map(|z| z * c).collect()
    }
}

fn check_dict(dict: &FingerprintDictionary, frames: usize) -> Result<()> {
    if dict.is_empty() {
        return Err(invalid("dictionary is empty"));
    }
    if dict.frames() != frames {
        return Err(shape(format!("series has {frames} frames, dictionary has {}", dict.frames())));
    }
    Ok(())
}

/// Best entry for one voxel series: maximizes `Re <u, b_hat>`, smallest
/// index on ties; `rho = ||u|| / ||B||`, or 0 when no entry correlates
/// positively.
pub fn mrf_match(series: &[Complex64], dict: &FingerprintDictionary) -> Result<MatchResult> {
    check_dict(dict, series.len())?;
    let mut best = (0usize, f64::NEG_INFINITY);
    for j in 0..dict.len() {
        let c = crate::linalg::cdot_re(series, dict.normalized_entry(j));
        if c > best.1 {
            best = (j, c);
        }
    }
    Ok(MatchResult::from_best(dict, crate::linalg::cnorm(series), best.0, best.1))
}

/// Matches many voxel series (voxel-major, `frames` each) with one matrix
/// product per block of voxels.
pub fn match_voxels(vm: &[Complex64], frames: usize, dict: &FingerprintDictionary) -> Result<Vec<MatchResult>> {
    check_dict(dict, frames)?;
    let n = dict.len();
    let k = 2 * frames;
    let bhat = dict.normalized();
    let results: Vec<Vec<MatchResult>> = vm
        .par_chunks(BLOCK * frames)
        .map(|block| {
            let m = block.len() / frames;
            let mut c = vec![0.0f64; m * n];
            // SAFETY: Complex64 is repr(C) {re, im}, so a slice of m*frames
            // complex values is m rows of 2*frames contiguous f64; the
            // strides below stay inside `block`, `bhat` and `c`.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    block.as_ptr() as *const f64,
                    k as isize,
                    1,
                    bhat.as_ptr() as *const f64,
                    1,
                    k as isize,
                    0.0,
                    c.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            (0..m)
                .map(|v| {
                    let row = &c[v * n..(v + 1) * n];
                    let mut best = (0usize, f64::NEG_INFINITY);
                    for (j, &cj) in row.iter().enumerate() {
                        if cj > best.1 {
                            best = (j, cj);
                        }
                    }
                    let u = &block[v * frames..(v + 1) * frames];
                    MatchResult::from_best(dict, crate::linalg::cnorm(u), best.0, best.1)
                })
                .collect()
        })
        .collect();
    Ok(results.into_iter().flatten().collect())
}

pub fn match_series(u: &ImageSeries, dict: &FingerprintDictionary) -> Result<Vec<MatchResult>> {
    match_voxels(&u.to_voxel_major(), u.frames, dict)
}

pub fn matches_to_map(u: &ImageSeries, matches: &[MatchResult]) -> ParamMap {
    let voxels: Vec<[f64; 3]> = matches.iter().map(|m| [m.rho, m.t1, m.t2]).collect();
    ParamMap::from_voxels(u.grid, &voxels).expect("matches are finite and one per voxel")
}

/// Zero filling followed by voxelwise matching.
pub fn mrf_reconstruct(y: &KSpaceData, dict: &FingerprintDictionary) -> Result<ParamMap> {
    check_dict(dict, y.frames())?;
    let u = crate::forward::zero_fill(y);
    let m = match_series(&u, dict)?;
    Ok(matches_to_map(&u, &m))
}

/// Projects every voxel series onto the dictionary cone.
pub fn project_series(v: &ImageSeries, dict: &FingerprintDictionary) -> Result<(ImageSeries, Vec<MatchResult>)> {
    let matches = match_series(v, dict)?;
    let vm: Vec<Complex64> = matches.iter().flat_map(|m| m.projection(dict)).collect();
    Ok((ImageSeries::from_voxel_major(v.grid, v.frames, &vm), matches))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlipConfig {
    pub steps: usize,
    pub mu: f64,
}

impl Default for BlipConfig {
    fn default() -> Self {
        BlipConfig { steps: 50, mu: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct BlipResult {
    pub map: ParamMap,
    pub series: ImageSeries,
    /// `||A u_k - y||` for `k = 0..=steps`.
    pub residuals: Vec<f64>,
}

/// Projected Landweber: `v = u - mu A^H (A u - y)`, then `u` becomes the
/// projection of `v` onto the dictionary cone and the map is the match of
/// `v`. Starts from the zero fill (or `init`). With `mu <= 1` the data
/// residual is non-increasing.
pub fn blip_reconstruct(
    y: &KSpaceData,
    dict: &FingerprintDictionary,
    cfg: BlipConfig,
    init: Option<&ImageSeries>,
) -> Result<BlipResult> {
    if !(cfg.mu > 0.0 && cfg.mu < 2.0) {
        return Err(invalid(format!("BLIP step size must lie in (0, 2), got {}", cfg.mu)));
    }
    check_dict(dict, y.frames())?;
    let op = FourierOp::for_data(y);
    let v0 = match init {
        Some(u) => {
            if u.grid != y.grid || u.frames != y.frames() {
                return Err(shape("initial series does not match the data"));
            }
            u.clone()
        }
        None => op.adjoint(y)?,
    };
    let (mut u, mut matches) = project_series(&v0, dict)?;
    let mut residuals = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (g, r) = op.gradient(&u, y)?;
        residuals.push(r);
        let mut v = u;
        v.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a -= b * cfg.mu);
        (u, matches) = project_series(&v, dict)?;
    }
    residuals.push(op.gradient(&u, y)?.1);
    if residuals.iter().any(|r| !r.is_finite()) {
        return Err(crate::error::numerical("BLIP residual became non-finite"));
    }
    let map = matches_to_map(&u, &matches);
    Ok(BlipResult { map, series: u, residuals })
}
