//! Adaptive weights smoothing of vector-valued maps with known per-voxel
//! covariance (Gaussian propagation-separation), optionally patchwise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::estatics::{derive_r1_pd, EstaticsFit, RelaxationMaps};
use crate::error::{invalid, shape, Result};
use crate::grid::Grid;
use crate::linalg::inv_spd3;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AwsConfig {
    /// Adaptation parameter.
    pub lambda: f64,
    /// Final bandwidth in voxels.
    pub hmax: f64,
    /// Bandwidths grow as `growth^(k/2)`.
    pub growth: f64,
    /// Half-width of the comparison patch; 0 compares single voxels.
    pub patch_radius: usize,
}

/// Calibrated on pure-noise constant maps, see the propagation test.
pub const DEFAULT_LAMBDA: f64 = 50.0;

impl Default for AwsConfig {
    fn default() -> Self {
        AwsConfig { lambda: DEFAULT_LAMBDA, hmax: 4.0, growth: 1.25, patch_radius: 0 }
    }
}

impl AwsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(invalid(format!("adaptation parameter must be positive, got {}", self.lambda)));
        }
        if !(self.hmax >= 1.0) || !self.hmax.is_finite() {
            return Err(invalid(format!("maximal bandwidth must be at least 1, got {}", self.hmax)));
        }
        if !(self.growth > 1.0) || !self.growth.is_finite() {
            return Err(invalid("bandwidth growth must exceed 1"));
        }
        Ok(())
    }

    /// `h_k = growth^(k/2)` for `k = 1..`, the last one clipped to `hmax`.
    pub fn bandwidths(&self) -> Vec<f64> {
        let mut hs = Vec::new();
        let mut k = 1;
        loop {
            let h = self.growth.powf(k as f64 / 2.0);
            if h >= self.hmax {
                hs.push(self.hmax);
                return hs;
            }
            hs.push(h);
            k += 1;
        }
    }
}

#[inline]
pub fn location_kernel(x: f64) -> f64 {
    (1.0 - x * x).max(0.0)
}

#[inline]
pub fn stat_kernel(s: f64) -> f64 {
    (1.0 - s).max(0.0)
}

fn quad(inv: &Mat3, d: Vec3) -> f64 {
    let mut s = 0.0;
    for a in 0..3 {
        for b in 0..3 {
            s += d[a] * inv[a][b] * d[b];
        }
    }
    s
}

/// State shared by one smoothing step.
pub struct Step<'a> {
    pub grid: Grid,
    pub theta: &'a [Vec3],
    pub n: &'a [f64],
    pub inv: &'a [Option<Mat3>],
    pub active: &'a [bool],
    pub h: f64,
    pub lambda: f64,
    pub patch_radius: usize,
}

impl Step<'_> {
    fn shifted(&self, i: usize, dx: isize, dy: isize) -> Option<usize> {
        let (x, y) = self.grid.coords(i);
        let (xs, ys) = (x as isize + dx, y as isize + dy);
        if xs < 0 || ys < 0 || xs >= self.grid.nx as isize || ys >= self.grid.ny as isize {
            return None;
        }
        let j = self.grid.index(xs as usize, ys as usize);
        self.active[j].then_some(j)
    }

    /// Statistical penalty between voxels `i` and `j`.
    pub fn penalty(&self, i: usize, j: usize) -> f64 {
        let r = self.patch_radius as isize;
        let (xi, yi) = self.grid.coords(i);
        let (xj, yj) = self.grid.coords(j);
        let (sx, sy) = (xj as isize - xi as isize, yj as isize - yi as isize);
        let mut s = 0.0f64;
        for oy in -r..=r {
            for ox in -r..=r {
                let Some(a) = self.shifted(i, ox, oy) else { continue };
                let Some(b) = self.shifted(a, sx, sy) else { continue };
                let Some(inv) = &self.inv[a] else { continue };
                let d = [0, 1, 2].map(|k| self.theta[a][k] - self.theta[b][k]);
                s = s.max(self.n[a] * quad(inv, d) / self.lambda);
            }
        }
        s
    }

    /// Nonzero weights `(j, w_ij)` of voxel `i`, in raster order.
    pub fn weights(&self, i: usize) -> Vec<(usize, f64)> {
        let reach = self.h.ceil() as isize;
        let mut out = Vec::new();
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let kl = location_kernel(((dx * dx + dy * dy) as f64).sqrt() / self.h);
                if kl <= 0.0 {
                    continue;
                }
                let Some(j) = self.shifted(i, dx, dy) else { continue };
                let w = kl * stat_kernel(self.penalty(i, j));
                if w > 0.0 {
                    out.push((j, w));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwsResult {
    pub theta: Vec<Vec3>,
    /// Sum of weights per voxel after the last step.
    pub n: Vec<f64>,
    /// Estimates and weight sums entering the last step.
    pub prev_theta: Vec<Vec3>,
    pub prev_n: Vec<f64>,
    pub bandwidths: Vec<f64>,
    /// Voxels with singular covariance, smoothed without adaptation.
    pub nonadaptive: Vec<bool>,
}

/// `mask` marks voxels taking part; others keep their input value and are
/// never used as neighbours.
pub fn aws_smooth(
    grid: Grid,
    theta0: &[Vec3],
    cov: &[Mat3],
    mask: Option<&[bool]>,
    cfg: &AwsConfig,
) -> Result<AwsResult> {
    cfg.validate()?;
    let n = grid.len();
    if theta0.len() != n || cov.len() != n || mask.is_some_and(|m| m.len() != n) {
        return Err(shape("smoothing inputs do not match grid"));
    }
    let active: Vec<bool> = mask.map(|m| m.to_vec()).unwrap_or_else(|| vec![true; n]);
    let inv: Vec<Option<Mat3>> =
        cov.iter().map(|c| if c.iter().flatten().all(|v| v.is_finite()) { inv_spd3(*c) } else { None }).collect();
    let nonadaptive: Vec<bool> = (0..n).map(|i| active[i] && inv[i].is_none()).collect();
    let mut theta = theta0.to_vec();
    let mut nsum = vec![1.0; n];
    let (mut prev_theta, mut prev_n) = (theta.clone(), nsum.clone());
    let bandwidths = cfg.bandwidths();
    for &h in &bandwidths {
        let step = Step {
            grid,
            theta: &theta,
            n: &nsum,
            inv: &inv,
            active: &active,
            h,
            lambda: cfg.lambda,
            patch_radius: cfg.patch_radius,
        };
        let next: Vec<(Vec3, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !active[i] {
                    return (theta0[i], 1.0);
                }
                let w = step.weights(i);
                let total: f64 = w.iter().map(|p| p.1).sum();
                let mut acc = [0.0; 3];
                for &(j, wij) in &w {
                    for k in 0..3 {
                        acc[k] += wij * theta0[j][k];
                    }
                }
                (acc.map(|a| a / total), total)
            })
            .collect();
        prev_theta = std::mem::replace(&mut theta, next.iter().map(|p| p.0).collect());
        prev_n = std::mem::replace(&mut nsum, next.iter().map(|p| p.1).collect());
    }
    Ok(AwsResult { theta, n: nsum, prev_theta, prev_n, bandwidths, nonadaptive })
}

/// Nonadaptive kernel smoothing with the location kernel at bandwidth `h`.
pub fn kernel_smooth(grid: Grid, theta: &[Vec3], mask: Option<&[bool]>, h: f64) -> Vec<Vec3> {
    let n = grid.len();
    let active: Vec<bool> = mask.map(|m| m.to_vec()).unwrap_or_else(|| vec![true; n]);
    let inv = vec![None; n];
    let ones = vec![1.0; n];
    let step = Step { grid, theta, n: &ones, inv: &inv, active: &active, h, lambda: 1.0, patch_radius: 0 };
    (0..n)
        .into_par_iter()
        .map(|i| {
            if !active[i] {
                return theta[i];
            }
            let w = step.weights(i);
            let total: f64 = w.iter().map(|p| p.1).sum();
            let mut acc = [0.0; 3];
            for &(j, wij) in &w {
                for k in 0..3 {
                    acc[k] += wij * theta[j][k];
                }
            }
            acc.map(|a| a / total)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SmoothedMaps {
    pub fit: EstaticsFit,
    pub maps: RelaxationMaps,
    pub smoothing: AwsResult,
}

/// Smooths `(u_t1, u_pd, r2star)` jointly over the foreground, then derives
/// R1 and amplitude from the smoothed intercepts.
pub fn smooth_qmaps(fit: &EstaticsFit, cfg: &AwsConfig, a_t1: f64, a_pd: f64, tr: f64) -> Result<SmoothedMaps> {
    let mask: Vec<bool> = fit.background.iter().map(|b| !b).collect();
    let smoothing = aws_smooth(fit.grid, &fit.thetas(), &fit.cov, Some(&mask), cfg)?;
    let fit = fit.with_thetas(&smoothing.theta);
    let maps = derive_r1_pd(&fit, a_t1, a_pd, tr)?;
    Ok(SmoothedMaps { fit, maps, smoothing })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noisy(grid: Grid, mean: impl Fn(usize) -> Vec3, sigma: f64, seed: u64) -> Vec<Vec3> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..grid.len()).map(|i| mean(i).map(|m| m + d.sample(&mut r))).collect()
    }

    fn iso(sigma: f64, n: usize) -> Vec<Mat3> {
        let s2 = sigma * sigma;
        vec![[[s2, 0.0, 0.0], [0.0, s2, 0.0], [0.0, 0.0, s2]]; n]
    }

    #[test]
    fn bandwidths_grow_to_the_maximum() {
        let h = AwsConfig::default().bandwidths();
        assert!((h[0] - 1.25f64.sqrt()).abs() < 1e-15);
        assert_eq!(*h.last().unwrap(), 4.0);
        assert!(h.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(h.len(), 13);
    }

    #[test]
    fn infinite_lambda_is_kernel_smoothing() {
        let g = Grid::new(12, 10).unwrap();
        let th = noisy(g, |i| [i as f64 * 0.01, 1.0, -2.0], 0.3, 1);
        let cfg = AwsConfig { lambda: f64::INFINITY, ..Default::default() };
        let out = aws_smooth(g, &th, &iso(0.3, g.len()), None, &cfg).unwrap();
        let reference = kernel_smooth(g, &th, None, 4.0);
        for (a, b) in out.theta.iter().zip(&reference) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn vanishing_lambda_keeps_distinct_values() {
        let g = Grid::new(8, 8).unwrap();
        let th = noisy(g, |_| [0.0; 3], 1.0, 2);
        let cfg = AwsConfig { lambda: 1e-300, ..Default::default() };
        let out = aws_smooth(g, &th, &iso(1.0, g.len()), None, &cfg).unwrap();
        assert_eq!(out.theta, th);
    }

    #[test]
    fn weights_are_bounded_with_unit_self_weight() {
        let g = Grid::new(10, 10).unwrap();
        let th = noisy(g, |i| if i % 10 < 5 { [0.0; 3] } else { [1.0; 3] }, 0.2, 3);
        let inv: Vec<Option<Mat3>> = iso(0.2, g.len()).iter().map(|c| inv_spd3(*c)).collect();
        let n: Vec<f64> = (0..g.len()).map(|i| 1.0 + (i % 7) as f64).collect();
        let active = vec![true; g.len()];
        for patch_radius in [0, 1] {
            let step = Step { grid: g, theta: &th, n: &n, inv: &inv, active: &active, h: 3.0, lambda: 10.0, patch_radius };
            for i in 0..g.len() {
                let w = step.weights(i);
                assert!(w.iter().all(|p| p.1 > 0.0 && p.1 <= 1.0));
                assert_eq!(w.iter().find(|p| p.0 == i).unwrap().1, 1.0);
            }
        }
    }

    #[test]
    fn singular_covariance_is_nonadaptive() {
        let g = Grid::new(6, 6).unwrap();
        let th = noisy(g, |_| [0.0; 3], 1.0, 4);
        let mut cov = iso(1.0, g.len());
        cov[7] = [[0.0; 3]; 3];
        let out = aws_smooth(g, &th, &cov, None, &AwsConfig::default()).unwrap();
        assert!(out.nonadaptive[7]);
        assert_eq!(out.nonadaptive.iter().filter(|b| **b).count(), 1);
    }

    #[test]
    fn masked_voxels_are_untouched_and_ignored() {
        let g = Grid::new(8, 8).unwrap();
        let mut th = noisy(g, |_| [1.0; 3], 0.1, 5);
        let mask: Vec<bool> = (0..g.len()).map(|i| i % 8 != 0).collect();
        for i in 0..g.len() {
            if !mask[i] {
                th[i] = [1e6; 3];
            }
        }
        let out = aws_smooth(g, &th, &iso(0.1, g.len()), Some(&mask), &AwsConfig::default()).unwrap();
        for i in 0..g.len() {
            if mask[i] {
                assert!(out.theta[i][0] < 2.0);
            } else {
                assert_eq!(out.theta[i], th[i]);
            }
        }
    }

    #[test]
    fn smoothed_maps_of_a_homogeneous_fit_keep_r1() {
        use crate::aws::estatics::r1_amplitude;
        let g = Grid::new(8, 8).unwrap();
        let th = vec![[0.4, 0.9, 30.0]; g.len()];
        let cov = iso(1e-3, g.len());
        let fit = EstaticsFit {
            grid: g,
            u_t1: th.iter().map(|t| t[0]).collect(),
            u_pd: th.iter().map(|t| t[1]).collect(),
            r2star: th.iter().map(|t| t[2]).collect(),
            cov,
            background: vec![false; g.len()],
        };
        let (a_t1, a_pd, tr) = (0.35, 0.09, 0.025);
        let out = smooth_qmaps(&fit, &AwsConfig::default(), a_t1, a_pd, tr).unwrap();
        let (r1, a, _) = r1_amplitude(0.4, 0.9, a_t1, a_pd, tr);
        for i in 0..g.len() {
            assert!((out.maps.r1[i] - r1).abs() <= 1e-12 * r1);
            assert!((out.maps.amplitude[i] - a).abs() <= 1e-12 * a);
        }
    }

    fn transpose(g: Grid, v: &[Vec3]) -> Vec<Vec3> {
        (0..g.len())
            .map(|i| {
                let (x, y) = g.coords(i);
                v[g.index(y, x)]
            })
            .collect()
    }

    #[test]
    fn commutes_with_grid_transpose() {
        let g = Grid::new(9, 9).unwrap();
        let th = noisy(g, |i| if g.coords(i).0 + 2 * g.coords(i).1 < 12 { [0.0; 3] } else { [1.0, 2.0, 3.0] }, 0.2, 6);
        for patch_radius in [0, 1] {
            let cfg = AwsConfig { patch_radius, hmax: 3.0, ..Default::default() };
            let a = aws_smooth(g, &transpose(g, &th), &iso(0.2, g.len()), None, &cfg).unwrap();
            let b = transpose(g, &aws_smooth(g, &th, &iso(0.2, g.len()), None, &cfg).unwrap().theta);
            for (p, q) in a.theta.iter().zip(&b) {
                for k in 0..3 {
                    assert!((p[k] - q[k]).abs() <= 1e-12);
                }
            }
        }
    }
}
