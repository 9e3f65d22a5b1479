//! Blind compressed sensing of one image: cyclic code, transform and image
//! updates with proximal weights, minimizing
//! `mu/2 ||A u - y||^2 + 1/2 ||R u - D C||^2 + lambda ||C||_s`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::patch::{image_update, sparse_code_update, transform_update, PatchOp, Sparsity, Transform};
use crate::error::{invalid, numerical, Result};
use crate::forward::{Fft2, FourierOp};
use crate::series::{ImageSeries, KSpaceData};

/// Allowed objective increase per sweep, relative to `max(1, J)`.
pub const DESCENT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcsConfig {
    pub patch: usize,
    pub mu: f64,
    pub lambda: f64,
    pub sparsity: Sparsity,
    pub sweeps: usize,
    pub lambda_c: f64,
    pub lambda_d: f64,
    pub lambda_u: f64,
}

impl Default for BcsConfig {
    fn default() -> Self {
        BcsConfig {
            patch: 8,
            mu: 10.0,
            lambda: 1e-4,
            sparsity: Sparsity::L0,
            sweeps: 30,
            lambda_c: 1e-2,
            lambda_d: 1e-2,
            lambda_u: 1e-2,
        }
    }
}

impl BcsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu >= 0.0) || !(self.lambda >= 0.0) {
            return Err(invalid("mu and lambda must be nonnegative"));
        }
        for (name, v) in [("lambda_c", self.lambda_c), ("lambda_d", self.lambda_d), ("lambda_u", self.lambda_u)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("proximal weight {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BcsResult {
    pub image: Vec<Complex64>,
    pub transform: Transform,
    /// Objective at the start and after every sweep.
    pub objective: Vec<f64>,
}

pub(crate) fn patch_misfit(ru: &DMatrix<Complex64>, d: &Transform, c: &DMatrix<Complex64>) -> f64 {
    0.5 * (ru - &d.d * c).norm_squared()
}

pub(crate) fn check_descent(trace: &[f64], what: &str) -> Result<()> {
    if let [.., a, b] = trace {
        if *b > *a + DESCENT_SLACK * a.abs().max(1.0) {
            return Err(numerical(format!(
                "{what} objective increased from {a:e} to {b:e} at sweep {}; trace: {trace:?}",
                trace.len() - 1
            )));
        }
    }
    Ok(())
}

/// Reconstructs frame `l` of `y`.
pub fn bcs_reconstruct(y: &KSpaceData, l: usize, cfg: &BcsConfig) -> Result<BcsResult> {
    cfg.validate()?;
    if l >= y.frames() {
        return Err(invalid(format!("frame {l} out of range")));
    }
    let op = PatchOp::new(y.grid, cfg.patch)?;
    let fop = FourierOp::for_data(y);
    let fft = Fft2::new(y.grid);
    let mask = y.masks[l].as_f64();
    let mut y_full = fop.adjoint_frame(l, &y.coeffs[l]);
    let mut u = y_full.clone();
    fft.forward(&mut y_full);
    let data_misfit = |u: &[Complex64]| {
        let ku = fop.forward_frame(l, u);
        0.5 * cfg.mu * ku.iter().zip(&y.coeffs[l]).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>()
    };
    let mut d = Transform::dct(cfg.patch);
    let mut c = DMatrix::zeros(op.size(), y.grid.len());
    let mut ru = op.extract(&u)?;
    let mut objective = vec![data_misfit(&u) + patch_misfit(&ru, &d, &c)];
    for _ in 0..cfg.sweeps {
        c = sparse_code_update(&ru, &d, &c, cfg.lambda, cfg.lambda_c, cfg.sparsity)?;
        d = transform_update(&ru, &c, &d, cfg.lambda_d)?;
        let dc = &d.d * &c;
        u = image_update(&fft, &mask, &y_full, &op, &dc, &u, cfg.mu, cfg.lambda_u)?;
        ru = op.extract(&u)?;
        objective.push(data_misfit(&u) + patch_misfit(&ru, &d, &c) + cfg.lambda * cfg.sparsity.penalty(&c));
        check_descent(&objective, "blind compressed sensing")?;
    }
    Ok(BcsResult { image: u, transform: d, objective })
}

/// Frame-by-frame reconstruction of a series (frames in parallel).
pub fn bcs_series(y: &KSpaceData, cfg: &BcsConfig) -> Result<(ImageSeries, Vec<BcsResult>)> {
    let res: Vec<BcsResult> = (0..y.frames()).into_par_iter().map(|l| bcs_reconstruct(y, l, cfg)).collect::<Result<_>>()?;
    let data: Vec<Complex64> = res.iter().flat_map(|r| r.image.iter().copied()).collect();
    Ok((ImageSeries::new(y.grid, y.frames(), data)?, res))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{apply_forward, make_cartesian_masks, zero_fill, SamplingPattern};
    use crate::grid::Grid;

    fn image(g: Grid) -> Vec<Complex64> {
        (0..g.len())
            .map(|i| {
                let (x, y) = g.coords(i);
                let (fx, fy) = (x as f64 / g.nx as f64, y as f64 / g.ny as f64);
                let disc = ((fx - 0.5).powi(2) + (fy - 0.45).powi(2) < 0.09) as u8 as f64;
                Complex64::new(0.2 + 0.6 * disc + 0.1 * fx, 0.05 * fy)
            })
            .collect()
    }

    fn data(g: Grid, factor: usize) -> KSpaceData {
        let u = ImageSeries::new(g, 1, image(g)).unwrap();
        let pat = if factor == 1 { SamplingPattern::full(g, 1) } else { make_cartesian_masks(g, factor, 1, 3, true).unwrap() };
        apply_forward(&u, &pat).unwrap()
    }

    #[test]
    fn zero_sweeps_is_zero_fill() {
        let g = Grid::new(16, 16).unwrap();
        let y = data(g, 4);
        let r = bcs_reconstruct(&y, 0, &BcsConfig { sweeps: 0, patch: 4, ..Default::default() }).unwrap();
        assert_eq!(r.image, zero_fill(&y).frame(0).to_vec());
        assert_eq!(r.objective.len(), 1);
    }

    #[test]
    fn fidelity_dominant_full_sampling_returns_truth() {
        let g = Grid::new(16, 16).unwrap();
        let y = data(g, 1);
        let cfg = BcsConfig { sweeps: 5, patch: 4, mu: 1e9, ..Default::default() };
        let r = bcs_reconstruct(&y, 0, &cfg).unwrap();
        let truth = image(g);
        let num: f64 = r.image.iter().zip(&truth).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = truth.iter().map(|a| a.norm_sqr()).sum();
        assert!((num / den).sqrt() <= 1e-6);
    }

    #[test]
    fn objective_descends_and_transform_stays_unitary() {
        let g = Grid::new(32, 32).unwrap();
        let y = data(g, 4);
        for s in [Sparsity::L0, Sparsity::L1] {
            let cfg = BcsConfig { sweeps: 30, patch: 4, lambda: 1e-3, sparsity: s, ..Default::default() };
            let r = bcs_reconstruct(&y, 0, &cfg).unwrap();
            assert_eq!(r.objective.len(), 31);
            for w in r.objective.windows(2) {
                assert!(w[1] <= w[0] + DESCENT_SLACK * w[0].max(1.0));
            }
            assert!(r.transform.orthogonality_error() <= 1e-10);
        }
    }
}
