use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::params::ParamMap;

/// Denominator floor for relative errors (background has rho = 0).
pub const REL_ERROR_FLOOR: f64 = 1e-12;

/// Per-voxel relative error maps and their foreground means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelErrors {
    pub rho: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
    pub mean_rho: f64,
    pub mean_t1: f64,
    pub mean_t2: f64,
}

#[inline]
pub fn rel_error(est: f64, truth: f64) -> f64 {
    (est - truth).abs() / truth.abs().max(REL_ERROR_FLOOR)
}

/// `|q_hat - q| / max(|q|, 1e-12)` per voxel; means over `mask` only.
pub fn rel_error_map(q_hat: &ParamMap, q_true: &ParamMap, mask: &[bool]) -> Result<RelErrors> {
    if q_hat.grid != q_true.grid {
        return Err(shape(format!("grids differ: {:?} vs {:?}", q_hat.grid, q_true.grid)));
    }
    if mask.len() != q_true.grid.len() {
        return Err(shape("foreground mask length does not match the grid"));
    }
    let map = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| rel_error(x, y)).collect() };
    let rho = map(&q_hat.rho, &q_true.rho);
    let t1 = map(&q_hat.t1, &q_true.t1);
    let t2 = map(&q_hat.t2, &q_true.t2);
    let count = mask.iter().filter(|&&m| m).count();
    let mean = |v: &[f64]| -> f64 {
        if count == 0 {
            return 0.0;
        }
        v.iter().zip(mask).filter(|(_, &m)| m).map(|(e, _)| e).sum::<f64>() / count as f64
    };
    Ok(RelErrors { mean_rho: mean(&rho), mean_t1: mean(&t1), mean_t2: mean(&t2), rho, t1, t2 })
}
