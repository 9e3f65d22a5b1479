//! Two-step qMRI: per-frame TV reconstruction, then per-voxel dictionary
//! matching refined by projected Gauss-Newton on `min_q 1/2 ||rho B(T1, T2) - u_i||^2`.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{bloch_jacobian, simulate_bloch, FingerprintDictionary, SequenceSpec};
use crate::error::{invalid, Result};
use crate::integrated::voxel_step;
use crate::mrf::match_series;
use crate::params::{AdmissibleBox, ParamMap};
use crate::series::{ImageSeries, KSpaceData};

use super::pdhg::{tv_series, PdhgConfig, WeightField};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStepConfig {
    pub pdhg: PdhgConfig,
    pub gn_steps: usize,
    /// Halvings tried before a Gauss-Newton step is abandoned.
    pub backtracks: usize,
}

impl Default for TwoStepConfig {
    fn default() -> Self {
        TwoStepConfig { pdhg: PdhgConfig::default(), gn_steps: 20, backtracks: 10 }
    }
}

#[derive(Debug, Clone)]
pub struct TwoStepResult {
    pub map: ParamMap,
    /// Stage-1 image series.
    pub series: ImageSeries,
    /// Voxels where refinement did not improve on the match.
    pub fallbacks: usize,
}

fn misfit(seq: &SequenceSpec, q: [f64; 3], u: &[Complex64]) -> Result<f64> {
    let b = simulate_bloch(q[1], q[2], seq)?;
    Ok(0.5 * b.values.iter().zip(u).map(|(s, v)| (s * q[0] - v).norm_sqr()).sum::<f64>())
}

/// Fits one voxel series starting from `q0`. Returns the refined value and
/// whether it fell back to `q0`.
pub fn refine_voxel(
    seq: &SequenceSpec,
    u: &[Complex64],
    q0: [f64; 3],
    bx: &AdmissibleBox,
    cfg: &TwoStepConfig,
) -> Result<([f64; 3], bool)> {
    let start = bx.clamp(q0);
    let f0 = misfit(seq, start, u)?;
    let (mut q, mut f) = (start, f0);
    for _ in 0..cfg.gn_steps {
        let j = bloch_jacobian(q[1], q[2], seq)?;
        let r: Vec<Complex64> = j.values.iter().zip(u).map(|(s, v)| v - s * q[0]).collect();
        // A round-off-sized damping keeps the system solvable when rho is 0.
        let Ok(full) = voxel_step(&j, q, &r, [1e-300; 3], bx) else { break };
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.backtracks {
            let cand = bx.clamp([0, 1, 2].map(|k| q[k] + t * (full[k] - q[k])));
            let fc = misfit(seq, cand, u)?;
            if fc < f {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, fc)) => {
                let done = f - fc <= 1e-15 * f.max(f64::MIN_POSITIVE);
                q = cand;
                f = fc;
                if done {
                    break;
                }
            }
            None => break,
        }
    }
    if f < f0 {
        Ok((q, false))
    } else {
        Ok((start, true))
    }
}

pub fn two_step_reconstruct(
    y: &KSpaceData,
    seq: &SequenceSpec,
    dict: &FingerprintDictionary,
    w: &WeightField,
    bx: &AdmissibleBox,
    cfg: &TwoStepConfig,
) -> Result<TwoStepResult> {
    seq.validate()?;
    bx.validate()?;
    if dict.sequence_hash != seq.hash() {
        return Err(invalid("dictionary was built for a different sequence"));
    }
    if y.frames() != seq.frames() {
        return Err(invalid(format!("data has {} frames, sequence has {}", y.frames(), seq.frames())));
    }
    let series = tv_series(y, w, &cfg.pdhg)?;
    let matches = match_series(&series, dict)?;
    let n = y.grid.len();
    let out: Vec<([f64; 3], bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let u = series.voxel_series(i);
            let m = &matches[i];
            if m.rho == 0.0 {
                let mid = bx.midpoint();
                return Ok(([0.0f64.clamp(bx.lower()[0], bx.upper()[0]), mid[1], mid[2]], false));
            }
            refine_voxel(seq, &u, [m.rho, m.t1, m.t2], bx, cfg)
        })
        .collect::<Result<_>>()?;
    let voxels: Vec<[f64; 3]> = out.iter().map(|o| o.0).collect();
    Ok(TwoStepResult {
        map: ParamMap::from_voxels(y.grid, &voxels)?,
        series,
        fallbacks: out.iter().filter(|o| o.1).count(),
    })
}
