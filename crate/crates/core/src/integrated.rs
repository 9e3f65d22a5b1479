//! Integrated-physics reconstruction: projected Levenberg-Marquardt directly
//! in parameter space on `min_q ||A Pi(q) - y||`, with `Pi(q) = rho B(T1, T2)`.
//!
//! The step uses the zero-filled residual `A^H (y - A Pi(q))`, which makes
//! the linearized problem separate into one damped 3x3 system per voxel.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::{BlochModel, SequenceSpec, SignalJacobian, SignalModel};
use crate::error::{invalid, numerical, shape, Result};
use crate::forward::{estimate_noise_sigma, FourierOp};
use crate::linalg::{normal_equations, solve_spd3};
use crate::params::{AdmissibleBox, ParamMap};
use crate::series::{ImageSeries, KSpaceData};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    /// Initial damping; `None` picks 0.1 x the median diagonal of `Re(J^H J)`.
    pub lambda0: Option<f64>,
    pub decay: f64,
    pub max_iters: usize,
    /// Discrepancy safety factor.
    pub tau: f64,
    /// Noise std per real component; `None` estimates it from the data.
    pub sigma: Option<f64>,
    /// Stop once the residual is below this fraction of `||y||`.
    pub rel_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig { lambda0: None, decay: 0.7, max_iters: 100, tau: 1.05, sigma: None, rel_tol: 1e-10 }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda0 {
            if !(l > 0.0) || !l.is_finite() {
                return Err(invalid(format!("lambda0 must be positive, got {l}")));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.tau >= 1.0) {
            return Err(invalid(format!("tau must be at least 1, got {}", self.tau)));
        }
        if let Some(s) = self.sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(invalid(format!("sigma must be nonnegative, got {s}")));
            }
        }
        if !(self.rel_tol >= 0.0) {
            return Err(invalid("rel_tol must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LmTraceRow {
    pub iter: usize,
    pub residual: f64,
    pub lambda: f64,
    pub step_norm: f64,
}

#[derive(Debug, Clone)]
pub struct LmResult {
    pub map: ParamMap,
    pub trace: Vec<LmTraceRow>,
    pub threshold: f64,
    pub converged: bool,
}

/// Per-voxel signals and sensitivities at the current iterate.
pub(crate) struct Linearization {
    pub jac: Vec<SignalJacobian>,
    pub u: ImageSeries,
}

pub(crate) fn linearize<M: SignalModel + ?Sized>(model: &M, q: &ParamMap) -> Result<Linearization> {
    let frames = model.frames();
    let jac: Vec<SignalJacobian> = (0..q.grid.len())
        .into_par_iter()
        .map(|i| {
            let [_, t1, t2] = q.voxel(i);
            model.signal_jacobian(t1, t2)
        })
        .collect::<Result<_>>()?;
    let vm: Vec<Complex64> =
        jac.iter().enumerate().flat_map(|(i, j)| j.values.iter().map(move |z| z * q.rho[i])).collect();
    Ok(Linearization { jac, u: ImageSeries::from_voxel_major(q.grid, frames, &vm) })
}

/// Columns `[B, rho dB/dT1, rho dB/dT2]` of the voxel Jacobian of `Pi`.
pub fn voxel_columns(j: &SignalJacobian, rho: f64) -> [Vec<Complex64>; 3] {
    [
        j.values.clone(),
        j.d_t1.iter().map(|z| z * rho).collect(),
        j.d_t2.iter().map(|z| z * rho).collect(),
    ]
}

/// One damped step for a single voxel: solves
/// `(Re(J^H J) + diag(damping)) h = Re(J^H r)` and projects `q + h`.
pub fn voxel_step(
    j: &SignalJacobian,
    q: [f64; 3],
    r: &[Complex64],
    damping: [f64; 3],
    bx: &AdmissibleBox,
) -> Result<[f64; 3]> {
    let cols = voxel_columns(j, q[0]);
    let (mut g, b) = normal_equations([&cols[0], &cols[1], &cols[2]], r);
    for k in 0..3 {
        g[k][k] += damping[k];
    }
    let h = solve_spd3(g, b).ok_or_else(|| numerical(format!("damped normal system is singular at q = {q:?}")))?;
    Ok(bx.clamp([q[0] + h[0], q[1] + h[1], q[2] + h[2]]))
}

/// One voxel step evaluated from scratch with the given model (used to
/// compare solvers trajectory by trajectory).
pub fn model_voxel_step<M: SignalModel + ?Sized>(
    model: &M,
    q: [f64; 3],
    r: &[Complex64],
    damping: [f64; 3],
    bx: &AdmissibleBox,
) -> Result<[f64; 3]> {
    let j = model.signal_jacobian(q[1], q[2])?;
    voxel_step(&j, q, r, damping, bx)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `0.1 x median` of the diagonals of `Re(J^H J)` over voxels with `rho > 0`.
pub(crate) fn default_lambda0(lin: &Linearization, q: &ParamMap) -> f64 {
    let diags: Vec<f64> = lin
        .jac
        .iter()
        .enumerate()
        .filter(|(i, _)| q.rho[*i] > 0.0)
        .flat_map(|(i, j)| {
            let cols = voxel_columns(j, q.rho[i]);
            cols.map(|c| crate::linalg::cnorm_sqr(&c))
        })
        .filter(|d| *d > 0.0)
        .collect();
    let m = median(diags);
    if m > 0.0 {
        0.1 * m
    } else {
        1e-3
    }
}

/// Discrepancy threshold `max(tau sigma sqrt(2 m), rel_tol ||y||)` for `m`
/// complex samples.
pub fn stop_threshold(y: &KSpaceData, cfg: &LmConfig) -> f64 {
    let sigma = cfg.sigma.unwrap_or_else(|| estimate_noise_sigma(y));
    (cfg.tau * sigma * (2.0 * y.sample_count() as f64).sqrt()).max(cfg.rel_tol * y.norm())
}

fn check_data<M: SignalModel + ?Sized>(model: &M, y: &KSpaceData, q0: &ParamMap) -> Result<()> {
    if model.frames() != y.frames() {
        return Err(shape(format!("data has {} frames, model has {}", y.frames(), model.frames())));
    }
    if q0.grid != y.grid {
        return Err(shape("initial map grid differs from data grid"));
    }
    Ok(())
}

pub fn lm_reconstruct<M: SignalModel + ?Sized>(
    y: &KSpaceData,
    model: &M,
    q0: &ParamMap,
    bx: &AdmissibleBox,
    cfg: &LmConfig,
) -> Result<LmResult> {
    cfg.validate()?;
    bx.validate()?;
    check_data(model, y, q0)?;
    let op = FourierOp::for_data(y);
    let threshold = stop_threshold(y, cfg);
    let mut q = crate::params::project_box(q0, bx);
    let mut trace = Vec::new();
    let mut lambda0 = cfg.lambda0;
    let mut converged = false;
    for n in 0..=cfg.max_iters {
        let lin = linearize(model, &q)?;
        let mut resid = op.forward(&lin.u)?;
        for (r, yy) in resid.coeffs.iter_mut().flatten().zip(y.coeffs.iter().flatten()) {
            *r = yy - *r;
        }
        let rn = resid.norm();
        if !rn.is_finite() {
            return Err(numerical(format!("residual is {rn} at iteration {n}")));
        }
        let l0 = *lambda0.get_or_insert_with(|| default_lambda0(&lin, &q));
        let lambda = (l0 * cfg.decay.powi(n as i32)).max(l0 * 1e-14);
        if rn <= threshold {
            trace.push(LmTraceRow { iter: n, residual: rn, lambda, step_norm: 0.0 });
            converged = true;
            break;
        }
        if n == cfg.max_iters {
            trace.push(LmTraceRow { iter: n, residual: rn, lambda, step_norm: 0.0 });
            break;
        }
        let r = op.adjoint(&resid)?.to_voxel_major();
        let frames = y.frames();
        let next: Vec<[f64; 3]> = (0..q.grid.len())
            .into_par_iter()
            .map(|i| voxel_step(&lin.jac[i], q.voxel(i), &r[i * frames..(i + 1) * frames], [lambda; 3], bx))
            .collect::<Result<_>>()?;
        let step_norm = next
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let o = q.voxel(i);
                (0..3).map(|k| (v[k] - o[k]).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt();
        trace.push(LmTraceRow { iter: n, residual: rn, lambda, step_norm });
        q = ParamMap::from_voxels(q.grid, &next)?;
    }
    Ok(LmResult { map: q, trace, threshold, converged })
}

pub fn lm_reconstruct_bloch(
    y: &KSpaceData,
    seq: &SequenceSpec,
    q0: &ParamMap,
    bx: &AdmissibleBox,
    cfg: &LmConfig,
) -> Result<LmResult> {
    lm_reconstruct(y, &BlochModel::new(seq.clone())?, q0, bx, cfg)
}

/// `||A Pi(q) - y||` over the sampled locations.
pub fn residual_norm_model<M: SignalModel + ?Sized>(q: &ParamMap, y: &KSpaceData, model: &M) -> Result<f64> {
    check_data(model, y, q)?;
    let u = crate::bloch::signal_map(model, q)?;
    let ay = FourierOp::for_data(y).forward(&u)?;
    ay.distance(y)
}

pub fn residual_norm(q: &ParamMap, y: &KSpaceData, seq: &SequenceSpec) -> Result<f64> {
    residual_norm_model(q, y, &BlochModel::new(seq.clone())?)
}

pub fn write_trace_csv(path: &Path, trace: &[LmTraceRow], header_comment: Option<&str>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    if let Some(c) = header_comment {
        writeln!(f, "# {c}")?;
    }
    writeln!(f, "iter,residual,lambda,step_norm")?;
    for r in trace {
        writeln!(f, "{},{:.17e},{:.17e},{:.17e}", r.iter, r.residual, r.lambda, r.step_norm)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{apply_forward, make_cartesian_masks, SamplingPattern};
    use crate::grid::Grid;

    fn seq() -> SequenceSpec {
        SequenceSpec::default_mrf(30)
    }

    fn data(q: &ParamMap, s: &SequenceSpec, pat: &SamplingPattern) -> KSpaceData {
        apply_forward(&crate::bloch::bloch_map(q, s).unwrap(), pat).unwrap()
    }

    #[test]
    fn truth_is_a_fixed_point() {
        let s = seq();
        let g = Grid::new(4, 4).unwrap();
        let q = ParamMap::constant(g, [0.8, 1.1, 0.09]);
        let y = data(&q, &s, &make_cartesian_masks(g, 2, 30, 1, true).unwrap());
        assert_eq!(residual_norm(&q, &y, &s).unwrap(), 0.0);
        let cfg = LmConfig { sigma: Some(0.0), ..LmConfig::default() };
        let res = lm_reconstruct_bloch(&y, &s, &q, &AdmissibleBox::default(), &cfg).unwrap();
        assert_eq!(res.map, q);
        assert!(res.converged);
        assert_eq!(res.trace.len(), 1);
    }

    #[test]
    fn zero_map_zero_data_residual() {
        let s = seq();
        let g = Grid::new(3, 3).unwrap();
        let q = ParamMap::constant(g, [0.0, 1.0, 0.1]);
        let y = data(&q, &s, &SamplingPattern::full(g, 30));
        assert_eq!(residual_norm(&q, &y, &s).unwrap(), 0.0);
    }

    #[test]
    fn residual_matches_recomputation_for_scaled_data() {
        let s = seq();
        let g = Grid::new(4, 2).unwrap();
        let q = ParamMap::new(g, vec![0.5; 8], (0..8).map(|i| 0.5 + 0.1 * i as f64).collect(), vec![0.07; 8]).unwrap();
        let y = data(&q, &s, &SamplingPattern::full(g, 30));
        let r = residual_norm(&q, &y.scaled(2.0), &s).unwrap();
        assert!((r - y.norm()).abs() <= 1e-12 * y.norm());
    }

    #[test]
    fn huge_damping_kills_the_step() {
        let s = seq();
        let model = BlochModel::new(s.clone()).unwrap();
        let q = [0.7, 0.9, 0.08];
        let truth = model.signal(1.2, 0.1).unwrap();
        let cur = model.signal(q[1], q[2]).unwrap();
        let r: Vec<Complex64> = truth.iter().zip(&cur).map(|(a, b)| a * 0.8 - b * q[0]).collect();
        let wide = AdmissibleBox::new([0.0, 1e-3, 1e-3], [10.0, 10.0, 10.0]).unwrap();
        let next = model_voxel_step(&model, q, &r, [1e9; 3], &wide).unwrap();
        let h: f64 = (0..3).map(|k| (next[k] - q[k]).powi(2)).sum::<f64>().sqrt();
        assert!(h <= 1e-6 * crate::linalg::cnorm(&r));
    }

    #[test]
    fn damped_system_is_positive_definite_and_model_decreases() {
        let s = seq();
        let model = BlochModel::new(s).unwrap();
        for (k, &(t1, t2, rho)) in [(0.6, 0.05, 0.4), (1.4, 0.2, 1.1), (2.5, 1.0, 0.9)].iter().enumerate() {
            let j = model.signal_jacobian(t1, t2).unwrap();
            let cols = voxel_columns(&j, rho);
            let target = model.signal(t1 * 1.1, t2 * 0.9).unwrap();
            let r: Vec<Complex64> = target.iter().zip(&j.values).map(|(a, b)| a - b * rho).collect();
            let lambda = 10f64.powi(-(k as i32) - 2);
            let (mut g, b) = normal_equations([&cols[0], &cols[1], &cols[2]], &r);
            for d in 0..3 {
                g[d][d] += lambda;
            }
            let m = nalgebra::Matrix3::from_fn(|a, c| g[a][c]);
            let min_eig = m.symmetric_eigenvalues().min();
            assert!(min_eig >= lambda - 1e-12);
            let h = solve_spd3(g, b).unwrap();
            let lin = |h: [f64; 3]| {
                (0..r.len())
                    .map(|l| (cols[0][l] * h[0] + cols[1][l] * h[1] + cols[2][l] * h[2] - r[l]).norm_sqr())
                    .sum::<f64>()
                    + lambda * h.iter().map(|v| v * v).sum::<f64>()
            };
            assert!(lin(h) <= lin([0.0; 3]) + 1e-12);
        }
    }

    #[test]
    fn single_voxel_converges_to_truth() {
        let s = seq();
        let g = Grid::new(1, 1).unwrap();
        let truth = ParamMap::constant(g, [0.9, 1.3, 0.11]);
        let y = data(&truth, &s, &SamplingPattern::full(g, 30));
        let q0 = ParamMap::constant(g, [0.8, 1.1, 0.13]);
        let cfg = LmConfig { sigma: Some(0.0), rel_tol: 1e-13, max_iters: 30, ..LmConfig::default() };
        let res = lm_reconstruct_bloch(&y, &s, &q0, &AdmissibleBox::default(), &cfg).unwrap();
        let got = res.map.voxel(0);
        let want = truth.voxel(0);
        for k in 0..3 {
            assert!((got[k] - want[k]).abs() <= 1e-6 * want[k], "{got:?} vs {want:?}");
        }
        // Grid-search oracle: no point of a 1e-3 relative grid around the
        // answer fits the data better.
        let model = BlochModel::new(s.clone()).unwrap();
        let obj = |q: [f64; 3]| {
            let u = crate::bloch::signal_map(&model, &ParamMap::constant(g, q)).unwrap();
            let ay = apply_forward(&u, &SamplingPattern::full(g, 30)).unwrap();
            ay.distance(&y).unwrap()
        };
        let best = obj(got);
        for a in -2..=2 {
            for b in -2..=2 {
                for c in -2..=2 {
                    let p = [got[0] * (1.0 + 1e-3 * a as f64), got[1] * (1.0 + 1e-3 * b as f64), got[2] * (1.0 + 1e-3 * c as f64)];
                    assert!(obj(p) >= best);
                }
            }
        }
    }

    #[test]
    fn iterates_stay_in_box() {
        let s = seq();
        let g = Grid::new(4, 4).unwrap();
        let truth = ParamMap::constant(g, [1.0, 0.9, 0.08]);
        let y = data(&truth, &s, &make_cartesian_masks(g, 2, 30, 3, true).unwrap());
        let bx = AdmissibleBox::new([0.0, 0.5, 0.05], [1.0, 1.0, 0.1]).unwrap();
        let q0 = ParamMap::constant(g, [2.0, 3.0, 0.01]);
        let cfg = LmConfig { sigma: Some(0.0), max_iters: 10, ..LmConfig::default() };
        let res = lm_reconstruct_bloch(&y, &s, &q0, &bx, &cfg).unwrap();
        assert!(res.map.voxels().iter().all(|v| bx.contains(*v)));
    }
}
