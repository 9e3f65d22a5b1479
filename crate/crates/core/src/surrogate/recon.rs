//! Learning-informed reconstruction
//! `min_q 1/2 ||A(rho N(T1, T2)) - y||^2 + alpha/2 sum_c ||grad(q_c / w_c)||^2`
//! over the admissible box, with `w_c` the box widths.
//!
//! Each outer step linearizes the model per voxel exactly like the
//! integrated Levenberg-Marquardt solver (zero-filled residual, damping
//! `lambda0 * decay^n`). The smoothness term couples voxels through the
//! five-point Laplacian; the coupled system is solved by preconditioned
//! conjugate gradients with the per-voxel 3x3 blocks as preconditioner,
//! then the iterate is projected onto the box.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bloch::SignalModel;
use crate::error::{invalid, numerical, shape, Result};
use crate::forward::FourierOp;
use crate::grid::Grid;
use crate::integrated::{default_lambda0, linearize, voxel_columns, LmTraceRow};
use crate::linalg::{normal_equations, solve_spd3};
use crate::params::{AdmissibleBox, ParamMap};
use crate::series::KSpaceData;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnConfig {
    pub alpha: f64,
    pub max_iters: usize,
    /// Initial damping; `None` uses the same rule as the integrated solver.
    pub lambda0: Option<f64>,
    pub decay: f64,
    /// Stop once the projected step is shorter than this.
    pub step_tol: f64,
    pub cg_tol: f64,
    pub cg_max_iters: usize,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            alpha: 1e-3,
            max_iters: 100,
            lambda0: None,
            decay: 0.7,
            step_tol: 1e-8,
            cg_tol: 1e-12,
            cg_max_iters: 1000,
        }
    }
}

impl NnConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if let Some(l) = self.lambda0 {
            if !(l > 0.0) || !l.is_finite() {
                return Err(invalid(format!("lambda0 must be positive, got {l}")));
            }
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(self.step_tol >= 0.0) || !(self.cg_tol > 0.0) || self.cg_max_iters == 0 {
            return Err(invalid("tolerances must be nonnegative and the inner budget positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NnResult {
    pub map: ParamMap,
    pub trace: Vec<LmTraceRow>,
    /// Inner iterations per outer step.
    pub cg_iters: Vec<usize>,
}

type V3 = [f64; 3];

fn neighbours(g: Grid, i: usize) -> impl Iterator<Item = usize> {
    let (x, y) = g.coords(i);
    let cand = [
        (x > 0).then(|| i - 1),
        (x + 1 < g.nx).then(|| i + 1),
        (y > 0).then(|| i - g.nx),
        (y + 1 < g.ny).then(|| i + g.nx),
    ];
    cand.into_iter().flatten()
}

/// `(L v)_i = sum_{j ~ i} (v_i - v_j)` per channel, scaled by `s_c^2`.
fn laplacian(g: Grid, v: &[V3], s2: V3) -> Vec<V3> {
    (0..g.len())
        .map(|i| {
            let mut acc = [0.0; 3];
            for j in neighbours(g, i) {
                for c in 0..3 {
                    acc[c] += v[i][c] - v[j][c];
                }
            }
            [0, 1, 2].map(|c| s2[c] * acc[c])
        })
        .collect()
}

fn dot(a: &[V3], b: &[V3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x[0] * y[0] + x[1] * y[1] + x[2] * y[2]).sum()
}

struct System<'a> {
    grid: Grid,
    blocks: &'a [[[f64; 3]; 3]],
    alpha: f64,
    s2: V3,
}

impl System<'_> {
    fn apply(&self, v: &[V3]) -> Vec<V3> {
        let mut out: Vec<V3> = self
            .blocks
            .iter()
            .zip(v)
            .map(|(m, x)| [0, 1, 2].map(|r| m[r][0] * x[0] + m[r][1] * x[1] + m[r][2] * x[2]))
            .collect();
        if self.alpha > 0.0 {
            for (o, l) in out.iter_mut().zip(laplacian(self.grid, v, self.s2)) {
                for c in 0..3 {
                    o[c] += self.alpha * l[c];
                }
            }
        }
        out
    }

    /// Block preconditioner: voxel block plus the Laplacian diagonal.
    fn precondition(&self, r: &[V3]) -> Result<Vec<V3>> {
        (0..r.len())
            .map(|i| {
                let mut m = self.blocks[i];
                if self.alpha > 0.0 {
                    let deg = neighbours(self.grid, i).count() as f64;
                    for c in 0..3 {
                        m[c][c] += self.alpha * self.s2[c] * deg;
                    }
                }
                solve_spd3(m, r[i]).ok_or_else(|| numerical(format!("singular preconditioner block at voxel {i}")))
            })
            .collect()
    }

    fn solve(&self, b: &[V3], tol: f64, max_iters: usize) -> Result<(Vec<V3>, usize)> {
        let mut x = vec![[0.0; 3]; b.len()];
        let bn = dot(b, b).sqrt();
        if bn == 0.0 {
            return Ok((x, 0));
        }
        let mut r = b.to_vec();
        let mut z = self.precondition(&r)?;
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        for it in 1..=max_iters {
            let ap = self.apply(&p);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                return Err(numerical(format!("inner solve broke down at iteration {it}: p^T A p = {pap:e}")));
            }
            let a = rz / pap;
            for k in 0..x.len() {
                for c in 0..3 {
                    x[k][c] += a * p[k][c];
                    r[k][c] -= a * ap[k][c];
                }
            }
            if dot(&r, &r).sqrt() <= tol * bn {
                return Ok((x, it));
            }
            z = self.precondition(&r)?;
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for k in 0..p.len() {
                for c in 0..3 {
                    p[k][c] = z[k][c] + beta * p[k][c];
                }
            }
        }
        Err(numerical(format!("inner solve did not reach relative residual {tol:e} in {max_iters} iterations")))
    }
}

/// Projected Gauss-Newton on the learning-informed objective. `model` is
/// usually a trained [`super::SurrogateNet`]; passing the exact Bloch model
/// gives the integrated solver plus the smoothness term.
pub fn nn_reconstruct<M: SignalModel + ?Sized>(
    y: &KSpaceData,
    model: &M,
    q0: &ParamMap,
    bx: &AdmissibleBox,
    cfg: &NnConfig,
) -> Result<NnResult> {
    cfg.validate()?;
    bx.validate()?;
    if model.frames() != y.frames() {
        return Err(shape(format!("data has {} frames, model has {}", y.frames(), model.frames())));
    }
    if q0.grid != y.grid {
        return Err(shape("initial map grid differs from data grid"));
    }
    let grid = y.grid;
    if y.norm() == 0.0 {
        let mid = bx.midpoint();
        let map = ParamMap::constant(grid, bx.clamp([0.0, mid[1], mid[2]]));
        return Ok(NnResult { map, trace: Vec::new(), cg_iters: Vec::new() });
    }
    let w = bx.widths();
    let s2 = [0, 1, 2].map(|c| 1.0 / (w[c] * w[c]));
    let op = FourierOp::for_data(y);
    let frames = y.frames();
    let mut q = crate::params::project_box(q0, bx);
    let mut lambda0 = cfg.lambda0;
    let mut trace = Vec::new();
    let mut cg_iters = Vec::new();
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
        if n == cfg.max_iters {
            trace.push(LmTraceRow { iter: n, residual: rn, lambda, step_norm: 0.0 });
            break;
        }
        let r = op.adjoint(&resid)?.to_voxel_major();
        let qv = q.voxels();
        let sys: Vec<([[f64; 3]; 3], V3)> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let cols = voxel_columns(&lin.jac[i], qv[i][0]);
                let (mut g, b) = normal_equations([&cols[0], &cols[1], &cols[2]], &r[i * frames..(i + 1) * frames]);
                for k in 0..3 {
                    g[k][k] += lambda;
                }
                (g, b)
            })
            .collect();
        let blocks: Vec<[[f64; 3]; 3]> = sys.iter().map(|s| s.0).collect();
        let mut rhs: Vec<V3> = sys.iter().map(|s| s.1).collect();
        if cfg.alpha > 0.0 {
            for (b, l) in rhs.iter_mut().zip(laplacian(grid, &qv, s2)) {
                for c in 0..3 {
                    b[c] -= cfg.alpha * l[c];
                }
            }
        }
        let system = System { grid, blocks: &blocks, alpha: cfg.alpha, s2 };
        let (h, its) = system.solve(&rhs, cfg.cg_tol, cfg.cg_max_iters)?;
        cg_iters.push(its);
        let next: Vec<V3> =
            qv.iter().zip(&h).map(|(q, d)| bx.clamp([q[0] + d[0], q[1] + d[1], q[2] + d[2]])).collect();
        let step_norm =
            next.iter().zip(&qv).map(|(a, b)| (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>()).sum::<f64>().sqrt();
        trace.push(LmTraceRow { iter: n, residual: rn, lambda, step_norm });
        q = ParamMap::from_voxels(grid, &next)?;
        if step_norm < cfg.step_tol {
            break;
        }
    }
    Ok(NnResult { map: q, trace, cg_iters })
}
