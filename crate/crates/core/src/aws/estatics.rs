//! Multi-echo ESTATICS fit (two weightings sharing one R2* decay) and the
//! closed-form R1 / amplitude maps that follow from the Ernst signal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::Grid;
use crate::linalg::{inv_spd3, solve_spd3};

/// Multi-echo images of a T1-weighted and a PD-weighted acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoSet {
    pub grid: Grid,
    /// One image per echo.
    pub t1w: Vec<Vec<f64>>,
    pub pdw: Vec<Vec<f64>>,
    pub te_t1: Vec<f64>,
    pub te_pd: Vec<f64>,
    pub a_t1: f64,
    pub a_pd: f64,
    pub tr: f64,
    pub sigma: f64,
}

fn distinct(te: &[f64]) -> bool {
    te.iter().any(|t| (t - te[0]).abs() > 0.0)
}

impl EchoSet {
    pub fn validate(&self) -> Result<()> {
        if self.t1w.len() != self.te_t1.len() || self.pdw.len() != self.te_pd.len() {
            return Err(shape("one echo time per echo image is required"));
        }
        if self.te_t1.len() < 2 || self.te_pd.len() < 2 {
            return Err(invalid("each weighting needs at least two echoes"));
        }
        if !distinct(&self.te_t1) || !distinct(&self.te_pd) {
            return Err(invalid("echo times within a weighting must not all coincide"));
        }
        if self.t1w.iter().chain(&self.pdw).any(|e| e.len() != self.grid.len()) {
            return Err(shape("echo image does not match grid"));
        }
        if self.te_t1.iter().chain(&self.te_pd).any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(invalid("echo times must be finite and nonnegative"));
        }
        if !(self.sigma >= 0.0) {
            return Err(invalid("sigma must be nonnegative"));
        }
        Ok(())
    }

    /// Echo list of voxel `i` as (weighting index 0/1, te, value).
    fn voxel(&self, i: usize) -> Vec<(usize, f64, f64)> {
        let a = self.t1w.iter().zip(&self.te_t1).map(|(e, t)| (0, *t, e[i]));
        let b = self.pdw.iter().zip(&self.te_pd).map(|(e, t)| (1, *t, e[i]));
        a.chain(b).collect()
    }
}

/// Per-voxel `(u_t1, u_pd, r2star)` with covariance estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstaticsFit {
    pub grid: Grid,
    pub u_t1: Vec<f64>,
    pub u_pd: Vec<f64>,
    pub r2star: Vec<f64>,
    pub cov: Vec<[[f64; 3]; 3]>,
    /// All-zero voxels, not fitted.
    pub background: Vec<bool>,
}

impl EstaticsFit {
    pub fn theta(&self, i: usize) -> [f64; 3] {
        [self.u_t1[i], self.u_pd[i], self.r2star[i]]
    }

    pub fn thetas(&self) -> Vec<[f64; 3]> {
        (0..self.grid.len()).map(|i| self.theta(i)).collect()
    }

    pub fn with_thetas(&self, th: &[[f64; 3]]) -> EstaticsFit {
        let mut f = self.clone();
        for (i, t) in th.iter().enumerate() {
            f.u_t1[i] = t[0];
            f.u_pd[i] = t[1];
            f.r2star[i] = t[2];
        }
        f
    }
}

const GN_STEPS: usize = 15;
const FLOOR: f64 = 1e-300;

fn sse(echoes: &[(usize, f64, f64)], th: [f64; 3]) -> f64 {
    echoes.iter().map(|&(w, t, v)| (v - th[w] * (-th[2] * t).exp()).powi(2)).sum()
}

/// Gauss-Newton normal matrix and gradient side `J^T r`.
fn normal(echoes: &[(usize, f64, f64)], th: [f64; 3]) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut m = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for &(w, t, v) in echoes {
        let e = (-th[2] * t).exp();
        let mut j = [0.0; 3];
        j[w] = e;
        j[2] = -t * th[w] * e;
        let r = v - th[w] * e;
        for a in 0..3 {
            b[a] += j[a] * r;
            for c in 0..3 {
                m[a][c] += j[a] * j[c];
            }
        }
    }
    (m, b)
}

fn log_linear_start(echoes: &[(usize, f64, f64)]) -> [f64; 3] {
    let peak = echoes.iter().map(|e| e.2.abs()).fold(0.0, f64::max);
    let floor = peak * 1e-12;
    // Unknowns (log u_t1, log u_pd, r2star); design row (w == 0, w == 1, -te).
    let mut m = [[0.0; 3]; 3];
    let mut b = [0.0; 3];
    for &(w, t, v) in echoes {
        let mut x = [0.0; 3];
        x[w] = 1.0;
        x[2] = -t;
        let l = v.max(floor).ln();
        for a in 0..3 {
            b[a] += x[a] * l;
            for c in 0..3 {
                m[a][c] += x[a] * x[c];
            }
        }
    }
    match solve_spd3(m, b) {
        Some(s) => [s[0].exp(), s[1].exp(), s[2].max(0.0)],
        None => [peak, peak, 0.0],
    }
}

fn project(th: [f64; 3]) -> [f64; 3] {
    [th[0].max(FLOOR), th[1].max(FLOOR), th[2].max(0.0)]
}

/// Least-squares fit of one voxel; returns the estimate and `(J^T J)^{-1}`.
pub fn fit_voxel(echoes: &[(usize, f64, f64)]) -> ([f64; 3], Option<[[f64; 3]; 3]>) {
    let mut th = project(log_linear_start(echoes));
    let mut f = sse(echoes, th);
    for _ in 0..GN_STEPS {
        let (m, b) = normal(echoes, th);
        let Some(h) = solve_spd3(m, b) else { break };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let cand = project([th[0] + t * h[0], th[1] + t * h[1], th[2] + t * h[2]]);
            let fc = sse(echoes, cand);
            if fc < f {
                th = cand;
                f = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        let rel = (0..3).map(|k| (t * h[k]).abs() / th[k].abs().max(1e-300)).fold(0.0, f64::max);
        if !moved || rel < 1e-15 {
            break;
        }
    }
    let (m, _) = normal(echoes, th);
    (th, inv_spd3(m))
}

pub fn estatics_fit(echoes: &EchoSet) -> Result<EstaticsFit> {
    echoes.validate()?;
    let n = echoes.grid.len();
    let out: Vec<([f64; 3], [[f64; 3]; 3], bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let e = echoes.voxel(i);
            if e.iter().all(|x| x.2 == 0.0) {
                return ([0.0; 3], [[0.0; 3]; 3], true);
            }
            let (th, inv) = fit_voxel(&e);
            let s2 = echoes.sigma * echoes.sigma;
            let cov = inv.map(|m| m.map(|r| r.map(|v| v * s2))).unwrap_or([[f64::INFINITY; 3]; 3]);
            (th, cov, false)
        })
        .collect();
    Ok(EstaticsFit {
        grid: echoes.grid,
        u_t1: out.iter().map(|o| o.0[0]).collect(),
        u_pd: out.iter().map(|o| o.0[1]).collect(),
        r2star: out.iter().map(|o| o.0[2]).collect(),
        cov: out.iter().map(|o| o.1).collect(),
        background: out.iter().map(|o| o.2).collect(),
    })
}

/// R1 (1/s) and amplitude maps with a flag for clamped log arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationMaps {
    pub r1: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub out_of_range: Vec<bool>,
}

const LOG_LO: f64 = 1e-12;
const LOG_HI: f64 = 1.0 - 1e-12;

/// Closed-form `(R1, A)` for one voxel from the two weighted intercepts.
pub fn r1_amplitude(u_t1: f64, u_pd: f64, a_t1: f64, a_pd: f64, tr: f64) -> (f64, f64, bool) {
    let k = a_t1.sin() / a_pd.sin();
    let arg = (u_t1 - u_pd * k) / (u_t1 * a_t1.cos() - u_pd * k * a_pd.cos());
    let ok = arg.is_finite() && (LOG_LO..=LOG_HI).contains(&arg);
    let e1 = if arg.is_finite() { arg.clamp(LOG_LO, LOG_HI) } else { LOG_HI };
    let r1 = -e1.ln() / tr;
    let a = (1.0 - a_t1.cos() * e1) / (a_t1.sin() * (1.0 - e1)) * u_t1;
    (r1, a, !ok)
}

pub fn derive_r1_pd(fit: &EstaticsFit, a_t1: f64, a_pd: f64, tr: f64) -> Result<RelaxationMaps> {
    if a_t1 == a_pd {
        return Err(invalid("equal flip angles carry no R1 information"));
    }
    if !(tr > 0.0) || a_t1.sin() == 0.0 || a_pd.sin() == 0.0 {
        return Err(invalid("need tr > 0 and flip angles with nonzero sine"));
    }
    let n = fit.grid.len();
    let mut m = RelaxationMaps { r1: vec![0.0; n], amplitude: vec![0.0; n], out_of_range: vec![false; n] };
    for i in 0..n {
        if fit.background[i] {
            continue;
        }
        let (r1, a, flag) = r1_amplitude(fit.u_t1[i], fit.u_pd[i], a_t1, a_pd, tr);
        m.r1[i] = r1;
        m.amplitude[i] = a;
        m.out_of_range[i] = flag;
    }
    Ok(m)
}
