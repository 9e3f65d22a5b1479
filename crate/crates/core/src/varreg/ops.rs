//! Discrete differential operators on complex images.
//!
//! `grad` uses forward differences with Neumann boundaries (zero difference
//! on the last row/column) and `div = -grad^T`. The symmetrized gradient
//! stores `(xx, yy, xy)` per voxel and is paired with the inner product
//! `<a, b> = xx xx' + yy yy' + 2 xy xy'`. Its diagonal differences are also
//! zero on the second-to-last row/column, so that `E(grad u) = 0` holds
//! exactly for affine `u` including the boundary.

use num_complex::Complex64;

use crate::grid::Grid;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Vector field with one complex component per axis.
#[derive(Debug, Clone, PartialEq)]
pub struct VecField {
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
}

impl VecField {
    pub fn zeros(n: usize) -> Self {
        VecField { x: vec![ZERO; n], y: vec![ZERO; n] }
    }

    pub fn dot_re(&self, o: &VecField) -> f64 {
        crate::linalg::cdot_re(&self.x, &o.x) + crate::linalg::cdot_re(&self.y, &o.y)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.dot_re(self)
    }
}

/// Symmetric 2x2 tensor field `(xx, yy, xy)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymField {
    pub xx: Vec<Complex64>,
    pub yy: Vec<Complex64>,
    pub xy: Vec<Complex64>,
}

impl SymField {
    pub fn zeros(n: usize) -> Self {
        SymField { xx: vec![ZERO; n], yy: vec![ZERO; n], xy: vec![ZERO; n] }
    }

    pub fn dot_re(&self, o: &SymField) -> f64 {
        crate::linalg::cdot_re(&self.xx, &o.xx)
            + crate::linalg::cdot_re(&self.yy, &o.yy)
            + 2.0 * crate::linalg::cdot_re(&self.xy, &o.xy)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.dot_re(self)
    }
}

/// Forward difference along x, zero where `x + 1 >= stop`.
fn dx(g: Grid, v: &[Complex64], stop: usize, out: &mut [Complex64]) {
    for y in 0..g.ny {
        let row = y * g.nx;
        for x in 0..g.nx {
            out[row + x] = if x + 1 < stop { v[row + x + 1] - v[row + x] } else { ZERO };
        }
    }
}

fn dy(g: Grid, v: &[Complex64], stop: usize, out: &mut [Complex64]) {
    for y in 0..g.ny {
        for x in 0..g.nx {
            let i = y * g.nx + x;
            out[i] = if y + 1 < stop { v[i + g.nx] - v[i] } else { ZERO };
        }
    }
}

/// Adds `scale * dx^T p` (same truncation) to `out`.
fn dx_t_add(g: Grid, p: &[Complex64], stop: usize, scale: f64, out: &mut [Complex64]) {
    for y in 0..g.ny {
        let row = y * g.nx;
        for x in 0..g.nx {
            let mut acc = ZERO;
            if x >= 1 && x < stop {
                acc += p[row + x - 1];
            }
            if x + 1 < stop {
                acc -= p[row + x];
            }
            out[row + x] += acc * scale;
        }
    }
}

fn dy_t_add(g: Grid, p: &[Complex64], stop: usize, scale: f64, out: &mut [Complex64]) {
    for y in 0..g.ny {
        for x in 0..g.nx {
            let i = y * g.nx + x;
            let mut acc = ZERO;
            if y >= 1 && y < stop {
                acc += p[i - g.nx];
            }
            if y + 1 < stop {
                acc -= p[i];
            }
            out[i] += acc * scale;
        }
    }
}

pub fn grad(g: Grid, u: &[Complex64]) -> VecField {
    let mut f = VecField::zeros(g.len());
    dx(g, u, g.nx, &mut f.x);
    dy(g, u, g.ny, &mut f.y);
    f
}

/// `-grad^T p`.
pub fn div(g: Grid, p: &VecField) -> Vec<Complex64> {
    let mut out = vec![ZERO; g.len()];
    dx_t_add(g, &p.x, g.nx, -1.0, &mut out);
    dy_t_add(g, &p.y, g.ny, -1.0, &mut out);
    out
}

pub fn sym_grad(g: Grid, w: &VecField) -> SymField {
    let n = g.len();
    let mut s = SymField::zeros(n);
    dx(g, &w.x, g.nx.saturating_sub(1), &mut s.xx);
    dy(g, &w.y, g.ny.saturating_sub(1), &mut s.yy);
    let mut a = vec![ZERO; n];
    let mut b = vec![ZERO; n];
    dy(g, &w.x, g.ny, &mut a);
    dx(g, &w.y, g.nx, &mut b);
    for i in 0..n {
        s.xy[i] = (a[i] + b[i]) * 0.5;
    }
    s
}

/// Adjoint of [`sym_grad`] under the weighted tensor inner product.
pub fn sym_grad_adjoint(g: Grid, q: &SymField) -> VecField {
    let n = g.len();
    let mut w = VecField::zeros(n);
    dx_t_add(g, &q.xx, g.nx.saturating_sub(1), 1.0, &mut w.x);
    dy_t_add(g, &q.xy, g.ny, 1.0, &mut w.x);
    dy_t_add(g, &q.yy, g.ny.saturating_sub(1), 1.0, &mut w.y);
    dx_t_add(g, &q.xy, g.nx, 1.0, &mut w.y);
    w
}
