use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::grid::Grid;

/// Per-voxel tissue parameters `q = (rho, T1, T2)`; relaxation times in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamMap {
    pub grid: Grid,
    pub rho: Vec<f64>,
    pub t1: Vec<f64>,
    pub t2: Vec<f64>,
}

impl ParamMap {
    pub fn new(grid: Grid, rho: Vec<f64>, t1: Vec<f64>, t2: Vec<f64>) -> Result<Self> {
        let n = grid.len();
        if rho.len() != n || t1.len() != n || t2.len() != n {
            return Err(shape(format!(
                "parameter channels have lengths {}/{}/{}, grid has {n} voxels",
                rho.len(),
                t1.len(),
                t2.len()
            )));
        }
        if rho.iter().chain(&t1).chain(&t2).any(|v| !v.is_finite()) {
            return Err(invalid("parameter map contains non-finite values"));
        }
        Ok(ParamMap { grid, rho, t1, t2 })
    }

    pub fn constant(grid: Grid, q: [f64; 3]) -> Self {
        let n = grid.len();
        ParamMap { grid, rho: vec![q[0]; n], t1: vec![q[1]; n], t2: vec![q[2]; n] }
    }

    pub fn from_voxels(grid: Grid, voxels: &[[f64; 3]]) -> Result<Self> {
        if voxels.len() != grid.len() {
            return Err(shape(format!("{} voxels for a grid of {}", voxels.len(), grid.len())));
        }
        let rho = voxels.iter().map(|q| q[0]).collect();
        let t1 = voxels.iter().map(|q| q[1]).collect();
        let t2 = voxels.iter().map(|q| q[2]).collect();
        ParamMap::new(grid, rho, t1, t2)
    }

    #[inline]
    pub fn voxel(&self, i: usize) -> [f64; 3] {
        [self.rho[i], self.t1[i], self.t2[i]]
    }

    #[inline]
    pub fn set_voxel(&mut self, i: usize, q: [f64; 3]) {
        self.rho[i] = q[0];
        self.t1[i] = q[1];
        self.t2[i] = q[2];
    }

    pub fn voxels(&self) -> Vec<[f64; 3]> {
        (0..self.grid.len()).map(|i| self.voxel(i)).collect()
    }

    /// Channel by index: 0 = rho, 1 = T1, 2 = T2.
    pub fn channel(&self, c: usize) -> &[f64] {
        match c {
            0 => &self.rho,
            1 => &self.t1,
            2 => &self.t2,
            _ => panic!("parameter channel {c} out of range"),
        }
    }

    /// Voxels with positive proton density.
    pub fn foreground(&self) -> Vec<bool> {
        self.rho.iter().map(|&r| r > 0.0).collect()
    }

    /// Checks `T2 <= T1` on every voxel of `tissue`.
    pub fn is_physical(&self, tissue: &[bool]) -> bool {
        tissue.iter().zip(self.t1.iter().zip(&self.t2)).all(|(&m, (&t1, &t2))| !m || t2 <= t1)
    }
}

/// Box of admissible parameter values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmissibleBox {
    pub rho_min: f64,
    pub rho_max: f64,
    pub t1_min: f64,
    pub t1_max: f64,
    pub t2_min: f64,
    pub t2_max: f64,
}

impl Default for AdmissibleBox {
    fn default() -> Self {
        AdmissibleBox { rho_min: 0.0, rho_max: 2.0, t1_min: 0.05, t1_max: 5.0, t2_min: 0.005, t2_max: 2.5 }
    }
}

impl AdmissibleBox {
    pub fn new(lo: [f64; 3], hi: [f64; 3]) -> Result<Self> {
        let b = AdmissibleBox {
            rho_min: lo[0],
            rho_max: hi[0],
            t1_min: lo[1],
            t1_max: hi[1],
            t2_min: lo[2],
            t2_max: hi[2],
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower(), self.upper());
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(invalid("admissible box bounds must be finite"));
        }
        if (0..3).any(|c| lo[c] >= hi[c]) {
            return Err(invalid(format!("admissible box requires min < max, got {lo:?} / {hi:?}")));
        }
        if self.rho_min < 0.0 {
            return Err(invalid("admissible box requires rho_min >= 0"));
        }
        if self.t1_min <= 0.0 || self.t2_min <= 0.0 {
            return Err(invalid("admissible box requires positive relaxation times"));
        }
        Ok(())
    }

    #[inline]
    pub fn lower(&self) -> [f64; 3] {
        [self.rho_min, self.t1_min, self.t2_min]
    }

    #[inline]
    pub fn upper(&self) -> [f64; 3] {
        [self.rho_max, self.t1_max, self.t2_max]
    }

    pub fn widths(&self) -> [f64; 3] {
        let (lo, hi) = (self.lower(), self.upper());
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }

    pub fn midpoint(&self) -> [f64; 3] {
        let (lo, hi) = (self.lower(), self.upper());
        [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])]
    }

    #[inline]
    pub fn clamp(&self, q: [f64; 3]) -> [f64; 3] {
        let (lo, hi) = (self.lower(), self.upper());
        [q[0].clamp(lo[0], hi[0]), q[1].clamp(lo[1], hi[1]), q[2].clamp(lo[2], hi[2])]
    }

    pub fn contains(&self, q: [f64; 3]) -> bool {
        let (lo, hi) = (self.lower(), self.upper());
        (0..3).all(|c| q[c] >= lo[c] && q[c] <= hi[c])
    }
}

/// Euclidean projection onto the admissible box (componentwise clamp).
pub fn project_box(q: &ParamMap, b: &AdmissibleBox) -> ParamMap {
    let mut out = q.clone();
    for i in 0..q.grid.len() {
        out.set_voxel(i, b.clamp(q.voxel(i)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx() -> AdmissibleBox {
        AdmissibleBox::new([0.0, 0.1, 0.01], [1.5, 4.0, 2.0]).unwrap()
    }

    #[test]
    fn feasible_point_is_unchanged() {
        let g = Grid::new(2, 1).unwrap();
        let q = ParamMap::new(g, vec![0.5, 1.0], vec![1.0, 2.0], vec![0.1, 0.5]).unwrap();
        assert_eq!(project_box(&q, &bx()), q);
    }

    #[test]
    fn clamps_above_max() {
        let g = Grid::new(1, 1).unwrap();
        let b = bx();
        let q = ParamMap::new(g, vec![0.5], vec![b.t1_max + 1.0], vec![0.1]).unwrap();
        assert_eq!(project_box(&q, &b).t1[0], b.t1_max);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(AdmissibleBox::new([0.0, 1.0, 0.1], [1.0, 1.0, 0.2]).is_err());
        assert!(AdmissibleBox::new([-0.1, 0.1, 0.1], [1.0, 1.0, 0.2]).is_err());
        assert!(AdmissibleBox::new([0.0, 0.1, 0.0], [1.0, 1.0, 0.2]).is_err());
    }

    #[test]
    fn matches_grid_search_minimizer() {
        // Brute-force the per-component squared distance on a 1e-3 lattice.
        let b = bx();
        let pts = [[-0.3, 5.2, 0.0005], [0.7, 2.2, 3.1], [2.0, 0.05, 0.4]];
        for p in pts {
            let proj = b.clamp(p);
            let (lo, hi) = (b.lower(), b.upper());
            for c in 0..3 {
                let steps = ((hi[c] - lo[c]) / 1e-3).round() as usize;
                let mut best = (f64::INFINITY, 0.0);
                for k in 0..=steps {
                    let v = lo[c] + (hi[c] - lo[c]) * k as f64 / steps as f64;
                    let d = (v - p[c]).powi(2);
                    if d < best.0 {
                        best = (d, v);
                    }
                }
                assert!((best.1 - proj[c]).abs() <= 1e-3, "component {c}: {} vs {}", best.1, proj[c]);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_nonexpansive(
            a in prop::array::uniform3(-3.0f64..6.0),
            c in prop::array::uniform3(-3.0f64..6.0),
        ) {
            let b = bx();
            let pa = b.clamp(a);
            prop_assert_eq!(b.clamp(pa), pa);
            let pc = b.clamp(c);
            let d_in: f64 = (0..3).map(|k| (a[k] - c[k]).powi(2)).sum();
            let d_out: f64 = (0..3).map(|k| (pa[k] - pc[k]).powi(2)).sum();
            prop_assert!(d_out <= d_in + 1e-12);
        }
    }
}
