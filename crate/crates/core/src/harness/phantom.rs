//! Piecewise-constant ellipse phantoms.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::grid::Grid;
use crate::params::{AdmissibleBox, ParamMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub name: String,
    pub rho: f64,
    pub t1: f64,
    pub t2: f64,
}

impl Tissue {
    pub fn new(name: &str, rho: f64, t1: f64, t2: f64) -> Self {
        Tissue { name: name.to_string(), rho, t1, t2 }
    }
}

/// Ellipse in normalized coordinates: the grid spans `[-1, 1]` along both
/// axes, pixel centres at `(2x + 1)/nx - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub a: f64,
    pub b: f64,
    #[serde(default)]
    pub angle_deg: f64,
    /// 1-based index into `PhantomSpec::tissues`; 0 is background.
    pub label: u8,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    pub tissues: Vec<Tissue>,
    /// Painted in order; later ellipses override earlier ones.
    pub ellipses: Vec<Ellipse>,
    /// Background value of `(T1, T2)`; `rho` is always 0 there.
    #[serde(default = "default_background")]
    pub background_t: [f64; 2],
}

fn default_background() -> [f64; 2] {
    [1.0, 0.1]
}

impl PhantomSpec {
    /// 64x64 brain-like desk phantom: CSF rim, gray and white matter,
    /// two ventricles and two lesions.
    pub fn desk(n: usize) -> Self {
        let tissues = vec![
            Tissue::new("csf", 1.0, 2.569, 0.329),
            Tissue::new("gray", 0.86, 1.33, 0.083),
            Tissue::new("white", 0.77, 0.83, 0.07),
            Tissue::new("lesion_a", 0.9, 1.1, 0.15),
            Tissue::new("lesion_b", 0.7, 0.65, 0.05),
        ];
        let e = |cx, cy, a, b, angle_deg, label| Ellipse { cx, cy, a, b, angle_deg, label };
        let ellipses = vec![
            e(0.0, 0.0, 0.82, 0.94, 0.0, 1),
            e(0.0, 0.0, 0.74, 0.86, 0.0, 2),
            e(0.0, 0.02, 0.56, 0.68, 0.0, 3),
            e(-0.16, 0.0, 0.08, 0.26, 15.0, 1),
            e(0.16, 0.0, 0.08, 0.26, -15.0, 1),
            e(0.33, -0.38, 0.11, 0.08, 30.0, 4),
            e(-0.3, 0.42, 0.08, 0.08, 0.0, 5),
        ];
        PhantomSpec { nx: n, ny: n, tissues, ellipses, background_t: default_background() }
    }

    pub fn validate(&self, bx: &AdmissibleBox) -> Result<()> {
        Grid::new(self.nx, self.ny)?;
        for t in &self.tissues {
            if !bx.contains([t.rho, t.t1, t.t2]) || !(t.rho > 0.0) {
                return Err(invalid(format!("tissue '{}' lies outside the admissible box", t.name)));
            }
            if t.t2 > t.t1 {
                return Err(invalid(format!("tissue '{}' has T2 > T1", t.name)));
            }
        }
        for (k, e) in self.ellipses.iter().enumerate() {
            if !(e.a > 0.0 && e.b > 0.0) {
                return Err(invalid(format!("ellipse {k} needs positive semi-axes")));
            }
            if e.label as usize > self.tissues.len() {
                return Err(invalid(format!("ellipse {k} references unknown tissue {}", e.label)));
            }
        }
        let [t1, t2] = self.background_t;
        if !(t1 > 0.0 && t2 > 0.0) {
            return Err(invalid("background relaxation times must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub map: ParamMap,
    /// 0 = background, otherwise 1-based tissue index.
    pub labels: Vec<u8>,
}

impl Phantom {
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }
}

pub fn normalized_coords(grid: Grid, i: usize) -> (f64, f64) {
    let (x, y) = grid.coords(i);
    ((2 * x + 1) as f64 / grid.nx as f64 - 1.0, (2 * y + 1) as f64 / grid.ny as f64 - 1.0)
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate(&AdmissibleBox::default())?;
    let grid = Grid::new(spec.nx, spec.ny)?;
    let labels: Vec<u8> = (0..grid.len())
        .map(|i| {
            let (x, y) = normalized_coords(grid, i);
            spec.ellipses.iter().rev().find(|e| e.contains(x, y)).map_or(0, |e| e.label)
        })
        .collect();
    let [bt1, bt2] = spec.background_t;
    let voxels: Vec<[f64; 3]> = labels
        .iter()
        .map(|&l| match l {
            0 => [0.0, bt1, bt2],
            k => {
                let t = &spec.tissues[k as usize - 1];
                [t.rho, t.t1, t.t2]
            }
        })
        .collect();
    Ok(Phantom { map: ParamMap::from_voxels(grid, &voxels)?, labels })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_is_background() {
        let spec = PhantomSpec { ellipses: vec![], ..PhantomSpec::desk(8) };
        let p = make_phantom(&spec).unwrap();
        assert!(p.map.rho.iter().all(|&r| r == 0.0));
        assert!(p.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn covering_ellipse_gives_constant_map() {
        let mut spec = PhantomSpec::desk(10);
        spec.ellipses = vec![Ellipse { cx: 0.0, cy: 0.0, a: 3.0, b: 3.0, angle_deg: 0.0, label: 2 }];
        let p = make_phantom(&spec).unwrap();
        assert!(p.map.voxels().iter().all(|v| *v == [0.86, 1.33, 0.083]));
    }

    #[test]
    fn labels_match_point_in_ellipse_oracle() {
        let spec = PhantomSpec::desk(64);
        let p = make_phantom(&spec).unwrap();
        let g = p.map.grid;
        let mut counts = [0usize; 6];
        for y in 0..64 {
            for x in 0..64 {
                let px = (x as f64 + 0.5) / 32.0 - 1.0;
                let py = (y as f64 + 0.5) / 32.0 - 1.0;
                let mut label = 0;
                for e in &spec.ellipses {
                    let th = e.angle_deg.to_radians();
                    let u = (px - e.cx) * th.cos() + (py - e.cy) * th.sin();
                    let v = -(px - e.cx) * th.sin() + (py - e.cy) * th.cos();
                    if u * u / (e.a * e.a) + v * v / (e.b * e.b) <= 1.0 {
                        label = e.label;
                    }
                }
                assert_eq!(p.labels[g.index(x, y)], label);
                counts[label as usize] += 1;
            }
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn rejects_tissue_outside_box() {
        let mut spec = PhantomSpec::desk(8);
        spec.tissues[0].t1 = 50.0;
        assert!(make_phantom(&spec).is_err());
    }
}
