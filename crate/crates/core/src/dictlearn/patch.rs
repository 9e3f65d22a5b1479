//! Periodic patch operator, orthogonal transforms and the three block
//! updates of the alternating scheme (codes, transform, image).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, numerical, shape, Result};
use crate::forward::Fft2;
use crate::grid::Grid;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// All `p x p` patches with stride 1 and periodic wrap-around, one per
/// voxel origin. Every voxel lies in exactly `p^2` patches, so `R^T R = p^2 I`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOp {
    pub grid: Grid,
    pub p: usize,
}

impl PatchOp {
    pub fn new(grid: Grid, p: usize) -> Result<Self> {
        if p == 0 || p > grid.nx.min(grid.ny) {
            return Err(invalid(format!("patch side {p} must lie in 1..={}", grid.nx.min(grid.ny))));
        }
        Ok(PatchOp { grid, p })
    }

    /// Pixels per patch.
    pub fn size(&self) -> usize {
        self.p * self.p
    }

    #[inline]
    fn source(&self, origin: usize, k: usize) -> usize {
        let (x, y) = self.grid.coords(origin);
        let (dy, dx) = (k / self.p, k % self.p);
        self.grid.index((x + dx) % self.grid.nx, (y + dy) % self.grid.ny)
    }

    /// `P x N` matrix whose column `j` is the patch at origin `j`.
    pub fn extract(&self, u: &[Complex64]) -> Result<DMatrix<Complex64>> {
        self.extract_channels(&[u])
    }

    /// Patches of several images stacked column-wise (channel-major).
    pub fn extract_channels(&self, chans: &[&[Complex64]]) -> Result<DMatrix<Complex64>> {
        let (n, pp) = (self.grid.len(), self.size());
        if chans.iter().any(|c| c.len() != n) {
            return Err(shape("image does not match patch grid"));
        }
        let mut data = vec![ZERO; pp * n * chans.len()];
        data.par_chunks_mut(pp).enumerate().for_each(|(col, out)| {
            let (c, j) = (col / n, col % n);
            for (k, o) in out.iter_mut().enumerate() {
                *o = chans[c][self.source(j, k)];
            }
        });
        Ok(DMatrix::from_vec(pp, n * chans.len(), data))
    }

    /// Scatter-add of patch columns back into the image(s).
    pub fn adjoint(&self, q: &DMatrix<Complex64>) -> Result<Vec<Complex64>> {
        let mut v = self.adjoint_channels(q, 1)?;
        Ok(v.pop().unwrap_or_default())
    }

    pub fn adjoint_channels(&self, q: &DMatrix<Complex64>, channels: usize) -> Result<Vec<Vec<Complex64>>> {
        let (n, pp) = (self.grid.len(), self.size());
        if q.nrows() != pp || q.ncols() != n * channels {
            return Err(shape(format!("patch matrix is {}x{}, expected {pp}x{}", q.nrows(), q.ncols(), n * channels)));
        }
        let s = q.as_slice();
        // Gather form of the scatter: voxel v receives entry k of the patch
        // whose origin is v shifted back by offset k. Fixed order per voxel.
        Ok((0..channels)
            .map(|c| {
                (0..n)
                    .into_par_iter()
                    .map(|v| {
                        let (x, y) = self.grid.coords(v);
                        let mut acc = ZERO;
                        for k in 0..pp {
                            let (dy, dx) = (k / self.p, k % self.p);
                            let ox = (x + self.grid.nx - dx % self.grid.nx) % self.grid.nx;
                            let oy = (y + self.grid.ny - dy % self.grid.ny) % self.grid.ny;
                            let origin = self.grid.index(ox, oy);
                            acc += s[(c * n + origin) * pp + k];
                        }
                        acc
                    })
                    .collect()
            })
            .collect())
    }
}

/// Square unitary transform whose columns are the atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Transform {
    pub d: DMatrix<Complex64>,
}

fn dct_matrix(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |k, n| {
        let a = if k == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
        a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * p) as f64).cos()
    })
}

impl Transform {
    pub fn identity(size: usize) -> Self {
        Transform { d: DMatrix::identity(size, size) }
    }

    /// Orthonormal separable 2D DCT-II basis for `p x p` patches.
    pub fn dct(p: usize) -> Self {
        let c = dct_matrix(p).transpose();
        let k = c.kronecker(&c);
        Transform { d: k.map(|v| Complex64::new(v, 0.0)) }
    }

    pub fn size(&self) -> usize {
        self.d.nrows()
    }

    /// `max |D^H D - I|` entrywise.
    pub fn orthogonality_error(&self) -> f64 {
        let g = self.d.adjoint() * &self.d;
        let n = g.nrows();
        let mut m = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let t = if i == j { g[(i, j)] - 1.0 } else { g[(i, j)] };
                m = m.max(t.norm());
            }
        }
        m
    }
}

/// Sparsity penalty: `L0` counts nonzeros, `L1` sums magnitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Sparsity {
    #[default]
    L0,
    L1,
}

impl Sparsity {
    pub fn from_index(s: u8) -> Result<Self> {
        match s {
            0 => Ok(Sparsity::L0),
            1 => Ok(Sparsity::L1),
            _ => Err(invalid(format!("sparsity exponent must be 0 or 1, got {s}"))),
        }
    }

    pub fn penalty(&self, c: &DMatrix<Complex64>) -> f64 {
        match self {
            Sparsity::L0 => c.iter().filter(|z| **z != ZERO).count() as f64,
            Sparsity::L1 => c.iter().map(|z| z.norm()).sum(),
        }
    }

    /// Proximal map of `t * penalty` for a single coefficient.
    #[inline]
    pub fn prox(&self, v: Complex64, t: f64) -> Complex64 {
        match self {
            Sparsity::L0 => {
                if v.norm_sqr() > 2.0 * t {
                    v
                } else {
                    ZERO
                }
            }
            Sparsity::L1 => {
                let a = v.norm();
                if a > t {
                    v * ((a - t) / a)
                } else {
                    ZERO
                }
            }
        }
    }
}

/// Minimizes `1/2 ||Ru - D C||^2 + lambda_c/2 ||C - C_k||^2 + lambda ||C||_s`
/// for unitary `D`, entrywise.
pub fn sparse_code_update(
    ru: &DMatrix<Complex64>,
    d: &Transform,
    ck: &DMatrix<Complex64>,
    lambda: f64,
    lambda_c: f64,
    s: Sparsity,
) -> Result<DMatrix<Complex64>> {
    if ru.shape() != ck.shape() || d.size() != ru.nrows() {
        return Err(shape("sparse code update: inconsistent shapes"));
    }
    if !(lambda >= 0.0) || !(lambda_c >= 0.0) {
        return Err(invalid("sparse code weights must be nonnegative"));
    }
    let mut v = d.d.adjoint() * ru;
    let (w, t) = (1.0 + lambda_c, lambda / (1.0 + lambda_c));
    v.as_mut_slice().par_iter_mut().zip(ck.as_slice().par_iter()).for_each(|(z, c)| {
        *z = s.prox((*z + c * lambda_c) / w, t);
    });
    Ok(v)
}

/// Procrustes solution `argmax_D Re tr(D^H M)` over unitary `D` for
/// `M = Ru C^H + lambda_d D_k`.
pub fn transform_update(
    ru: &DMatrix<Complex64>,
    c: &DMatrix<Complex64>,
    dk: &Transform,
    lambda_d: f64,
) -> Result<Transform> {
    if ru.shape() != c.shape() || dk.size() != ru.nrows() {
        return Err(shape("transform update: inconsistent shapes"));
    }
    let m = ru * c.adjoint() + dk.d.map(|z| z * lambda_d);
    procrustes(m)
}

pub fn procrustes(m: DMatrix<Complex64>) -> Result<Transform> {
    let svd = m.svd(true, true);
    match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => Ok(Transform { d: u * vt }),
        _ => Err(numerical("SVD failed in transform update")),
    }
}

/// Exact solve of `(mu A^H A + R^T R + lambda_u I) u = mu A^H y + R^T(DC) + lambda_u u_k`
/// for one Fourier-sampled frame. `y_full` is the k-space with zeros at
/// unsampled positions and `mask` its 0/1 indicator.
#[allow(clippy::too_many_arguments)]
pub fn image_update(
    fft: &Fft2,
    mask: &[f64],
    y_full: &[Complex64],
    patches: &PatchOp,
    dc: &DMatrix<Complex64>,
    uk: &[Complex64],
    mu: f64,
    lambda_u: f64,
) -> Result<Vec<Complex64>> {
    let n = patches.grid.len();
    if mask.len() != n || y_full.len() != n || uk.len() != n || fft.grid() != patches.grid {
        return Err(shape("image update: inconsistent shapes"));
    }
    let pp = patches.size() as f64;
    if pp + lambda_u <= 0.0 || !(mu >= 0.0) {
        return Err(invalid("image update needs mu >= 0 and a positive diagonal"));
    }
    let mut rhs = patches.adjoint(dc)?;
    rhs.iter_mut().zip(uk).for_each(|(r, u)| *r += u * lambda_u);
    fft.forward(&mut rhs);
    for k in 0..n {
        rhs[k] = (rhs[k] + y_full[k] * mu) / (mu * mask[k] + pp + lambda_u);
    }
    fft.inverse(&mut rhs);
    Ok(rhs)
}
