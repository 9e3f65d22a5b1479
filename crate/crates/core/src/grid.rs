use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// A 2D voxel grid.
///
/// Voxels are linearized row-major: `i = y * nx + x`, so `x` varies fastest.
/// Every array in the crate (images, masks, parameter maps, k-space grids)
/// follows this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
}

impl Grid {
    pub fn new(nx: usize, ny: usize) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(invalid(format!("grid dimensions must be positive, got {nx}x{ny}")));
        }
        Ok(Grid { nx, ny })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.nx && y < self.ny);
        y * self.nx + x
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize) {
        (i % self.nx, i / self.nx)
    }
}
