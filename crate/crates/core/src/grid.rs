//! Uniform cell-centered grids on the unit cube and scalar fields over them.
//!
//! Every grid in the toolkit covers `[0,1]^dim` with `n` cells per axis.
//! Values are stored row-major with axis 0 varying slowest.

use crate::error::{CoreError, Result};

/// Which physical grid a field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GridRole {
    /// Reference cell `Y`.
    Cell,
    /// Homogenized domain.
    Macro,
    /// Fine grid of the tiled microscopic domain.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub dim: usize,
    pub n: usize,
    pub role: GridRole,
}

/// A face between two neighbouring cells. `hi` is the `+axis` neighbour of
/// `lo` (wrapping around for periodic grids).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
}

/// A cell touching the outer boundary of a non-periodic grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryFace {
    pub cell: usize,
    pub axis: usize,
    /// `false` for the face at coordinate 0, `true` for the face at 1.
    pub upper: bool,
}

impl Grid {
    pub fn new(dim: usize, n: usize, role: GridRole) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(CoreError::Parameter(format!("dimension must be 1, 2 or 3, got {dim}")));
        }
        if n == 0 {
            return Err(CoreError::Parameter("grid needs at least one cell per axis".into()));
        }
        Ok(Self { dim, n, role })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    /// Volume of one cell, `h^dim`.
    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h().powi(self.dim as i32)
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim - 1 - axis) as u32)
    }

    pub fn index(&self, ijk: &[usize]) -> usize {
        debug_assert_eq!(ijk.len(), self.dim);
        ijk.iter().fold(0, |acc, &i| acc * self.n + i)
    }

    pub fn coords(&self, mut idx: usize) -> [usize; 3] {
        let mut out = [0usize; 3];
        for axis in (0..self.dim).rev() {
            out[axis] = idx % self.n;
            idx /= self.n;
        }
        out
    }

    /// Coordinate of the cell center along `axis`.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.h()
    }

    pub fn centers(&self, idx: usize) -> [f64; 3] {
        let c = self.coords(idx);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = self.center(c[a]);
        }
        x
    }

    /// Neighbour along `axis` in direction `+1`/`-1`. Returns `None` across
    /// the boundary unless `periodic`.
    pub fn neighbor(&self, idx: usize, axis: usize, forward: bool, periodic: bool) -> Option<usize> {
        let c = self.coords(idx)[axis];
        let s = self.stride(axis);
        match (forward, c) {
            (true, c) if c + 1 < self.n => Some(idx + s),
            (true, _) => periodic.then(|| idx - (self.n - 1) * s),
            (false, 0) => periodic.then(|| idx + (self.n - 1) * s),
            (false, _) => Some(idx - s),
        }
    }

    /// All faces between cells, axis-major. Periodic grids include the
    /// wrap-around faces, so there are exactly `dim * len` of them.
    pub fn faces(&self, periodic: bool) -> Vec<Face> {
        let mut out = Vec::with_capacity(self.dim * self.len());
        for axis in 0..self.dim {
            for lo in 0..self.len() {
                if let Some(hi) = self.neighbor(lo, axis, true, periodic) {
                    if hi != lo {
                        out.push(Face { lo, hi, axis });
                    }
                }
            }
        }
        out
    }

    pub fn boundary_faces(&self) -> Vec<BoundaryFace> {
        let mut out = Vec::new();
        for axis in 0..self.dim {
            for cell in 0..self.len() {
                let c = self.coords(cell)[axis];
                if c == 0 {
                    out.push(BoundaryFace { cell, axis, upper: false });
                }
                if c + 1 == self.n {
                    out.push(BoundaryFace { cell, axis, upper: true });
                }
            }
        }
        out
    }
}

/// Cell-centered scalar values over a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        Self { grid, values: vec![0.0; grid.len()] }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(CoreError::GridMismatch(format!("{} values for a grid of {} cells", values.len(), grid.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CoreError::Parameter(format!("non-finite value at voxel {i}")));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn([f64; 3]) -> f64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.centers(i))).collect();
        Self { grid, values }
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    /// Mean over the cells selected by `mask` (all cells when `None`).
    pub fn mean(&self, mask: Option<&[bool]>) -> f64 {
        masked_mean(&self.values, mask)
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }

    /// Discrete `L²(Ω)` norm with cell-volume weights.
    pub fn l2(&self) -> f64 {
        (self.values.iter().map(|v| v * v).sum::<f64>() * self.grid.cell_volume()).sqrt()
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn masked_mean(v: &[f64], mask: Option<&[bool]>) -> f64 {
    match mask {
        None => v.iter().sum::<f64>() / v.len() as f64,
        Some(m) => {
            let (s, c) = v.iter().zip(m).filter(|(_, &f)| f).fold((0.0, 0usize), |(s, c), (x, _)| (s + x, c + 1));
            if c == 0 {
                0.0
            } else {
                s / c as f64
            }
        }
    }
}

/// Subtract the (masked) mean; entries outside the mask are left untouched.
pub(crate) fn project_mean_zero(v: &mut [f64], mask: Option<&[bool]>) {
    let mean = masked_mean(v, mask);
    match mask {
        None => v.iter_mut().for_each(|x| *x -= mean),
        Some(m) => v.iter_mut().zip(m).filter(|(_, &f)| f).for_each(|(x, _)| *x -= mean),
    }
}
