//! Voxelized periodic reference cell: geometry, fluid indicator, porosity and
//! the two-phase permittivity field.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::grid::{Grid, GridRole, ScalarField};

/// Declarative description of the pore geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometrySpec {
    /// No solid phase.
    Full,
    /// Fluid slab `y_axis < fluid_fraction` with layers normal to `axis`
    /// (0-based).
    Laminate { fluid_fraction: f64, axis: usize },
    /// Centered solid sphere (disc in 2D) of the given radius; fluid outside.
    Disc { radius: f64 },
    /// Quadrant checkerboard: fluid where `(y_0 < 1/2) xor (y_1 < 1/2)`.
    Checkerboard,
    /// Explicit voxel mask, `true` = fluid.
    Mask { mask: Vec<bool> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PermittivityParams {
    /// Dimensionless Debye length.
    pub lambda: f64,
    /// Solid/fluid permittivity ratio.
    pub alpha: f64,
}

impl PermittivityParams {
    pub fn new(lambda: f64, alpha: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(CoreError::Parameter(format!("lambda must be > 0, got {lambda}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CoreError::Parameter(format!("alpha must be > 0, got {alpha}")));
        }
        Ok(Self { lambda, alpha })
    }

    /// Permittivity of the fluid phase, `λ²`.
    pub fn fluid(&self) -> f64 {
        self.lambda * self.lambda
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitCell {
    grid: Grid,
    fluid_mask: Vec<bool>,
    geometry: GeometrySpec,
}

pub const MIN_RESOLUTION: usize = 4;

/// Rasterize `shape` on an `m^dim` voxel grid by voxel-center membership.
pub fn build_unit_cell(shape: &GeometrySpec, dim: usize, m: usize) -> Result<UnitCell> {
    if m < MIN_RESOLUTION {
        return Err(CoreError::Geometry(format!("resolution must be >= {MIN_RESOLUTION}, got {m}")));
    }
    let grid = Grid::new(dim, m, GridRole::Cell)?;
    let fluid_mask: Vec<bool> = match shape {
        GeometrySpec::Full => vec![true; grid.len()],
        GeometrySpec::Laminate { fluid_fraction, axis } => {
            if *axis >= dim {
                return Err(CoreError::Geometry(format!("laminate axis {} out of range for dim {dim}", axis + 1)));
            }
            if !(*fluid_fraction > 0.0 && *fluid_fraction <= 1.0) {
                return Err(CoreError::Geometry(format!("laminate fraction must lie in (0,1], got {fluid_fraction}")));
            }
            (0..grid.len()).map(|i| grid.centers(i)[*axis] < *fluid_fraction).collect()
        }
        GeometrySpec::Disc { radius } => {
            if !(*radius >= 0.0) {
                return Err(CoreError::Geometry(format!("radius must be non-negative, got {radius}")));
            }
            (0..grid.len())
                .map(|i| {
                    let x = grid.centers(i);
                    let r2: f64 = (0..dim).map(|a| (x[a] - 0.5).powi(2)).sum();
                    r2 > radius * radius
                })
                .collect()
        }
        GeometrySpec::Checkerboard => {
            if dim < 2 {
                return Err(CoreError::Geometry("checkerboard needs dim >= 2".into()));
            }
            (0..grid.len())
                .map(|i| {
                    let x = grid.centers(i);
                    (x[0] < 0.5) ^ (x[1] < 0.5)
                })
                .collect()
        }
        GeometrySpec::Mask { mask } => {
            if mask.len() != grid.len() {
                return Err(CoreError::Geometry(format!("mask has {} entries, expected {}", mask.len(), grid.len())));
            }
            mask.clone()
        }
    };
    if !fluid_mask.iter().any(|&f| f) {
        return Err(CoreError::Geometry("empty fluid region".into()));
    }
    Ok(UnitCell { grid, fluid_mask, geometry: shape.clone() })
}

impl UnitCell {
    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn resolution(&self) -> usize {
        self.grid.n
    }

    pub fn fluid_mask(&self) -> &[bool] {
        &self.fluid_mask
    }

    pub fn geometry(&self) -> &GeometrySpec {
        &self.geometry
    }

    pub fn has_solid(&self) -> bool {
        self.fluid_mask.iter().any(|&f| !f)
    }

    pub fn fluid_count(&self) -> usize {
        self.fluid_mask.iter().filter(|&&f| f).count()
    }

    /// Number of face-connected fluid components, with periodic wrap.
    pub fn fluid_components(&self) -> usize {
        let g = self.grid;
        let mut seen = vec![false; g.len()];
        let mut components = 0;
        let mut queue = VecDeque::new();
        for start in 0..g.len() {
            if !self.fluid_mask[start] || seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push_back(start);
            while let Some(i) = queue.pop_front() {
                for axis in 0..g.dim {
                    for fwd in [true, false] {
                        if let Some(j) = g.neighbor(i, axis, fwd, true) {
                            if self.fluid_mask[j] && !seen[j] {
                                seen[j] = true;
                                queue.push_back(j);
                            }
                        }
                    }
                }
            }
        }
        components
    }

    pub fn ensure_connected(&self) -> Result<()> {
        match self.fluid_components() {
            1 => Ok(()),
            components => Err(CoreError::Disconnected { components }),
        }
    }

    /// Stable hash of dimension, resolution and mask.
    pub fn geometry_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.grid.dim as u64).to_le_bytes());
        h.update((self.grid.n as u64).to_le_bytes());
        h.update(self.fluid_mask.iter().map(|&f| f as u8).collect::<Vec<_>>());
        hex::encode(h.finalize())
    }
}

/// Fluid volume fraction `|Y^s| / |Y|`.
pub fn porosity(cell: &UnitCell) -> f64 {
    cell.fluid_count() as f64 / cell.grid.len() as f64
}

/// Two-valued permittivity: `λ²` on fluid voxels, `α` on solid voxels.
pub fn permittivity_field(cell: &UnitCell, params: &PermittivityParams) -> ScalarField {
    let fluid = params.fluid();
    let values = cell.fluid_mask.iter().map(|&f| if f { fluid } else { params.alpha }).collect();
    ScalarField { grid: cell.grid, values }
}
