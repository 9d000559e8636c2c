//! Implicit-diffusion / lagged-drift transport step shared by the upscaled
//! and the microscopic Nernst-Planck solvers.
//!
//! Each Picard iterate `v` produces a potential, face drift speeds and a
//! linear SPD solve per species:
//!
//! ```text
//! c (u - u_old)/dt + c L u = -div_h( z w(v³) · v )
//! ```
//!
//! where `c` is the storage capacity (porosity), `L` the diffusion operator
//! scaled by `c`, and `w` the face drift speed for a unit positive charge.
//! At the fixed point `u = v` this is the fully implicit upwind scheme.

use crate::error::{CoreError, Result};
use crate::grid::Grid;
use crate::linalg::{conjugate_gradient, CgOptions, FaceOperator, LinearOperator, NullSpace};

/// Densities below this are reported as a positivity failure.
pub const NEGATIVE_DENSITY_TOL: f64 = 1e-12;
/// Relative residual of the density solves; tight so that discrete mass is
/// conserved to round-off in the no-flux variant.
pub const DENSITY_SOLVE_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftScheme {
    Upwind,
    Central,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityBc {
    /// Homogeneous Dirichlet densities on `∂Ω`.
    Dirichlet,
    /// Zero total flux on `∂Ω`.
    NoFlux,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TransportFace {
    pub lo: usize,
    pub hi: usize,
    pub axis: usize,
}

/// Spatial transport operator for one species family on a bounded grid.
#[derive(Debug, Clone)]
pub struct TransportSystem {
    pub grid: Grid,
    pub capacity: f64,
    pub faces: Vec<TransportFace>,
    diffusion: FaceOperator,
    pub scheme: DriftScheme,
}

impl TransportSystem {
    /// `active` restricts transport to the fluid voxels; faces touching an
    /// inactive voxel carry no flux.
    pub fn new(grid: Grid, capacity: f64, active: Option<&[bool]>, bc: DensityBc, scheme: DriftScheme) -> Self {
        let inv_h2 = (grid.n * grid.n) as f64;
        let is_active = |i: usize| active.is_none_or(|m| m[i]);
        let faces: Vec<TransportFace> = grid
            .faces(false)
            .into_iter()
            .filter(|f| is_active(f.lo) && is_active(f.hi))
            .map(|f| TransportFace { lo: f.lo, hi: f.hi, axis: f.axis })
            .collect();
        let mut diffusion = FaceOperator::new(grid.len());
        for f in &faces {
            diffusion.add_face(f.lo, f.hi, capacity * inv_h2);
        }
        if bc == DensityBc::Dirichlet {
            for b in grid.boundary_faces() {
                if is_active(b.cell) {
                    diffusion.add_diag(b.cell, 2.0 * capacity * inv_h2);
                }
            }
        }
        Self { grid, capacity, faces, diffusion, scheme }
    }

    /// `div_h` of the advective flux `z w_f v_face`, per cell.
    pub fn drift_divergence(&self, v: &[f64], speed: &[f64], charge: f64) -> Vec<f64> {
        let inv_h = self.grid.n as f64;
        let mut out = vec![0.0; v.len()];
        for (f, &w0) in self.faces.iter().zip(speed) {
            let w = charge * w0;
            let carried = match self.scheme {
                DriftScheme::Upwind => {
                    if w > 0.0 {
                        v[f.lo]
                    } else {
                        v[f.hi]
                    }
                }
                DriftScheme::Central => 0.5 * (v[f.lo] + v[f.hi]),
            };
            let flux = w * carried * inv_h;
            out[f.lo] += flux;
            out[f.hi] -= flux;
        }
        out
    }

    /// Solve `(c/dt + c L) u = c/dt u_old - div_h(z w v)`.
    pub fn implicit_solve(&self, old: &[f64], v: &[f64], speed: &[f64], charge: f64, dt: f64) -> Result<Vec<f64>> {
        let shift = self.capacity / dt;
        let drift = self.drift_divergence(v, speed, charge);
        let rhs: Vec<f64> = old.iter().zip(&drift).map(|(o, d)| shift * o - d).collect();
        let op = Shifted { inner: &self.diffusion, shift };
        let opts = CgOptions { tol: DENSITY_SOLVE_TOL, max_iter: 20 * self.grid.n + 200, null_space: NullSpace::None };
        Ok(conjugate_gradient(&op, &rhs, Some(v), &opts)?.x)
    }
}

struct Shifted<'a> {
    inner: &'a FaceOperator,
    shift: f64,
}

impl LinearOperator for Shifted<'_> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.inner.apply(x, y);
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi += self.shift * xi;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        self.inner.diagonal().into_iter().map(|d| d + self.shift).collect()
    }
}

/// Discrete `L²` distance with cell-volume weights.
pub fn l2_distance(a: &[f64], b: &[f64], cell_volume: f64) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * cell_volume).sqrt()
}

/// Outcome of one accepted time step.
#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub densities: [Vec<f64>; 2],
    pub potential: Vec<f64>,
    /// `max_r ||u_r^{(k+1)} - u_r^{(k)}||` for each iteration.
    pub increments: Vec<f64>,
}

impl PicardOutcome {
    pub fn iterations(&self) -> usize {
        self.increments.len()
    }
}

/// One time step by fixed-point iteration on the densities.
///
/// `potential` maps densities (and a warm start) to the potential;
/// `speeds` maps the potential to drift speeds on `sys.faces` for a unit
/// positive charge.
#[allow(clippy::too_many_arguments)]
pub fn picard_step<P, W>(
    sys: &TransportSystem,
    old: [&[f64]; 2],
    warm_potential: &[f64],
    dt: f64,
    charges: [f64; 2],
    settings: &PicardSettings,
    mut potential: P,
    speeds: W,
) -> Result<PicardOutcome>
where
    P: FnMut(&[f64], &[f64], &[f64]) -> Result<Vec<f64>>,
    W: Fn(&[f64]) -> Vec<f64>,
{
    let vol = sys.grid.cell_volume();
    let mut v = [old[0].to_vec(), old[1].to_vec()];
    let mut phi = warm_potential.to_vec();
    let mut increments = Vec::new();
    loop {
        phi = potential(&v[0], &v[1], &phi)?;
        let w = speeds(&phi);
        let u0 = sys.implicit_solve(old[0], &v[0], &w, charges[0], dt)?;
        let u1 = sys.implicit_solve(old[1], &v[1], &w, charges[1], dt)?;
        let inc = l2_distance(&u0, &v[0], vol).max(l2_distance(&u1, &v[1], vol));
        increments.push(inc);
        v = [u0, u1];
        if inc <= settings.tol {
            break;
        }
        if increments.len() >= settings.max_iter {
            return Err(CoreError::PicardCap { iterations: increments.len(), increment: inc });
        }
    }
    let phi = potential(&v[0], &v[1], &phi)?;
    if sys.scheme == DriftScheme::Upwind {
        for u in &v {
            if let Some((index, &value)) = u.iter().enumerate().find(|(_, &x)| x < -NEGATIVE_DENSITY_TOL) {
                return Err(CoreError::NegativeDensity { value, index });
            }
        }
    }
    Ok(PicardOutcome { densities: v, potential: phi, increments })
}
