//! Periodic corrector problems on the reference cell.
//!
//! All problems share one discretization: cell-centered finite volumes on
//! the periodic voxel grid, face coefficients by harmonic averaging, and
//! mean-zero CG for the singular operator. With a fluid mask, only faces
//! between two fluid voxels couple, which imposes zero flux on the solid
//! interface.

use rayon::prelude::*;
use tracing::debug;

use crate::error::{CoreError, Result};
use crate::grid::{Grid, ScalarField};
use crate::linalg::{check_compatible, conjugate_gradient, CgOptions, FaceOperator, NullSpace};
use crate::unitcell::UnitCell;

/// Relative tolerance for the zero-sum test of a singular rhs.
pub const RHS_COMPATIBILITY: f64 = 1e-10;
/// Looser compatibility limit for the second-order rhs, whose zero sum
/// depends on the assembled effective permittivity.
pub const ZETA_RHS_COMPATIBILITY: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Relative residual target.
    pub tol: f64,
    /// Iteration cap is `iter_factor * m` for an `m`-voxel-per-axis grid.
    pub iter_factor: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-10, iter_factor: 50 }
    }
}

impl SolverSettings {
    pub fn max_iter(&self, n: usize) -> usize {
        self.iter_factor.max(1) * n.max(1)
    }
}

#[derive(Debug, Clone)]
pub struct PeriodicEllipticProblem {
    pub coefficient: ScalarField,
    /// Per-voxel right-hand side of `-div(κ ∇u) = f`.
    pub rhs: Vec<f64>,
    pub domain_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub field: ScalarField,
    pub residual: f64,
    pub iterations: usize,
}

#[inline]
pub(crate) fn harmonic(a: f64, b: f64) -> f64 {
    if a == b {
        a
    } else {
        2.0 * a * b / (a + b)
    }
}

/// `+axis` periodic neighbour of `lo`.
#[inline]
pub(crate) fn periodic_hi(g: &Grid, lo: usize, axis: usize) -> usize {
    g.neighbor(lo, axis, true, true).expect("periodic neighbour")
}

/// Harmonic face coefficients for faces normal to `axis`, indexed by the
/// lower cell.
pub(crate) fn face_coefficients(kappa: &ScalarField, axis: usize) -> Vec<f64> {
    let g = kappa.grid;
    (0..g.len()).map(|lo| harmonic(kappa.values[lo], kappa.values[periodic_hi(&g, lo, axis)])).collect()
}

/// Face gradients `(u_hi - u_lo) / h` for faces normal to `axis`, indexed
/// by the lower cell.
pub(crate) fn face_gradients(u: &[f64], g: &Grid, axis: usize) -> Vec<f64> {
    let inv_h = g.n as f64;
    (0..g.len()).map(|lo| (u[periodic_hi(g, lo, axis)] - u[lo]) * inv_h).collect()
}

/// Whether the face normal to `axis` above `lo` joins two fluid voxels.
#[inline]
pub(crate) fn fluid_face(mask: &[bool], g: &Grid, lo: usize, axis: usize) -> bool {
    mask[lo] && mask[periodic_hi(g, lo, axis)]
}

fn periodic_operator(coef: &ScalarField, mask: Option<&[bool]>) -> FaceOperator {
    let g = coef.grid;
    let inv_h2 = (g.n * g.n) as f64;
    let mut op = FaceOperator::new(g.len());
    for axis in 0..g.dim {
        for lo in 0..g.len() {
            let hi = periodic_hi(&g, lo, axis);
            if hi == lo {
                continue;
            }
            if let Some(m) = mask {
                if !(m[lo] && m[hi]) {
                    continue;
                }
            }
            op.add_face(lo, hi, harmonic(coef.values[lo], coef.values[hi]) * inv_h2);
        }
    }
    op
}

fn check_coefficient(coef: &ScalarField) -> Result<()> {
    let (lo, hi) = coef.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(lo > 0.0 && hi.is_finite()) {
        return Err(CoreError::Parameter(format!(
            "coefficient must lie in [c, C] with c > 0; observed range [{lo}, {hi}]"
        )));
    }
    Ok(())
}

fn solve_with_limit(
    problem: &PeriodicEllipticProblem,
    settings: &SolverSettings,
    compat: f64,
) -> Result<EllipticSolution> {
    let g = problem.coefficient.grid;
    if problem.rhs.len() != g.len() {
        return Err(CoreError::GridMismatch(format!("rhs has {} entries, grid has {}", problem.rhs.len(), g.len())));
    }
    if !(settings.tol > 0.0) {
        return Err(CoreError::Parameter(format!("tolerance must be > 0, got {}", settings.tol)));
    }
    check_coefficient(&problem.coefficient)?;
    let mask = problem.domain_mask.as_deref();
    let mut rhs = problem.rhs.clone();
    if let Some(m) = mask {
        if m.len() != g.len() {
            return Err(CoreError::GridMismatch("domain mask does not match the grid".into()));
        }
        for (b, &f) in rhs.iter_mut().zip(m) {
            if !f {
                *b = 0.0;
            }
        }
    }
    check_compatible(&rhs, mask, compat)?;
    let op = periodic_operator(&problem.coefficient, mask);
    let opts =
        CgOptions { tol: settings.tol, max_iter: settings.max_iter(g.n), null_space: NullSpace::Constants(mask) };
    let out = conjugate_gradient(&op, &rhs, None, &opts)?;
    debug!(iterations = out.iterations, residual = out.residual, "periodic elliptic solve");
    Ok(EllipticSolution {
        field: ScalarField { grid: g, values: out.x },
        residual: out.residual,
        iterations: out.iterations,
    })
}

/// Mean-zero solution of the periodic problem `-div(κ ∇u) = f` (restricted
/// to the fluid with no-flux interfaces when a mask is given).
pub fn solve_periodic_elliptic(
    problem: &PeriodicEllipticProblem,
    settings: &SolverSettings,
) -> Result<EllipticSolution> {
    solve_with_limit(problem, settings, RHS_COMPATIBILITY)
}

/// Apply the discrete periodic operator `-div_h(κ ∇_h u)`.
pub fn apply_periodic_operator(coef: &ScalarField, mask: Option<&[bool]>, u: &[f64]) -> Vec<f64> {
    use crate::linalg::LinearOperator;
    let op = periodic_operator(coef, mask);
    let mut y = vec![0.0; u.len()];
    op.apply(u, &mut y);
    y
}

/// Per-voxel rhs of `div(κ(∇ξ - e_j)) = 0`, i.e. `-(κ_{j+1/2} - κ_{j-1/2}) / h`.
fn potential_rhs(kappa: &ScalarField, axis: usize) -> Vec<f64> {
    let g = kappa.grid;
    let kf = face_coefficients(kappa, axis);
    let inv_h = g.n as f64;
    (0..g.len())
        .map(|i| {
            let below = g.neighbor(i, axis, false, true).unwrap();
            -(kf[i] - kf[below]) * inv_h
        })
        .collect()
}

/// Potential correctors `ξ^{3_k}`, one per axis.
pub fn solve_potential_corrector(
    cell: &UnitCell,
    kappa: &ScalarField,
    settings: &SolverSettings,
) -> Result<Vec<EllipticSolution>> {
    if kappa.grid != cell.grid() {
        return Err(CoreError::GridMismatch("permittivity field is not on the cell grid".into()));
    }
    (0..cell.dim())
        .into_par_iter()
        .map(|axis| {
            let problem = PeriodicEllipticProblem {
                coefficient: kappa.clone(),
                rhs: potential_rhs(kappa, axis),
                domain_mask: None,
            };
            solve_periodic_elliptic(&problem, settings)
        })
        .collect()
}

/// Geometry factor `η^k` of the density correctors, posed on the fluid part
/// with a no-flux interface: `(∇η, ∇φ)_{Y^s} = -(∇ξ^{3_k}, ∇φ)_{Y^s}`.
/// Solid voxels store zero.
pub fn solve_density_corrector_shape(
    cell: &UnitCell,
    xi3: &[ScalarField],
    settings: &SolverSettings,
) -> Result<Vec<EllipticSolution>> {
    cell.ensure_connected()?;
    let g = cell.grid();
    let mask = cell.fluid_mask().to_vec();
    let unit = ScalarField { grid: g, values: vec![1.0; g.len()] };
    xi3.par_iter()
        .map(|xi| {
            let rhs: Vec<f64> =
                apply_periodic_operator(&unit, Some(&mask), &xi.values).into_iter().map(|v| -v).collect();
            let problem = PeriodicEllipticProblem { coefficient: unit.clone(), rhs, domain_mask: Some(mask.clone()) };
            solve_periodic_elliptic(&problem, settings)
        })
        .collect()
}

/// Per-voxel rhs of the second-order potential corrector `ζ^{3_{kl}}`:
/// `-ε⁰_kl - ∂_k(κ ξ^{3_l}) - κ ∂_k(ξ^{3_l} - y_l)`.
///
/// The conservative difference of `κ ξ` sums to zero and the last term uses
/// the same face fluxes as the flux-form `ε⁰`, so the total vanishes exactly
/// when `eps_kl` is the flux-form entry.
pub fn second_order_rhs(kappa: &ScalarField, xi_l: &[f64], k: usize, l: usize, eps_kl: f64) -> Vec<f64> {
    let g = kappa.grid;
    let inv_h = g.n as f64;
    let kf = face_coefficients(kappa, k);
    let gr = face_gradients(xi_l, &g, k);
    let delta = if k == l { 1.0 } else { 0.0 };
    let flux: Vec<f64> = (0..g.len()).map(|lo| kf[lo] * 0.5 * (xi_l[lo] + xi_l[periodic_hi(&g, lo, k)])).collect();
    let drift: Vec<f64> = (0..g.len()).map(|lo| kf[lo] * (gr[lo] - delta)).collect();
    (0..g.len())
        .map(|i| {
            let below = g.neighbor(i, k, false, true).unwrap();
            let div = (flux[i] - flux[below]) * inv_h;
            let voxel = 0.5 * (drift[i] + drift[below]);
            -eps_kl - div - voxel
        })
        .collect()
}

/// Second-order potential correctors, row-major in `(k, l)`.
pub fn solve_second_order_potential_corrector(
    cell: &UnitCell,
    kappa: &ScalarField,
    xi3: &[ScalarField],
    eps0: &nalgebra::DMatrix<f64>,
    settings: &SolverSettings,
) -> Result<Vec<EllipticSolution>> {
    let n = cell.dim();
    if eps0.nrows() != n || eps0.ncols() != n || xi3.len() != n {
        return Err(CoreError::GridMismatch("corrector/tensor dimension mismatch".into()));
    }
    (0..n * n)
        .into_par_iter()
        .map(|kl| {
            let (k, l) = (kl / n, kl % n);
            let rhs = second_order_rhs(kappa, &xi3[l].values, k, l, eps0[(k, l)]);
            // The rhs mean is exactly the defect of ε⁰_kl against its flux
            // form, so measure it on the scale of ε⁰ rather than of the
            // (cancelled) rhs itself.
            let defect = (rhs.iter().sum::<f64>() / rhs.len() as f64).abs();
            let limit = ZETA_RHS_COMPATIBILITY * eps0.amax();
            if defect > limit {
                return Err(CoreError::Incompatible { sum: defect, limit });
            }
            let problem = PeriodicEllipticProblem { coefficient: kappa.clone(), rhs, domain_mask: None };
            solve_with_limit(&problem, settings, f64::INFINITY)
        })
        .collect()
}

/// All stored correctors for one cell.
#[derive(Debug, Clone)]
pub struct CorrectorSet {
    pub xi3: Vec<ScalarField>,
    pub eta: Vec<ScalarField>,
    /// `ζ^{3_{kl}}` stored at `k * dim + l`.
    pub zeta3: Option<Vec<ScalarField>>,
    /// Final relative residual per solved field, with its name.
    pub residuals: Vec<(String, f64)>,
}

impl CorrectorSet {
    pub fn dim(&self) -> usize {
        self.xi3.len()
    }

    pub fn zeta(&self, k: usize, l: usize) -> Option<&ScalarField> {
        self.zeta3.as_ref().map(|z| &z[k * self.dim() + l])
    }

    /// `ξ^{r_k} = z_r u₀ʳ η^k` evaluated at one voxel.
    pub fn density_corrector(&self, k: usize, z: f64, u0: f64, voxel: usize) -> f64 {
        z * u0 * self.eta[k].values[voxel]
    }

    /// Named fields in export order.
    pub fn named_fields(&self) -> Vec<(String, &ScalarField)> {
        let n = self.dim();
        let mut out: Vec<(String, &ScalarField)> = Vec::new();
        for (k, f) in self.xi3.iter().enumerate() {
            out.push((format!("xi3_{}", k + 1), f));
        }
        for (k, f) in self.eta.iter().enumerate() {
            out.push((format!("eta_{}", k + 1), f));
        }
        if let Some(z) = &self.zeta3 {
            for (kl, f) in z.iter().enumerate() {
                out.push((format!("zeta3_{}{}", kl / n + 1, kl % n + 1), f));
            }
        }
        out
    }
}
