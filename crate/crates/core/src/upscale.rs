//! Effective tensors assembled from the cell correctors.
//!
//! Gradients entering the quadratures are face gradients of the same
//! finite-volume scheme used for the cell problems, which keeps the flux
//! and energy forms of `ε⁰` identical up to the linear-solver residual.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cellcorrect::{
    face_coefficients, face_gradients, fluid_face, solve_density_corrector_shape, solve_potential_corrector,
    solve_second_order_potential_corrector, CorrectorSet, SolverSettings,
};
use crate::error::{CoreError, Result};
use crate::grid::ScalarField;
use crate::unitcell::{permittivity_field, porosity, PermittivityParams, UnitCell};

/// Flux-form and energy-form `ε⁰` must agree to this relative tolerance.
pub const FLUX_ENERGY_AGREEMENT: f64 = 1e-8;
pub const SYMMETRY_TOL: f64 = 1e-8;
pub const BOUNDS_SLACK: f64 = 1e-6;

pub const CHARGES: [f64; 2] = [1.0, -1.0];

mod matrix_serde {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(serde::de::Error::custom("tensor must be square"));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub geometry_hash: String,
    pub resolution: usize,
    pub solver_tol: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// Voigt (arithmetic) and Reuss (harmonic) means of the cell permittivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub reuss: f64,
    pub voigt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDiagnostics {
    /// max |flux - energy| / max |ε⁰|.
    pub flux_energy_defect: f64,
    /// max |ε⁰ - ε⁰ᵀ| / max |ε⁰|.
    pub symmetry_defect: f64,
    pub eps0_eigenvalues: Vec<f64>,
    /// max |Ĥ - Ĥᵀ|; Ĥ is not symmetrized.
    pub hhat_asymmetry: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveTensors {
    pub dim: usize,
    pub p: f64,
    #[serde(with = "matrix_serde")]
    pub eps0: DMatrix<f64>,
    #[serde(rename = "M", with = "matrix_serde")]
    pub m: DMatrix<f64>,
    #[serde(rename = "Hhat", with = "matrix_serde")]
    pub hhat: DMatrix<f64>,
    pub bounds: Bounds,
    pub diagnostics: TensorDiagnostics,
    pub provenance: Provenance,
}

impl EffectiveTensors {
    /// Tensors of a homogeneous medium: `p`, `ε⁰ = eps I`, `M = p I`, `Ĥ = 0`.
    pub fn homogeneous(dim: usize, p: f64, eps: f64) -> Self {
        Self::from_parts(
            p,
            DMatrix::identity(dim, dim) * eps,
            DMatrix::identity(dim, dim) * p,
            DMatrix::zeros(dim, dim),
        )
    }

    /// Assemble from explicit tensors; diagnostics are recomputed.
    pub fn from_parts(p: f64, eps0: DMatrix<f64>, m: DMatrix<f64>, hhat: DMatrix<f64>) -> Self {
        let dim = eps0.nrows();
        let eig = symmetric_eigenvalues(&eps0);
        let lo = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self {
            dim,
            p,
            bounds: Bounds { reuss: lo, voigt: hi },
            diagnostics: TensorDiagnostics {
                flux_energy_defect: 0.0,
                symmetry_defect: symmetry_defect(&eps0),
                eps0_eigenvalues: eig,
                hhat_asymmetry: (&hhat - hhat.transpose()).amax(),
            },
            eps0,
            m,
            hhat,
            provenance: Provenance { geometry_hash: String::new(), resolution: 0, solver_tol: 0.0, config_hash: None },
        }
    }

    /// `𝔻ʳ = z_r uʳ Ĥ` at a sampled density.
    pub fn diffusion_tensor(&self, species: usize, density: f64) -> DMatrix<f64> {
        &self.hhat * (CHARGES[species] * density)
    }

    /// Combined drift tensor `𝕄 - Ĥ` used by the macroscopic stepper.
    pub fn drift_tensor(&self) -> DMatrix<f64> {
        &self.m - &self.hhat
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        if t.m.nrows() != t.dim || t.eps0.nrows() != t.dim || t.hhat.nrows() != t.dim {
            return Err(CoreError::Format("tensor dimensions disagree with `dim`".into()));
        }
        Ok(t)
    }
}

pub fn symmetric_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

fn symmetry_defect(a: &DMatrix<f64>) -> f64 {
    let scale = a.amax();
    if scale == 0.0 {
        0.0
    } else {
        (a - a.transpose()).amax() / scale
    }
}

/// Result of the two `ε⁰` quadratures.
#[derive(Debug, Clone)]
pub struct PermittivityQuadrature {
    /// `ε⁰_ik = <κ (δ_ik - ∂_i ξ^{3_k})>`.
    pub flux: DMatrix<f64>,
    /// `ε⁰_ik = <κ (e_k - ∇ξ^{3_k}) · (e_i - ∇ξ^{3_i})>`.
    pub energy: DMatrix<f64>,
    pub defect: f64,
}

/// Effective permittivity in flux form, cross-checked against the energy form.
pub fn effective_permittivity(kappa: &ScalarField, xi3: &[ScalarField]) -> Result<PermittivityQuadrature> {
    let g = kappa.grid;
    let n = g.dim;
    if xi3.len() != n || xi3.iter().any(|x| x.grid != g) {
        return Err(CoreError::GridMismatch("correctors do not match the permittivity grid".into()));
    }
    let vol = 1.0 / g.len() as f64;
    let kf: Vec<Vec<f64>> = (0..n).map(|a| face_coefficients(kappa, a)).collect();
    // grads[k][a] = face gradients of ξ^k across faces normal to a
    let grads: Vec<Vec<Vec<f64>>> =
        xi3.iter().map(|x| (0..n).map(|a| face_gradients(&x.values, &g, a)).collect()).collect();
    let delta = |i: usize, k: usize| if i == k { 1.0 } else { 0.0 };

    let flux = DMatrix::from_fn(n, n, |i, k| {
        kf[i].iter().zip(&grads[k][i]).map(|(c, gk)| c * (delta(i, k) - gk)).sum::<f64>() * vol
    });
    let energy = DMatrix::from_fn(n, n, |i, k| {
        (0..n)
            .map(|a| {
                kf[a]
                    .iter()
                    .zip(&grads[k][a])
                    .zip(&grads[i][a])
                    .map(|((c, gk), gi)| c * (delta(a, k) - gk) * (delta(a, i) - gi))
                    .sum::<f64>()
            })
            .sum::<f64>()
            * vol
    });
    let scale = flux.amax().max(f64::MIN_POSITIVE);
    let defect = (&flux - &energy).amax() / scale;
    if defect > FLUX_ENERGY_AGREEMENT {
        return Err(CoreError::Inconsistent(format!(
            "flux and energy forms differ by {defect:.3e} (relative), limit {FLUX_ENERGY_AGREEMENT:.0e}"
        )));
    }
    Ok(PermittivityQuadrature { flux, energy, defect })
}

/// Fluid-voxel average of `(∂_i u)` using the mean of the two face
/// gradients of each voxel along `i`.
fn fluid_voxel_gradient_sum(mask: &[bool], face_grad_i: &[f64], g: &crate::grid::Grid, axis: usize) -> f64 {
    (0..g.len())
        .filter(|&v| mask[v])
        .map(|v| {
            let below = g.neighbor(v, axis, false, true).unwrap();
            0.5 * (face_grad_i[v] + face_grad_i[below])
        })
        .sum()
}

/// Electro-convection tensor `𝕄_ik = (1/|Y|) ∫_{Y^s} (δ_ik - ∂_i ξ^{3_k})`.
pub fn electro_convection_tensor(cell: &UnitCell, xi3: &[ScalarField]) -> Result<DMatrix<f64>> {
    let g = cell.grid();
    let n = g.dim;
    if xi3.len() != n || xi3.iter().any(|x| x.grid != g) {
        return Err(CoreError::GridMismatch("correctors do not match the cell grid".into()));
    }
    let p = porosity(cell);
    let vol = 1.0 / g.len() as f64;
    let mask = cell.fluid_mask();
    Ok(DMatrix::from_fn(n, n, |i, k| {
        let gr = face_gradients(&xi3[k].values, &g, i);
        let s = fluid_voxel_gradient_sum(mask, &gr, &g, i) * vol;
        if i == k {
            p - s
        } else {
            -s
        }
    }))
}

/// Diffusion-shape tensor `Ĥ_ik = (1/|Y|) ∫_{Y^s} ∂_i η^k`.
///
/// `η` has no gradient across a fluid/solid face; there its normal
/// derivative is closed by the no-flux interface condition of the `η`
/// problem, `∂_n η = -∂_n ξ^{3}`.
pub fn diffusion_shape_tensor(cell: &UnitCell, eta: &[ScalarField], xi3: &[ScalarField]) -> Result<DMatrix<f64>> {
    let g = cell.grid();
    let n = g.dim;
    if eta.len() != n || xi3.len() != n || eta.iter().chain(xi3).any(|x| x.grid != g) {
        return Err(CoreError::GridMismatch("correctors do not match the cell grid".into()));
    }
    let vol = 1.0 / g.len() as f64;
    let mask = cell.fluid_mask();
    Ok(DMatrix::from_fn(n, n, |i, k| {
        let ge = face_gradients(&eta[k].values, &g, i);
        let gx = face_gradients(&xi3[k].values, &g, i);
        let closed: Vec<f64> =
            (0..g.len()).map(|lo| if fluid_face(mask, &g, lo, i) { ge[lo] } else { -gx[lo] }).collect();
        fluid_voxel_gradient_sum(mask, &closed, &g, i) * vol
    }))
}

/// Voigt and Reuss means of a positive field.
pub fn voigt_reuss(kappa: &ScalarField) -> Bounds {
    let n = kappa.values.len() as f64;
    let voigt = kappa.values.iter().sum::<f64>() / n;
    let reuss = n / kappa.values.iter().map(|k| 1.0 / k).sum::<f64>();
    Bounds { reuss, voigt }
}

/// Check symmetry, positive definiteness and the Voigt-Reuss window.
pub fn certify(t: &EffectiveTensors) -> Result<()> {
    if t.diagnostics.symmetry_defect > SYMMETRY_TOL {
        return Err(CoreError::NotSpd(format!("ε⁰ symmetry defect {:.3e}", t.diagnostics.symmetry_defect)));
    }
    let ev = &t.diagnostics.eps0_eigenvalues;
    if ev.first().copied().unwrap_or(0.0) <= 0.0 {
        return Err(CoreError::NotSpd(format!("ε⁰ eigenvalues {ev:?}")));
    }
    for &e in ev {
        if e < t.bounds.reuss - BOUNDS_SLACK || e > t.bounds.voigt + BOUNDS_SLACK {
            return Err(CoreError::Inconsistent(format!(
                "eigenvalue {e} outside Voigt-Reuss window [{}, {}]",
                t.bounds.reuss, t.bounds.voigt
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct UpscaleOptions {
    pub solver: SolverSettings,
    pub second_order: bool,
}

impl Default for UpscaleOptions {
    fn default() -> Self {
        Self { solver: SolverSettings::default(), second_order: true }
    }
}

/// Full cell pipeline: correctors, tensors and their certification.
pub fn upscale(
    cell: &UnitCell,
    params: &PermittivityParams,
    opts: &UpscaleOptions,
) -> Result<(CorrectorSet, EffectiveTensors)> {
    let kappa = permittivity_field(cell, params);
    upscale_with_kappa(cell, &kappa, opts)
}

pub fn upscale_with_kappa(
    cell: &UnitCell,
    kappa: &ScalarField,
    opts: &UpscaleOptions,
) -> Result<(CorrectorSet, EffectiveTensors)> {
    let mut residuals = Vec::new();
    let xi_sol = solve_potential_corrector(cell, kappa, &opts.solver)?;
    for (k, s) in xi_sol.iter().enumerate() {
        residuals.push((format!("xi3_{}", k + 1), s.residual));
    }
    let xi3: Vec<ScalarField> = xi_sol.into_iter().map(|s| s.field).collect();

    let eta_sol = solve_density_corrector_shape(cell, &xi3, &opts.solver)?;
    for (k, s) in eta_sol.iter().enumerate() {
        residuals.push((format!("eta_{}", k + 1), s.residual));
    }
    let eta: Vec<ScalarField> = eta_sol.into_iter().map(|s| s.field).collect();

    let quad = effective_permittivity(kappa, &xi3)?;
    let m = electro_convection_tensor(cell, &xi3)?;
    let hhat = diffusion_shape_tensor(cell, &eta, &xi3)?;

    let zeta3 = if opts.second_order {
        let sol = solve_second_order_potential_corrector(cell, kappa, &xi3, &quad.flux, &opts.solver)?;
        let n = cell.dim();
        for (kl, s) in sol.iter().enumerate() {
            residuals.push((format!("zeta3_{}{}", kl / n + 1, kl % n + 1), s.residual));
        }
        Some(sol.into_iter().map(|s| s.field).collect())
    } else {
        None
    };

    let mut tensors = EffectiveTensors::from_parts(porosity(cell), quad.flux, m, hhat);
    tensors.bounds = voigt_reuss(kappa);
    tensors.diagnostics.flux_energy_defect = quad.defect;
    tensors.provenance = Provenance {
        geometry_hash: cell.geometry_hash(),
        resolution: cell.resolution(),
        solver_tol: opts.solver.tol,
        config_hash: None,
    };
    certify(&tensors)?;
    Ok((CorrectorSet { xi3, eta, zeta3, residuals }, tensors))
}

/// The 3×3 block material tensor of the upscaled system at a sampled state.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaterialTensorReport {
    pub tensors: EffectiveTensors,
    pub u1: f64,
    pub u2: f64,
    /// `blocks[i][j]` is an `N×N` matrix.
    #[serde(skip)]
    pub blocks: Vec<Vec<DMatrix<f64>>>,
    pub eps0_eigenvalues: Vec<f64>,
    pub within_bounds: bool,
}

pub fn material_tensor_report(tensors: &EffectiveTensors, u1: f64, u2: f64) -> MaterialTensorReport {
    let n = tensors.dim;
    let zero = DMatrix::<f64>::zeros(n, n);
    let pid = DMatrix::<f64>::identity(n, n) * tensors.p;
    let drift = |species: usize, u: f64| -tensors.diffusion_tensor(species, u) + &tensors.m * (CHARGES[species] * u);
    let blocks = vec![
        vec![pid.clone(), zero.clone(), drift(0, u1)],
        vec![zero.clone(), pid, drift(1, u2)],
        vec![zero.clone(), zero, tensors.eps0.clone()],
    ];
    let ev = symmetric_eigenvalues(&tensors.eps0);
    let within_bounds =
        ev.iter().all(|&e| e >= tensors.bounds.reuss - BOUNDS_SLACK && e <= tensors.bounds.voigt + BOUNDS_SLACK);
    MaterialTensorReport { tensors: tensors.clone(), u1, u2, blocks, eps0_eigenvalues: ev, within_bounds }
}
