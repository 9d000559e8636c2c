//! Direct simulation of the oscillating-coefficient PNP system on a tiled
//! perforated domain, two-scale reconstruction from the upscaled solution,
//! and field comparison.

use tracing::warn;

use crate::cellcorrect::{harmonic, CorrectorSet, SolverSettings};
use crate::error::{CoreError, Result};
use crate::grid::{project_mean_zero, Grid, GridRole, ScalarField};
use crate::linalg::FaceOperator;
use crate::macropnp::{central_difference, solve_neumann, InitialProfile, MacroConfig, MacroState, PoissonSolution};
use crate::transport::{picard_step, DensityBc, DriftScheme, PicardSettings, TransportSystem};
use crate::unitcell::{permittivity_field, PermittivityParams, UnitCell};
use crate::upscale::CHARGES;

/// Default cap on fine-grid voxels (1024²).
pub const DEFAULT_BUDGET: usize = 1 << 20;

/// Tiled fine-scale domain for one scale ratio `s = 1/tiles`.
#[derive(Debug, Clone)]
pub struct MicroDomain {
    pub grid: Grid,
    /// Cells per axis of the tiling, `1/s`.
    pub tiles: usize,
    /// Resolution of the reference cell.
    pub cell_resolution: usize,
    pub fluid_mask: Vec<bool>,
    /// Permittivity `ε(x/s)` per fine voxel.
    pub permittivity: Vec<f64>,
}

/// Parse `s` into the integer tile count `1/s`.
pub fn tiles_for_scale(s: f64) -> Result<usize> {
    if !(s > 0.0 && s <= 1.0) {
        return Err(CoreError::Parameter(format!("scale ratio must lie in (0,1], got {s}")));
    }
    let inv = 1.0 / s;
    let k = inv.round();
    if (inv - k).abs() > 1e-9 * inv {
        return Err(CoreError::Parameter(format!("1/s must be an integer, got 1/s = {inv}")));
    }
    Ok(k as usize)
}

/// Tile the cell `1/s` times per axis.
pub fn assemble_micro_domain(
    cell: &UnitCell,
    params: &PermittivityParams,
    s: f64,
    budget: usize,
) -> Result<MicroDomain> {
    let tiles = tiles_for_scale(s)?;
    let dim = cell.dim();
    if dim > 2 {
        return Err(CoreError::Parameter("direct simulation is limited to dim <= 2".into()));
    }
    let m = cell.resolution();
    let n = tiles * m;
    let required = n.pow(dim as u32);
    if required > budget {
        return Err(CoreError::Budget { required, budget });
    }
    let grid = Grid::new(dim, n, GridRole::Micro)?;
    let kappa = permittivity_field(cell, params);
    let cg = cell.grid();
    let mut fluid_mask = Vec::with_capacity(required);
    let mut permittivity = Vec::with_capacity(required);
    for i in 0..required {
        let j = cell_voxel(&grid, &cg, i);
        fluid_mask.push(cell.fluid_mask()[j]);
        permittivity.push(kappa.values[j]);
    }
    Ok(MicroDomain { grid, tiles, cell_resolution: m, fluid_mask, permittivity })
}

/// Index of the reference-cell voxel under fine voxel `i`.
fn cell_voxel(fine: &Grid, cell: &Grid, i: usize) -> usize {
    let c = fine.coords(i);
    let mut w = [0usize; 3];
    for a in 0..fine.dim {
        w[a] = c[a] % cell.n;
    }
    cell.index(&w[..fine.dim])
}

impl MicroDomain {
    pub fn scale(&self) -> f64 {
        1.0 / self.tiles as f64
    }

    pub fn porosity(&self) -> f64 {
        self.fluid_mask.iter().filter(|&&f| f).count() as f64 / self.fluid_mask.len() as f64
    }

    /// `-div(ε ∇·)` with harmonic face permittivity and Neumann data.
    pub fn poisson_operator(&self) -> FaceOperator {
        let inv_h2 = (self.grid.n * self.grid.n) as f64;
        let mut op = FaceOperator::new(self.grid.len());
        for f in self.grid.faces(false) {
            op.add_face(f.lo, f.hi, harmonic(self.permittivity[f.lo], self.permittivity[f.hi]) * inv_h2);
        }
        op
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroState {
    pub grid: Grid,
    pub nplus: Vec<f64>,
    pub nminus: Vec<f64>,
    /// Mean-zero potential on all voxels.
    pub phi: Vec<f64>,
    pub t: f64,
}

impl MicroState {
    /// Sample `profile` on fluid voxels; zero on solid.
    pub fn from_profile(dom: &MicroDomain, profile: &InitialProfile) -> Self {
        let g = dom.grid;
        let mut nplus = vec![0.0; g.len()];
        let mut nminus = vec![0.0; g.len()];
        for i in 0..g.len() {
            if dom.fluid_mask[i] {
                let (a, b) = profile.densities_at(g.centers(i), g.dim);
                nplus[i] = a;
                nminus[i] = b;
            }
        }
        Self { grid: g, nplus, nminus, phi: vec![0.0; g.len()], t: 0.0 }
    }

    pub fn field(&self, which: usize) -> ScalarField {
        let v = match which {
            0 => &self.nplus,
            1 => &self.nminus,
            _ => &self.phi,
        };
        ScalarField { grid: self.grid, values: v.clone() }
    }
}

/// `-div(ε(x/s) ∇Φ) = n⁺ - n⁻`, Neumann, mean-zero.
pub fn solve_micro_poisson(
    dom: &MicroDomain,
    nplus: &[f64],
    nminus: &[f64],
    settings: &SolverSettings,
) -> Result<PoissonSolution> {
    let n = dom.grid.len();
    if nplus.len() != n || nminus.len() != n {
        return Err(CoreError::GridMismatch("densities do not match the fine grid".into()));
    }
    let source = nplus.iter().zip(nminus).map(|(a, b)| a - b).collect();
    solve_neumann(&dom.poisson_operator(), source, None, settings, dom.grid.n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroConfig {
    pub dt: f64,
    pub t_final: f64,
    pub picard: PicardSettings,
    pub drift: DriftScheme,
    pub bc: DensityBc,
    pub solver: SolverSettings,
}

impl From<&MacroConfig> for MicroConfig {
    fn from(c: &MacroConfig) -> Self {
        Self { dt: c.dt, t_final: c.t_final, picard: c.picard, drift: c.drift, bc: c.bc, solver: c.solver }
    }
}

impl MicroConfig {
    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round().max(1.0) as usize
    }
}

pub struct MicroStepper<'a> {
    dom: &'a MicroDomain,
    cfg: MicroConfig,
    poisson: FaceOperator,
    transport: TransportSystem,
}

impl<'a> MicroStepper<'a> {
    pub fn new(dom: &'a MicroDomain, cfg: MicroConfig) -> Result<Self> {
        if !(cfg.dt > 0.0 && cfg.t_final >= cfg.dt) {
            return Err(CoreError::Parameter(format!("need 0 < dt <= T, got dt={} T={}", cfg.dt, cfg.t_final)));
        }
        let transport = TransportSystem::new(dom.grid, 1.0, Some(&dom.fluid_mask), cfg.bc, cfg.drift);
        Ok(Self { dom, poisson: dom.poisson_operator(), transport, cfg })
    }

    fn potential(&self, a: &[f64], b: &[f64], warm: &[f64]) -> Result<Vec<f64>> {
        let source = a.iter().zip(b).map(|(x, y)| x - y).collect();
        Ok(solve_neumann(&self.poisson, source, Some(warm), &self.cfg.solver, self.dom.grid.n)?.potential)
    }

    fn speeds(&self, phi: &[f64]) -> Vec<f64> {
        let inv_h = self.dom.grid.n as f64;
        self.transport.faces.iter().map(|f| -(phi[f.hi] - phi[f.lo]) * inv_h).collect()
    }

    pub fn equilibrate_potential(&self, state: &mut MicroState) -> Result<()> {
        state.phi = self.potential(&state.nplus, &state.nminus, &state.phi)?;
        Ok(())
    }

    /// One fixed-point step; returns the new state and the Picard increments.
    pub fn step(&self, state: &MicroState) -> Result<(MicroState, Vec<f64>)> {
        let out = picard_step(
            &self.transport,
            [&state.nplus, &state.nminus],
            &state.phi,
            self.cfg.dt,
            CHARGES,
            &self.cfg.picard,
            |a, b, warm| self.potential(a, b, warm),
            |phi| self.speeds(phi),
        )?;
        let [nplus, nminus] = out.densities;
        let next = MicroState { grid: state.grid, nplus, nminus, phi: out.potential, t: state.t + self.cfg.dt };
        Ok((next, out.increments))
    }
}

#[derive(Debug, Clone)]
pub struct MicroRun {
    pub final_state: MicroState,
    /// `(t, mass⁺, mass⁻)` after every step.
    pub masses: Vec<(f64, f64, f64)>,
    pub picard_iters: Vec<usize>,
}

pub fn run_micro(dom: &MicroDomain, cfg: &MicroConfig, init: &MicroState) -> Result<MicroRun> {
    if init.grid.n != dom.grid.n || init.grid.dim != dom.grid.dim {
        return Err(CoreError::GridMismatch("initial state does not match the fine grid".into()));
    }
    let stepper = MicroStepper::new(dom, cfg.clone())?;
    let mut state = init.clone();
    stepper.equilibrate_potential(&mut state)?;
    let vol = dom.grid.cell_volume();
    let mut masses = Vec::with_capacity(cfg.steps());
    let mut picard_iters = Vec::with_capacity(cfg.steps());
    let t0 = state.t;
    for k in 1..=cfg.steps() {
        let (next, inc) = stepper.step(&state)?;
        state = next;
        state.t = t0 + k as f64 * cfg.dt;
        masses.push((state.t, state.nplus.iter().sum::<f64>() * vol, state.nminus.iter().sum::<f64>() * vol));
        picard_iters.push(inc.len());
    }
    Ok(MicroRun { final_state: state, masses, picard_iters })
}

/// Bilinear (trilinear) interpolation of a cell-centered field, clamped to
/// the outermost centers.
pub fn interpolate(src: &[f64], from: &Grid, x: [f64; 3]) -> f64 {
    let n = from.n;
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..from.dim {
        let s = (x[a] * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n.saturating_sub(2));
        base[a] = i;
        frac[a] = if n > 1 { s - i as f64 } else { 0.0 };
    }
    let mut acc = 0.0;
    for corner in 0..(1usize << from.dim) {
        let mut w = 1.0;
        let mut c = [0usize; 3];
        for a in 0..from.dim {
            let up = (corner >> a) & 1 == 1 && n > 1;
            c[a] = base[a] + up as usize;
            w *= if up { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 {
            acc += w * src[from.index(&c[..from.dim])];
        }
    }
    acc
}

fn interpolate_to(src: &[f64], from: &Grid, to: &Grid) -> Vec<f64> {
    (0..to.len()).map(|i| interpolate(src, from, to.centers(i))).collect()
}

/// Cell-centered second derivative `∂²u/∂x_k∂x_l` with mirror ghosts.
fn second_difference(u: &[f64], grid: &Grid, i: usize, k: usize, l: usize) -> f64 {
    if k == l {
        let up = grid.neighbor(i, k, true, false).unwrap_or(i);
        let dn = grid.neighbor(i, k, false, false).unwrap_or(i);
        (u[up] - 2.0 * u[i] + u[dn]) * (grid.n * grid.n) as f64
    } else {
        let up = grid.neighbor(i, l, true, false).unwrap_or(i);
        let dn = grid.neighbor(i, l, false, false).unwrap_or(i);
        (central_difference(u, grid, up, k) - central_difference(u, grid, dn, k)) * 0.5 * grid.n as f64
    }
}

/// Fine-grid fields built from the macro solution and the cell correctors:
///
/// ```text
/// u³_s ≈ u³ - s Σ_k ξ^{3_k}(x/s) ∂_k u³ + s² Σ_{kl} ζ^{3_{kl}}(x/s) ∂_k∂_l u³
/// uʳ_s ≈ uʳ - s Σ_k z_r uʳ η^k(x/s) ∂_k u³          (fluid voxels)
/// ```
pub fn reconstruct_two_scale(
    macro_state: &MacroState,
    correctors: &CorrectorSet,
    dom: &MicroDomain,
) -> Result<MicroState> {
    let mg = macro_state.grid;
    let fg = dom.grid;
    let dim = fg.dim;
    if mg.dim != dim || correctors.dim() != dim {
        return Err(CoreError::GridMismatch("macro, corrector and fine dimensions differ".into()));
    }
    let cg = correctors.xi3[0].grid;
    if cg.n != dom.cell_resolution {
        return Err(CoreError::GridMismatch(format!(
            "correctors are at resolution {}, domain tiles resolution {}",
            cg.n, dom.cell_resolution
        )));
    }
    let s = dom.scale();
    let u3 = &macro_state.u3;
    let grads: Vec<Vec<f64>> = (0..dim)
        .map(|k| {
            let g: Vec<f64> = (0..mg.len()).map(|i| central_difference(u3, &mg, i, k)).collect();
            interpolate_to(&g, &mg, &fg)
        })
        .collect();
    let hess: Option<Vec<Vec<f64>>> = match &correctors.zeta3 {
        Some(_) => Some(
            (0..dim * dim)
                .map(|kl| {
                    let h: Vec<f64> =
                        (0..mg.len()).map(|i| second_difference(u3, &mg, i, kl / dim, kl % dim)).collect();
                    interpolate_to(&h, &mg, &fg)
                })
                .collect(),
        ),
        None => {
            warn!("second-order potential correctors missing; reconstruction stops at first order");
            None
        }
    };
    let base3 = interpolate_to(u3, &mg, &fg);
    let base1 = interpolate_to(&macro_state.u1, &mg, &fg);
    let base2 = interpolate_to(&macro_state.u2, &mg, &fg);
    let n = fg.len();
    let mut phi = vec![0.0; n];
    let mut nplus = vec![0.0; n];
    let mut nminus = vec![0.0; n];
    for i in 0..n {
        let j = cell_voxel(&fg, &cg, i);
        let mut first = 0.0;
        let mut shape = 0.0;
        for k in 0..dim {
            first += correctors.xi3[k].values[j] * grads[k][i];
            shape += correctors.eta[k].values[j] * grads[k][i];
        }
        let mut second = 0.0;
        if let (Some(h), Some(z)) = (&hess, &correctors.zeta3) {
            for kl in 0..dim * dim {
                second += z[kl].values[j] * h[kl][i];
            }
        }
        phi[i] = base3[i] - s * first + s * s * second;
        if dom.fluid_mask[i] {
            nplus[i] = base1[i] * (1.0 - s * CHARGES[0] * shape);
            nminus[i] = base2[i] * (1.0 - s * CHARGES[1] * shape);
        }
    }
    project_mean_zero(&mut phi, None);
    Ok(MicroState { grid: fg, nplus, nminus, phi, t: macro_state.t })
}

/// Macro fields interpolated to the fine grid without corrector terms.
pub fn interpolate_macro(macro_state: &MacroState, dom: &MicroDomain) -> MicroState {
    let fg = dom.grid;
    let mg = macro_state.grid;
    let mut phi = interpolate_to(&macro_state.u3, &mg, &fg);
    project_mean_zero(&mut phi, None);
    let mut nplus = interpolate_to(&macro_state.u1, &mg, &fg);
    let mut nminus = interpolate_to(&macro_state.u2, &mg, &fg);
    for i in 0..fg.len() {
        if !dom.fluid_mask[i] {
            nplus[i] = 0.0;
            nminus[i] = 0.0;
        }
    }
    MicroState { grid: fg, nplus, nminus, phi, t: macro_state.t }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldErrors {
    pub abs_l2: f64,
    pub rel_l2: f64,
    pub abs_linf: f64,
    pub rel_linf: f64,
}

fn relative(abs: f64, reference: f64) -> f64 {
    if reference > 0.0 {
        abs / reference
    } else if abs == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Errors of `b` against the reference `a` over the masked voxels.
pub fn compare_fields(a: &ScalarField, b: &ScalarField, mask: Option<&[bool]>) -> Result<FieldErrors> {
    if a.grid.dim != b.grid.dim || a.grid.n != b.grid.n {
        return Err(CoreError::GridMismatch(format!(
            "cannot compare {}^{} with {}^{}",
            a.grid.n, a.grid.dim, b.grid.n, b.grid.dim
        )));
    }
    if let Some(m) = mask {
        if m.len() != a.values.len() {
            return Err(CoreError::GridMismatch("mask does not match the field grid".into()));
        }
    }
    let vol = a.grid.cell_volume();
    let (mut d2, mut r2, mut dinf, mut rinf) = (0.0, 0.0, 0.0f64, 0.0f64);
    for (i, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let d = (x - y).abs();
        d2 += d * d;
        r2 += x * x;
        dinf = dinf.max(d);
        rinf = rinf.max(x.abs());
    }
    let abs_l2 = (d2 * vol).sqrt();
    Ok(FieldErrors {
        abs_l2,
        rel_l2: relative(abs_l2, (r2 * vol).sqrt()),
        abs_linf: dinf,
        rel_linf: relative(dinf, rinf),
    })
}
