//! Time stepping of the upscaled porous-medium PNP system
//!
//! ```text
//! p ∂ₜuʳ - p Δuʳ - div(z_r uʳ (𝕄 - Ĥ) ∇u³) = 0
//! -div(ε⁰ ∇u³) = p (u¹ - u²)
//! ```
//!
//! on `Ω = [0,1]^N`, with homogeneous Neumann data for the potential and
//! either homogeneous Dirichlet or no-flux data for the densities. Each step
//! is the fixed-point linearization: potential from the current iterate,
//! then one linear parabolic solve per species.

use nalgebra::DMatrix;

use crate::cellcorrect::SolverSettings;
use crate::error::{CoreError, Result};
use crate::grid::{project_mean_zero, Grid, GridRole, ScalarField};
use crate::linalg::{conjugate_gradient, CgOptions, CrossCoupling, FaceOperator, LinearOperator, NullSpace};
use crate::transport::{picard_step, DensityBc, DriftScheme, PicardSettings, TransportSystem, NEGATIVE_DENSITY_TOL};
use crate::upscale::{symmetric_eigenvalues, EffectiveTensors, CHARGES};

#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub grid: Grid,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// Mean-zero potential.
    pub u3: Vec<f64>,
    pub t: f64,
}

impl MacroState {
    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        Self { grid, u1: vec![0.0; n], u2: vec![0.0; n], u3: vec![0.0; n], t: 0.0 }
    }

    pub fn field(&self, which: usize) -> ScalarField {
        let v = match which {
            0 => &self.u1,
            1 => &self.u2,
            _ => &self.u3,
        };
        ScalarField { grid: self.grid, values: v.clone() }
    }

    pub fn density(&self, species: usize) -> &[f64] {
        if species == 0 {
            &self.u1
        } else {
            &self.u2
        }
    }
}

/// Named initial density profiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialProfile {
    Zero,
    /// `u¹ = u² = Π_a sin(π x_a)`.
    Eigenmode,
    /// `u¹ = 1 + A sin(π x_1)`, `u² = 1`.
    Asymmetric {
        amplitude: f64,
    },
    /// `u¹ = 1 + A Π_a cos(π x_a)`, `u² = 1`.
    Cosine {
        amplitude: f64,
    },
}

impl InitialProfile {
    pub fn densities_at(&self, x: [f64; 3], dim: usize) -> (f64, f64) {
        use std::f64::consts::PI;
        match *self {
            InitialProfile::Zero => (0.0, 0.0),
            InitialProfile::Eigenmode => {
                let v: f64 = (0..dim).map(|a| (PI * x[a]).sin()).product();
                (v, v)
            }
            InitialProfile::Asymmetric { amplitude } => (1.0 + amplitude * (PI * x[0]).sin(), 1.0),
            InitialProfile::Cosine { amplitude } => {
                let v: f64 = (0..dim).map(|a| (PI * x[a]).cos()).product();
                (1.0 + amplitude * v, 1.0)
            }
        }
    }

    pub fn macro_state(&self, grid: Grid) -> MacroState {
        let mut s = MacroState::zeros(grid);
        for i in 0..grid.len() {
            let (a, b) = self.densities_at(grid.centers(i), grid.dim);
            s.u1[i] = a;
            s.u2[i] = b;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MacroConfig {
    pub dim: usize,
    pub resolution: usize,
    pub dt: f64,
    pub t_final: f64,
    pub picard: PicardSettings,
    pub drift: DriftScheme,
    pub bc: DensityBc,
    /// Settings for the potential solves.
    pub solver: SolverSettings,
    /// `λ²` of the classical free energy.
    pub lambda2: f64,
    pub loceq_window: usize,
    /// Times at which field snapshots are kept.
    pub snapshots: Vec<f64>,
}

impl MacroConfig {
    pub fn new(dim: usize, resolution: usize, dt: f64, t_final: f64) -> Self {
        Self {
            dim,
            resolution,
            dt,
            t_final,
            picard: PicardSettings::default(),
            drift: DriftScheme::Upwind,
            bc: DensityBc::Dirichlet,
            solver: SolverSettings { tol: 1e-12, iter_factor: 50 },
            lambda2: 1.0,
            loceq_window: 4,
            snapshots: Vec::new(),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.dim, self.resolution, GridRole::Macro)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(CoreError::Parameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_final >= self.dt) {
            return Err(CoreError::Parameter(format!("T = {} must be >= dt = {}", self.t_final, self.dt)));
        }
        if self.resolution < 2 {
            return Err(CoreError::Parameter("macro resolution must be >= 2".into()));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_final / self.dt).round().max(1.0) as usize
    }
}

/// Neumann operator `-div_h(A ∇_h u)` for a constant symmetric tensor `A`.
/// Mixed derivatives use the four-cell vertex stencil.
pub fn neumann_operator(grid: Grid, a: &DMatrix<f64>) -> Result<FaceOperator> {
    let n = grid.dim;
    let sym = (a + a.transpose()) * 0.5;
    let ev = symmetric_eigenvalues(&sym);
    if ev[0] <= 0.0 {
        return Err(CoreError::NotSpd(format!("eigenvalues {ev:?}")));
    }
    // The vertex stencil is dominated by the face stencil when the comparison
    // matrix (|off-diagonals| negated) is positive definite; automatic in 2D.
    if n == 3 {
        let cmp = DMatrix::from_fn(3, 3, |i, j| if i == j { sym[(i, i)] } else { -sym[(i, j)].abs() });
        if symmetric_eigenvalues(&cmp)[0] <= 0.0 {
            return Err(CoreError::NotSpd("3D mixed-derivative stencil would lose definiteness".into()));
        }
    }
    let inv_h2 = (grid.n * grid.n) as f64;
    let mut op = FaceOperator::new(grid.len());
    for f in grid.faces(false) {
        op.add_face(f.lo, f.hi, sym[(f.axis, f.axis)] * inv_h2);
    }
    for a_ax in 0..n {
        for b_ax in (a_ax + 1)..n {
            let c = sym[(a_ax, b_ax)];
            if c == 0.0 {
                continue;
            }
            let (sa, sb) = (grid.stride(a_ax), grid.stride(b_ax));
            for i in 0..grid.len() {
                let co = grid.coords(i);
                if co[a_ax] + 1 < grid.n && co[b_ax] + 1 < grid.n {
                    op.add_cross(CrossCoupling {
                        cells: [i, i + sa, i + sb, i + sa + sb],
                        coef: c,
                        inv_2h: 0.5 * grid.n as f64,
                    });
                }
            }
        }
    }
    Ok(op)
}

#[derive(Debug, Clone)]
pub struct PoissonSolution {
    pub potential: Vec<f64>,
    /// Mean of the source removed for Neumann compatibility.
    pub removed_mean: f64,
    pub residual: f64,
    pub iterations: usize,
}

/// Solve a pure-Neumann problem `op u = f` after projecting `f` to mean zero.
pub(crate) fn solve_neumann(
    op: &FaceOperator,
    mut source: Vec<f64>,
    warm: Option<&[f64]>,
    settings: &SolverSettings,
    n: usize,
) -> Result<PoissonSolution> {
    let removed_mean = source.iter().sum::<f64>() / source.len() as f64;
    project_mean_zero(&mut source, None);
    let opts = CgOptions {
        tol: settings.tol,
        max_iter: settings.max_iter(n).max(200),
        null_space: NullSpace::Constants(None),
    };
    let out = conjugate_gradient(op, &source, warm, &opts)?;
    Ok(PoissonSolution { potential: out.x, removed_mean, residual: out.residual, iterations: out.iterations })
}

/// `-div(ε⁰ ∇u³) = p (u¹ - u²)` with homogeneous Neumann data, mean-zero.
pub fn solve_macro_poisson(
    grid: Grid,
    u1: &[f64],
    u2: &[f64],
    eps0: &DMatrix<f64>,
    p: f64,
    settings: &SolverSettings,
) -> Result<PoissonSolution> {
    if u1.len() != grid.len() || u2.len() != grid.len() {
        return Err(CoreError::GridMismatch("densities do not match the macro grid".into()));
    }
    if eps0.nrows() != grid.dim {
        return Err(CoreError::GridMismatch("ε⁰ dimension does not match the macro grid".into()));
    }
    let op = neumann_operator(grid, eps0)?;
    let source = u1.iter().zip(u2).map(|(a, b)| p * (a - b)).collect();
    solve_neumann(&op, source, None, settings, grid.n)
}

/// Cell-centered derivative along `axis` with mirror ghosts (Neumann data).
pub(crate) fn central_difference(u: &[f64], grid: &Grid, i: usize, axis: usize) -> f64 {
    let up = grid.neighbor(i, axis, true, false).unwrap_or(i);
    let dn = grid.neighbor(i, axis, false, false).unwrap_or(i);
    (u[up] - u[dn]) * 0.5 * grid.n as f64
}

/// Per-step diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub mass1: f64,
    pub mass2: f64,
    pub charge: f64,
    pub free_energy: f64,
    pub picard_iters: usize,
    pub loceq_dev: f64,
}

pub const DIAGNOSTICS_HEADER: &str = "t,mass1,mass2,charge,free_energy,picard_iters,loceq_dev";

impl DiagnosticsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.t, self.mass1, self.mass2, self.charge, self.free_energy, self.picard_iters, self.loceq_dev
        )
    }
}

#[derive(Debug, Clone)]
pub struct StepInfo {
    pub increments: Vec<f64>,
    pub removed_charge: f64,
}

/// Assembled stepper for fixed tensors and configuration.
pub struct MacroStepper {
    pub cfg: MacroConfig,
    pub tensors: EffectiveTensors,
    grid: Grid,
    poisson: FaceOperator,
    transport: TransportSystem,
    drift: DMatrix<f64>,
}

impl MacroStepper {
    pub fn new(cfg: MacroConfig, tensors: EffectiveTensors) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid()?;
        if tensors.dim != grid.dim {
            return Err(CoreError::GridMismatch(format!(
                "tensors are {}-dimensional, macro grid is {}-dimensional",
                tensors.dim, grid.dim
            )));
        }
        let poisson = neumann_operator(grid, &tensors.eps0)?;
        let transport = TransportSystem::new(grid, tensors.p, None, cfg.bc, cfg.drift);
        let drift = tensors.drift_tensor();
        Ok(Self { cfg, tensors, grid, poisson, transport, drift })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    fn potential(&self, u1: &[f64], u2: &[f64], warm: &[f64]) -> Result<PoissonSolution> {
        let p = self.tensors.p;
        let source = u1.iter().zip(u2).map(|(a, b)| p * (a - b)).collect();
        solve_neumann(&self.poisson, source, Some(warm), &self.cfg.solver, self.grid.n)
    }

    /// Face speeds `-( (𝕄 - Ĥ) ∇u³ ) · e_axis` for a unit positive charge.
    fn speeds(&self, u3: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let inv_h = g.n as f64;
        let dim = g.dim;
        let grads: Vec<Vec<f64>> =
            (0..dim).map(|b| (0..g.len()).map(|i| central_difference(u3, g, i, b)).collect()).collect();
        self.transport
            .faces
            .iter()
            .map(|f| {
                let a = f.axis;
                let mut flux = self.drift[(a, a)] * (u3[f.hi] - u3[f.lo]) * inv_h;
                for b in 0..dim {
                    if b != a && self.drift[(a, b)] != 0.0 {
                        flux += self.drift[(a, b)] * 0.5 * (grads[b][f.lo] + grads[b][f.hi]);
                    }
                }
                -flux
            })
            .collect()
    }

    /// Advance by one time step.
    pub fn step(&self, state: &MacroState) -> Result<(MacroState, StepInfo)> {
        let mut removed = 0.0;
        let out = picard_step(
            &self.transport,
            [&state.u1, &state.u2],
            &state.u3,
            self.cfg.dt,
            CHARGES,
            &self.cfg.picard,
            |a, b, warm| {
                let sol = self.potential(a, b, warm)?;
                removed = sol.removed_mean;
                Ok(sol.potential)
            },
            |phi| self.speeds(phi),
        )?;
        let [u1, u2] = out.densities;
        let next = MacroState { grid: self.grid, u1, u2, u3: out.potential, t: state.t + self.cfg.dt };
        Ok((next, StepInfo { increments: out.increments, removed_charge: removed }))
    }

    /// Solve for the potential consistent with the densities of `state`.
    pub fn equilibrate_potential(&self, state: &mut MacroState) -> Result<()> {
        let warm = state.u3.clone();
        state.u3 = self.potential(&state.u1, &state.u2, &warm)?.potential;
        Ok(())
    }

    pub fn diagnostics(&self, state: &MacroState, picard_iters: usize) -> Result<DiagnosticsRow> {
        let vol = self.grid.cell_volume();
        let mass1 = state.u1.iter().sum::<f64>() * vol;
        let mass2 = state.u2.iter().sum::<f64>() * vol;
        let loceq = check_local_equilibrium(state, self.cfg.loceq_window);
        Ok(DiagnosticsRow {
            t: state.t,
            mass1,
            mass2,
            charge: mass1 - mass2,
            free_energy: free_energy(state, self.cfg.lambda2)?,
            picard_iters,
            loceq_dev: loceq.deviation,
        })
    }
}

fn entropy_density(u: f64, index: usize) -> Result<f64> {
    if u < -NEGATIVE_DENSITY_TOL {
        return Err(CoreError::NegativeDensity { value: u, index });
    }
    Ok(if u <= 0.0 { 0.0 } else { u * (u.ln() - 1.0) })
}

fn free_energy_with(state: &MacroState, gradient_energy: f64) -> Result<f64> {
    let vol = state.grid.cell_volume();
    let mut bulk = 0.0;
    for i in 0..state.grid.len() {
        bulk += entropy_density(state.u1[i], i)? + entropy_density(state.u2[i], i)?;
        bulk += (CHARGES[0] * state.u1[i] + CHARGES[1] * state.u2[i]) * state.u3[i];
    }
    Ok(bulk * vol - gradient_energy)
}

fn quadratic_form(op: &FaceOperator, u: &[f64], vol: f64) -> f64 {
    let mut y = vec![0.0; u.len()];
    op.apply(u, &mut y);
    y.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() * vol
}

/// `F = ∫ Σ uⁱ(log uⁱ - 1) + Σ zᵢuⁱΦ - λ²|∇Φ|² dx` with `0 log 0 = 0`.
pub fn free_energy(state: &MacroState, lambda2: f64) -> Result<f64> {
    let op = neumann_operator(state.grid, &(DMatrix::identity(state.grid.dim, state.grid.dim) * lambda2))?;
    free_energy_with(state, quadratic_form(&op, &state.u3, state.grid.cell_volume()))
}

/// Variant with the gradient term `∇Φ · ε⁰ ∇Φ`.
pub fn free_energy_effective(state: &MacroState, eps0: &DMatrix<f64>) -> Result<f64> {
    let op = neumann_operator(state.grid, eps0)?;
    free_energy_with(state, quadratic_form(&op, &state.u3, state.grid.cell_volume()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalEquilibrium {
    /// Largest spread of `μʳ = log uʳ + z_r u³` within a block.
    pub deviation: f64,
    /// Blocks skipped because a density vanished inside them.
    pub skipped_blocks: usize,
}

/// Spread of the chemical potentials over `window^N` voxel blocks.
pub fn check_local_equilibrium(state: &MacroState, window: usize) -> LocalEquilibrium {
    let g = state.grid;
    let w = window.max(1);
    let nb = g.n.div_ceil(w);
    let blocks = nb.pow(g.dim as u32);
    let mut lo = vec![[f64::INFINITY; 2]; blocks];
    let mut hi = vec![[f64::NEG_INFINITY; 2]; blocks];
    let mut bad = vec![false; blocks];
    for i in 0..g.len() {
        let c = g.coords(i);
        let b = (0..g.dim).fold(0, |acc, a| acc * nb + c[a] / w);
        for r in 0..2 {
            let u = state.density(r)[i];
            if u <= 0.0 {
                bad[b] = true;
                continue;
            }
            let mu = u.ln() + CHARGES[r] * state.u3[i];
            lo[b][r] = lo[b][r].min(mu);
            hi[b][r] = hi[b][r].max(mu);
        }
    }
    let mut deviation: f64 = 0.0;
    let mut skipped = 0;
    for b in 0..blocks {
        if bad[b] {
            skipped += 1;
            continue;
        }
        for r in 0..2 {
            deviation = deviation.max(hi[b][r] - lo[b][r]);
        }
    }
    LocalEquilibrium { deviation, skipped_blocks: skipped }
}

#[derive(Debug, Clone)]
pub struct MacroRun {
    pub rows: Vec<DiagnosticsRow>,
    pub snapshots: Vec<MacroState>,
    pub final_state: MacroState,
    /// Picard increments of every step.
    pub increments: Vec<Vec<f64>>,
}

/// Step from `init.t` to `T`, collecting diagnostics every step.
pub fn run_macro(cfg: &MacroConfig, tensors: &EffectiveTensors, init: &MacroState) -> Result<MacroRun> {
    let stepper = MacroStepper::new(cfg.clone(), tensors.clone())?;
    if init.grid != stepper.grid() {
        return Err(CoreError::GridMismatch("initial state does not match the macro grid".into()));
    }
    let mut state = init.clone();
    stepper.equilibrate_potential(&mut state)?;
    let mut rows = Vec::with_capacity(cfg.steps());
    let mut snapshots = Vec::new();
    let mut increments = Vec::with_capacity(cfg.steps());
    let mut pending: Vec<f64> = cfg.snapshots.clone();
    pending.sort_by(f64::total_cmp);
    let mut pending = pending.into_iter().peekable();
    while pending.peek().is_some_and(|&ts| ts <= state.t + 0.5 * cfg.dt) {
        pending.next();
        snapshots.push(state.clone());
    }
    let t0 = state.t;
    for k in 1..=cfg.steps() {
        let (next, info) = stepper.step(&state)?;
        state = next;
        state.t = t0 + k as f64 * cfg.dt;
        rows.push(stepper.diagnostics(&state, info.increments.len())?);
        increments.push(info.increments);
        while pending.peek().is_some_and(|&ts| ts <= state.t + 0.5 * cfg.dt) {
            pending.next();
            snapshots.push(state.clone());
        }
    }
    Ok(MacroRun { rows, snapshots, final_state: state, increments })
}
