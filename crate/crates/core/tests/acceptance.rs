//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the verdict lines show up
//! in `cargo test` output without `--nocapture`.

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use pnp_homog::cellcorrect::{solve_potential_corrector, SolverSettings};
use pnp_homog::grid::{Grid, GridRole, ScalarField};
use pnp_homog::macropnp::{
    check_local_equilibrium, free_energy, free_energy_effective, run_macro, solve_macro_poisson, InitialProfile,
    MacroConfig, MacroState, MacroStepper,
};
use pnp_homog::microdns::{
    assemble_micro_domain, compare_fields, interpolate_macro, reconstruct_two_scale, run_micro, MicroConfig,
    MicroState, DEFAULT_BUDGET,
};
use pnp_homog::transport::{DensityBc, PicardSettings};
use pnp_homog::unitcell::{build_unit_cell, permittivity_field, GeometrySpec, PermittivityParams};
use pnp_homog::upscale::{
    effective_permittivity, symmetric_eigenvalues, upscale, voigt_reuss, EffectiveTensors, UpscaleOptions,
};

// Tolerances pinned by the criteria.
const HOMOGENEOUS_ABS: f64 = 1e-9;
const HOMOGENEOUS_TIME: Duration = Duration::from_secs(1);
const LAMINATE_REL: f64 = 1e-6;
const LAMINATE_TIME: Duration = Duration::from_secs(5);
const CHECKERBOARD_REL: f64 = 0.02;
const FLUX_ENERGY_REL: f64 = 1e-8;
const BOUNDS_SLACK: f64 = 1e-6;
const SYMMETRY_REL: f64 = 1e-8;
const POISSON_ORDER: f64 = 1.9;
const POISSON_TIME: Duration = Duration::from_secs(5);
const EQUAL_DENSITY_POTENTIAL: f64 = 1e-10;
const DECAY_REL: f64 = 0.01;
const PICARD_MAX_ITERS: usize = 10;
const ORACLE_REL_L2: f64 = 1e-3;
const ORACLE_TIME: Duration = Duration::from_secs(30);
const MICRO_MACRO_REL_L2: f64 = 1e-3;
const SWEEP_TIME: Duration = Duration::from_secs(600);
const CONSERVATION_REL: f64 = 1e-10;
const ENERGY_SLACK: f64 = 1e-8;
const LOCEQ_TOL: f64 = 1e-12;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn tight() -> SolverSettings {
    SolverSettings { tol: 1e-12, iter_factor: 200 }
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_vec(v.to_vec()))
}

fn rel_matrix_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax()
}

fn c1_homogeneous() -> Verdict {
    let start = Instant::now();
    let cell = build_unit_cell(&GeometrySpec::Full, 2, 64).map_err(|e| e.to_string())?;
    let params = PermittivityParams::new(0.1, 1.0).map_err(|e| e.to_string())?;
    let (corr, t) = upscale(&cell, &params, &UpscaleOptions::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let xi = corr.xi3.iter().map(ScalarField::max_abs).fold(0.0, f64::max);
    let eta = corr.eta.iter().map(ScalarField::max_abs).fold(0.0, f64::max);
    let id = DMatrix::<f64>::identity(2, 2);
    let e_eps = (&t.eps0 - &id * 0.01).amax();
    let e_m = (&t.m - &id).amax();
    let e_h = t.hhat.amax();
    let worst = xi.max(eta).max(e_eps).max(e_m).max(e_h);
    ensure(worst <= HOMOGENEOUS_ABS, || format!("max deviation {worst:.2e} > {HOMOGENEOUS_ABS:.0e}"))?;
    ensure(elapsed < HOMOGENEOUS_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!("max deviation {worst:.1e}, m=64 in {elapsed:.2?}"))
}

fn laminate_eps0(m: usize) -> Result<DMatrix<f64>, String> {
    let cell =
        build_unit_cell(&GeometrySpec::Laminate { fluid_fraction: 0.5, axis: 0 }, 2, m).map_err(|e| e.to_string())?;
    let params = PermittivityParams::new(1.0, 4.0).map_err(|e| e.to_string())?;
    let (_, t) = upscale(&cell, &params, &UpscaleOptions::default()).map_err(|e| e.to_string())?;
    Ok(t.eps0)
}

fn c2_laminate() -> Verdict {
    let target = diag(&[1.6, 2.5]);
    for m in [4, 8, 34] {
        let err = rel_matrix_err(&laminate_eps0(m)?, &target);
        ensure(err <= LAMINATE_REL, || format!("m={m}: relative error {err:.2e}"))?;
    }
    let start = Instant::now();
    let eps = laminate_eps0(128)?;
    let elapsed = start.elapsed();
    let err = rel_matrix_err(&eps, &target);
    ensure(err <= LAMINATE_REL, || format!("m=128: relative error {err:.2e}"))?;
    ensure(elapsed < LAMINATE_TIME, || format!("m=128 took {elapsed:?}"))?;
    Ok(format!("eps0 = diag({:.9}, {:.9}), rel err {err:.1e}, m=128 in {elapsed:.2?}", eps[(0, 0)], eps[(1, 1)]))
}

fn checkerboard_error(m: usize) -> Result<f64, String> {
    let cell = build_unit_cell(&GeometrySpec::Checkerboard, 2, m).map_err(|e| e.to_string())?;
    let kappa = permittivity_field(&cell, &PermittivityParams::new(1.0, 4.0).map_err(|e| e.to_string())?);
    let xi: Vec<ScalarField> = solve_potential_corrector(&cell, &kappa, &SolverSettings::default())
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| s.field)
        .collect();
    let q = effective_permittivity(&kappa, &xi).map_err(|e| e.to_string())?;
    Ok(rel_matrix_err(&q.flux, &(DMatrix::identity(2, 2) * 2.0)))
}

fn c3_checkerboard() -> Verdict {
    let errs: Vec<f64> = [64, 128, 256].iter().map(|&m| checkerboard_error(m)).collect::<Result<_, _>>()?;
    ensure(errs.windows(2).all(|w| w[1] < w[0]), || format!("not decreasing: {errs:?}"))?;
    ensure(errs[2] <= CHECKERBOARD_REL, || format!("m=256 error {:.3e}", errs[2]))?;
    Ok(format!("relative errors m=64/128/256: {:.4} / {:.4} / {:.4}", errs[0], errs[1], errs[2]))
}

fn tensor_geometries(m: usize) -> Vec<(&'static str, GeometrySpec)> {
    let mut mask = vec![true; m * m];
    // off-center L-shaped inclusion
    for i in 0..m {
        for j in 0..m {
            let (x, y) = ((i as f64 + 0.5) / m as f64, (j as f64 + 0.5) / m as f64);
            if (0.1..0.6).contains(&x) && (0.2..0.4).contains(&y) || (0.1..0.3).contains(&x) && (0.2..0.75).contains(&y)
            {
                mask[i * m + j] = false;
            }
        }
    }
    vec![
        ("full", GeometrySpec::Full),
        ("laminate-1", GeometrySpec::Laminate { fluid_fraction: 0.5, axis: 0 }),
        ("laminate-2", GeometrySpec::Laminate { fluid_fraction: 0.375, axis: 1 }),
        ("disc", GeometrySpec::Disc { radius: 0.3 }),
        ("checkerboard", GeometrySpec::Checkerboard),
        ("L-mask", GeometrySpec::Mask { mask }),
    ]
}

fn c4_tensor_structure() -> Verdict {
    let m = 32;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for (name, shape) in tensor_geometries(m) {
        for (lambda, alpha) in [(1.0, 4.0), (0.1, 3.0), (2.0, 0.5)] {
            let cell = build_unit_cell(&shape, 2, m).map_err(|e| e.to_string())?;
            let kappa = permittivity_field(&cell, &PermittivityParams { lambda, alpha });
            let xi: Vec<ScalarField> = solve_potential_corrector(&cell, &kappa, &SolverSettings::default())
                .map_err(|e| format!("{name}: {e}"))?
                .into_iter()
                .map(|s| s.field)
                .collect();
            let q = effective_permittivity(&kappa, &xi).map_err(|e| format!("{name}: {e}"))?;
            let b = voigt_reuss(&kappa);
            let ev = symmetric_eigenvalues(&q.flux);
            let sym = (&q.flux - q.flux.transpose()).amax() / q.flux.amax();
            let outside = ev.iter().map(|&e| (b.reuss - e).max(e - b.voigt).max(0.0)).fold(0.0, f64::max);
            ensure(q.defect <= FLUX_ENERGY_REL, || format!("{name}: flux/energy defect {:.2e}", q.defect))?;
            ensure(outside <= BOUNDS_SLACK, || {
                format!("{name}: eigenvalues {ev:?} outside [{}, {}]", b.reuss, b.voigt)
            })?;
            ensure(sym <= SYMMETRY_REL, || format!("{name}: symmetry defect {sym:.2e}"))?;
            worst = (worst.0.max(q.defect), worst.1.max(outside), worst.2.max(sym));
        }
    }
    Ok(format!(
        "6 geometries x 3 contrasts: flux/energy {:.1e}, bound excess {:.1e}, asymmetry {:.1e}",
        worst.0, worst.1, worst.2
    ))
}

fn c5_macro_poisson() -> Verdict {
    let start = Instant::now();
    let eps = diag(&[1.6, 2.5]);
    let mut errs = Vec::new();
    for n in [32, 64, 128] {
        let g = Grid::new(2, n, GridRole::Macro).map_err(|e| e.to_string())?;
        let charge: Vec<f64> = (0..g.len()).map(|i| (PI * g.centers(i)[0]).cos()).collect();
        let zero = vec![0.0; g.len()];
        let sol = solve_macro_poisson(g, &charge, &zero, &eps, 1.0, &tight()).map_err(|e| e.to_string())?;
        let err = sol.potential.iter().zip(&charge).map(|(u, c)| (u - c / (1.6 * PI * PI)).abs()).fold(0.0, f64::max);
        errs.push((n, err));
    }
    let elapsed = start.elapsed();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0].1 / w[1].1).log2()).collect();
    let c = errs.iter().map(|&(n, e)| e * (n * n) as f64).fold(0.0, f64::max);
    ensure(orders.iter().all(|&o| o >= POISSON_ORDER), || format!("observed orders {orders:.3?}"))?;
    ensure(elapsed < POISSON_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "max-norm errors {:.2e}/{:.2e}/{:.2e}, orders {:.3?}, C={c:.3}, {elapsed:.2?}",
        errs[0].1, errs[1].1, errs[2].1, orders
    ))
}

fn c6_eigenmode() -> Verdict {
    let dt = 1e-4;
    let mut cfg = MacroConfig::new(2, 64, dt, 20.0 * dt);
    cfg.solver = tight();
    let stepper =
        MacroStepper::new(cfg.clone(), EffectiveTensors::homogeneous(2, 1.0, 1.0)).map_err(|e| e.to_string())?;
    let mut state = InitialProfile::Eigenmode.macro_state(stepper.grid());
    stepper.equilibrate_potential(&mut state).map_err(|e| e.to_string())?;
    let exact = (-2.0 * PI * PI * dt).exp();
    let (mut worst_phi, mut worst_sym, mut worst_rate) = (0.0f64, 0.0f64, 0.0f64);
    let mut mass = state.u1.iter().sum::<f64>();
    for _ in 0..cfg.steps() {
        let (next, _) = stepper.step(&state).map_err(|e| e.to_string())?;
        state = next;
        worst_phi = worst_phi.max(state.u3.iter().fold(0.0, |a, v| a.max(v.abs())));
        worst_sym = worst_sym.max(state.u1.iter().zip(&state.u2).fold(0.0, |a, (x, y)| a.max((x - y).abs())));
        let m = state.u1.iter().sum::<f64>();
        let factor = m / mass;
        ensure((factor - exact).abs() <= DECAY_REL * exact, || format!("decay factor {factor} vs {exact}"))?;
        let rate = -factor.ln() / dt;
        worst_rate = worst_rate.max((rate - 2.0 * PI * PI).abs() / (2.0 * PI * PI));
        mass = m;
    }
    ensure(worst_phi <= EQUAL_DENSITY_POTENTIAL, || format!("max |u3| = {worst_phi:.2e}"))?;
    ensure(worst_sym <= EQUAL_DENSITY_POTENTIAL, || format!("max |u1-u2| = {worst_sym:.2e}"))?;
    ensure(worst_rate <= DECAY_REL, || format!("decay rate off by {worst_rate:.3e}"))?;
    Ok(format!(
        "|u3| <= {worst_phi:.1e}, |u1-u2| <= {worst_sym:.1e}, decay rate within {:.3}% of 2pi^2",
        100.0 * worst_rate
    ))
}

fn asymmetric_1d(dt: f64, t_final: f64, n: usize, bc: DensityBc) -> MacroConfig {
    let mut cfg = MacroConfig::new(1, n, dt, t_final);
    cfg.bc = bc;
    cfg.solver = tight();
    cfg.picard = PicardSettings { tol: 1e-10, max_iter: 50 };
    cfg
}

fn picard_profile(dt: f64) -> Result<(usize, bool), String> {
    let cfg = asymmetric_1d(dt, 0.01, 64, DensityBc::Dirichlet);
    let init = InitialProfile::Asymmetric { amplitude: 0.5 }.macro_state(cfg.grid().map_err(|e| e.to_string())?);
    let run = run_macro(&cfg, &EffectiveTensors::homogeneous(1, 1.0, 1.0), &init).map_err(|e| e.to_string())?;
    let max_iters = run.increments.iter().map(Vec::len).max().unwrap_or(0);
    let monotone = run.increments.iter().all(|inc| inc.windows(2).all(|w| w[1] < w[0]));
    Ok((max_iters, monotone))
}

fn c7_picard() -> Verdict {
    let (iters, monotone) = picard_profile(1e-3)?;
    let (iters_half, monotone_half) = picard_profile(5e-4)?;
    ensure(iters <= PICARD_MAX_ITERS, || format!("{iters} iterations at dt=1e-3"))?;
    ensure(monotone && monotone_half, || "increments not monotonically decreasing".into())?;
    ensure(iters_half <= iters, || format!("halving dt raised iterations {iters} -> {iters_half}"))?;
    Ok(format!("max Picard iterations {iters} (dt=1e-3), {iters_half} (dt=5e-4), increments monotone"))
}

/// Forward-Euler reference for the 1D asymmetric benchmark on `n` cells.
fn explicit_oracle(n: usize, t_final: f64, dt_max: f64) -> [Vec<f64>; 3] {
    let h = 1.0 / n as f64;
    let steps = (t_final / dt_max).ceil() as usize;
    let dt = t_final / steps as f64;
    let mut u: [Vec<f64>; 2] = [(0..n).map(|i| 1.0 + 0.5 * (PI * (i as f64 + 0.5) * h).sin()).collect(), vec![1.0; n]];
    let potential = |u: &[Vec<f64>; 2]| -> Vec<f64> {
        // -phi'' = rho - mean(rho), Neumann; integrate the face fluxes directly
        let rho: Vec<f64> = u[0].iter().zip(&u[1]).map(|(a, b)| a - b).collect();
        let mean = rho.iter().sum::<f64>() / n as f64;
        let mut phi = vec![0.0; n];
        let mut q = 0.0;
        for i in 0..n - 1 {
            q += h * (rho[i] - mean);
            phi[i + 1] = phi[i] - h * q;
        }
        let m = phi.iter().sum::<f64>() / n as f64;
        phi.iter().map(|p| p - m).collect()
    };
    let charges = [1.0, -1.0];
    for _ in 0..steps {
        let phi = potential(&u);
        let mut next = u.clone();
        for r in 0..2 {
            let v = &u[r];
            let mut flux = vec![0.0; n + 1];
            flux[0] = -2.0 * v[0] / h;
            flux[n] = 2.0 * v[n - 1] / h;
            for f in 1..n {
                let w = -charges[r] * (phi[f] - phi[f - 1]) / h;
                let up = if w > 0.0 { v[f - 1] } else { v[f] };
                flux[f] = -(v[f] - v[f - 1]) / h + w * up;
            }
            for i in 0..n {
                next[r][i] = v[i] - dt / h * (flux[i + 1] - flux[i]);
            }
        }
        u = next;
    }
    let phi = potential(&u);
    let [a, b] = u;
    [a, b, phi]
}

fn restrict(fine: &[f64], ratio: usize) -> Vec<f64> {
    fine.chunks(ratio).map(|c| c.iter().sum::<f64>() / ratio as f64).collect()
}

fn rel_l2(a: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(reference).map(|(x, y)| (x - y) * (x - y)).sum();
    let den: f64 = reference.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

fn c8_oracle() -> Verdict {
    let start = Instant::now();
    // Upwind drift is first order in h, so the potential (mean zero, small
    // norm) needs 128 cells to sit comfortably inside the tolerance.
    let (n, dt, t_final) = (128, 1e-4, 0.05);
    let cfg = asymmetric_1d(dt, t_final, n, DensityBc::Dirichlet);
    let init = InitialProfile::Asymmetric { amplitude: 0.5 }.macro_state(cfg.grid().map_err(|e| e.to_string())?);
    let run = run_macro(&cfg, &EffectiveTensors::homogeneous(1, 1.0, 1.0), &init).map_err(|e| e.to_string())?;
    let nf = 4 * n;
    let hf = 1.0 / nf as f64;
    let oracle = explicit_oracle(nf, t_final, (dt / 10.0).min(0.25 * hf * hf));
    let fin = &run.final_state;
    let errs = [
        rel_l2(&fin.u1, &restrict(&oracle[0], 4)),
        rel_l2(&fin.u2, &restrict(&oracle[1], 4)),
        rel_l2(&fin.u3, &restrict(&oracle[2], 4)),
    ];
    let elapsed = start.elapsed();
    let worst = errs.iter().copied().fold(0.0, f64::max);
    ensure(worst <= ORACLE_REL_L2, || format!("relative L2 errors {errs:?}"))?;
    ensure(elapsed < ORACLE_TIME, || format!("took {elapsed:?}"))?;
    Ok(format!("rel L2 u1/u2/u3 = {:.2e}/{:.2e}/{:.2e}, {elapsed:.2?}", errs[0], errs[1], errs[2]))
}

fn c9_micro_macro_full() -> Verdict {
    let lambda = 0.3;
    let params = PermittivityParams::new(lambda, 1.0).map_err(|e| e.to_string())?;
    let cell = build_unit_cell(&GeometrySpec::Full, 2, 16).map_err(|e| e.to_string())?;
    let (_, tensors) = upscale(&cell, &params, &UpscaleOptions::default()).map_err(|e| e.to_string())?;
    let dom = assemble_micro_domain(&cell, &params, 0.25, DEFAULT_BUDGET).map_err(|e| e.to_string())?;
    let mut cfg = MacroConfig::new(2, dom.grid.n, 1e-4, 0.01);
    cfg.solver = tight();
    let profile = InitialProfile::Asymmetric { amplitude: 0.5 };
    let macro_run = run_macro(&cfg, &tensors, &profile.macro_state(cfg.grid().map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    let dns = run_micro(&dom, &MicroConfig::from(&cfg), &MicroState::from_profile(&dom, &profile))
        .map_err(|e| e.to_string())?;
    let plain = interpolate_macro(&macro_run.final_state, &dom);
    let mut errs = [0.0; 3];
    for (k, e) in errs.iter_mut().enumerate() {
        *e = compare_fields(&dns.final_state.field(k), &plain.field(k), None).map_err(|e| e.to_string())?.rel_l2;
    }
    let worst = errs.iter().copied().fold(0.0, f64::max);
    ensure(worst <= MICRO_MACRO_REL_L2, || format!("relative L2 errors {errs:?}"))?;
    Ok(format!("rel L2 n+/n-/phi = {:.1e}/{:.1e}/{:.1e} at T=0.01, 64x64", errs[0], errs[1], errs[2]))
}

fn c10_s_convergence() -> Verdict {
    let start = Instant::now();
    let cell = build_unit_cell(&GeometrySpec::Disc { radius: 0.25 }, 2, 32).map_err(|e| e.to_string())?;
    let params = PermittivityParams::new(1.0, 4.0).map_err(|e| e.to_string())?;
    let (corr, tensors) = upscale(&cell, &params, &UpscaleOptions::default()).map_err(|e| e.to_string())?;
    let mut cfg = MacroConfig::new(2, 64, 1e-4, 1e-3);
    cfg.bc = DensityBc::NoFlux;
    let profile = InitialProfile::Cosine { amplitude: 0.5 };
    let macro_run = run_macro(&cfg, &tensors, &profile.macro_state(cfg.grid().map_err(|e| e.to_string())?))
        .map_err(|e| e.to_string())?;
    let mut rec_errs = Vec::new();
    let mut macro_errs = Vec::new();
    for s in [0.5, 0.25, 0.125] {
        let dom = assemble_micro_domain(&cell, &params, s, DEFAULT_BUDGET).map_err(|e| e.to_string())?;
        let dns = run_micro(&dom, &MicroConfig::from(&cfg), &MicroState::from_profile(&dom, &profile))
            .map_err(|e| e.to_string())?;
        let rec = reconstruct_two_scale(&macro_run.final_state, &corr, &dom).map_err(|e| e.to_string())?;
        let plain = interpolate_macro(&macro_run.final_state, &dom);
        let phi = dns.final_state.field(2);
        rec_errs.push(compare_fields(&phi, &rec.field(2), None).map_err(|e| e.to_string())?.abs_l2);
        macro_errs.push(compare_fields(&phi, &plain.field(2), None).map_err(|e| e.to_string())?.abs_l2);
    }
    let elapsed = start.elapsed();
    ensure(rec_errs.windows(2).all(|w| w[1] < w[0]), || format!("reconstruction errors not decreasing: {rec_errs:?}"))?;
    ensure(rec_errs[2] < macro_errs[2], || {
        format!("s=1/8: reconstruction {:.3e} vs macro-only {:.3e}", rec_errs[2], macro_errs[2])
    })?;
    ensure(elapsed < SWEEP_TIME, || format!("sweep took {elapsed:?}"))?;
    Ok(format!(
        "L2 error s=1/2,1/4,1/8: reconstructed {:.2e}/{:.2e}/{:.2e}, macro-only {:.2e}/{:.2e}/{:.2e}, {elapsed:.1?}",
        rec_errs[0], rec_errs[1], rec_errs[2], macro_errs[0], macro_errs[1], macro_errs[2]
    ))
}

fn c11_conservation_energy() -> Verdict {
    // macro, all-no-flux, asymmetric 1D benchmark
    let cfg = asymmetric_1d(1e-4, 0.02, 64, DensityBc::NoFlux);
    let tensors = EffectiveTensors::homogeneous(1, 1.0, 1.0);
    let init = InitialProfile::Asymmetric { amplitude: 0.5 }.macro_state(cfg.grid().map_err(|e| e.to_string())?);
    let stepper = MacroStepper::new(cfg.clone(), tensors.clone()).map_err(|e| e.to_string())?;
    let mut state = init;
    stepper.equilibrate_potential(&mut state).map_err(|e| e.to_string())?;
    let vol = state.grid.cell_volume();
    let masses = |s: &MacroState| (s.u1.iter().sum::<f64>() * vol, s.u2.iter().sum::<f64>() * vol);
    let (mut m1, mut m2) = masses(&state);
    let mut f = free_energy(&state, cfg.lambda2).map_err(|e| e.to_string())?;
    let mut fe = free_energy_effective(&state, &tensors.eps0).map_err(|e| e.to_string())?;
    let (mut worst_mass, mut worst_rise) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..cfg.steps() {
        let (next, _) = stepper.step(&state).map_err(|e| e.to_string())?;
        state = next;
        let (a, b) = masses(&state);
        worst_mass = worst_mass.max(((a - m1) / m1).abs()).max(((b - m2) / m2).abs());
        let f_new = free_energy(&state, cfg.lambda2).map_err(|e| e.to_string())?;
        let fe_new = free_energy_effective(&state, &tensors.eps0).map_err(|e| e.to_string())?;
        worst_rise = worst_rise.max(f_new - f).max(fe_new - fe);
        (m1, m2, f, fe) = (a, b, f_new, fe_new);
    }
    ensure(worst_mass <= CONSERVATION_REL, || format!("macro mass drift {worst_mass:.2e} per step"))?;
    ensure(worst_rise <= ENERGY_SLACK, || format!("free energy rose by {worst_rise:.2e} in one step"))?;

    // micro, all-no-flux, disc domain with unequal species
    let cell = build_unit_cell(&GeometrySpec::Disc { radius: 0.25 }, 2, 16).map_err(|e| e.to_string())?;
    let params = PermittivityParams::new(1.0, 4.0).map_err(|e| e.to_string())?;
    let dom = assemble_micro_domain(&cell, &params, 0.25, DEFAULT_BUDGET).map_err(|e| e.to_string())?;
    let mut mcfg = MicroConfig::from(&asymmetric_1d(1e-4, 2e-3, 64, DensityBc::NoFlux));
    mcfg.bc = DensityBc::NoFlux;
    let init = MicroState::from_profile(&dom, &InitialProfile::Cosine { amplitude: 0.5 });
    let fv = dom.grid.cell_volume();
    let (mut p1, mut p2) = (init.nplus.iter().sum::<f64>() * fv, init.nminus.iter().sum::<f64>() * fv);
    let run = run_micro(&dom, &mcfg, &init).map_err(|e| e.to_string())?;
    let mut worst_micro = 0.0f64;
    for &(_, a, b) in &run.masses {
        worst_micro = worst_micro.max(((a - p1) / p1).abs()).max(((b - p2) / p2).abs());
        (p1, p2) = (a, b);
    }
    ensure(worst_micro <= CONSERVATION_REL, || format!("micro mass drift {worst_micro:.2e} per step"))?;
    Ok(format!(
        "per-step mass drift macro {worst_mass:.1e}, micro {worst_micro:.1e}; largest free-energy change {worst_rise:.1e}"
    ))
}

fn c12_local_equilibrium() -> Verdict {
    let mut worst = 0.0f64;
    let mut fields: Vec<(Grid, Vec<f64>)> = Vec::new();
    for (dim, n) in [(1, 64), (2, 64), (3, 16)] {
        let g = Grid::new(dim, n, GridRole::Macro).map_err(|e| e.to_string())?;
        for amp in [0.0, 1.0, 5.0, 20.0] {
            let u3: Vec<f64> = (0..g.len())
                .map(|i| {
                    let x = g.centers(i);
                    amp * ((7.1 * x[0]).sin() + (3.3 * x[1] + 1.0).cos() * (2.0 * x[2]).exp())
                })
                .collect();
            fields.push((g, u3));
        }
    }
    // a potential produced by an actual run
    let cfg = asymmetric_1d(1e-3, 5e-3, 64, DensityBc::Dirichlet);
    let init = InitialProfile::Asymmetric { amplitude: 0.5 }.macro_state(cfg.grid().map_err(|e| e.to_string())?);
    let run = run_macro(&cfg, &EffectiveTensors::homogeneous(1, 1.0, 1.0), &init).map_err(|e| e.to_string())?;
    fields.push((run.final_state.grid, run.final_state.u3.clone()));
    for (g, u3) in fields {
        let mut s = MacroState::zeros(g);
        s.u1 = u3.iter().map(|p| (-p).exp()).collect();
        s.u2 = u3.iter().map(|p| p.exp()).collect();
        s.u3 = u3;
        for window in [1, 4, 8] {
            let le = check_local_equilibrium(&s, window);
            ensure(le.skipped_blocks == 0, || "blocks skipped for positive densities".into())?;
            worst = worst.max(le.deviation);
        }
    }
    ensure(worst <= LOCEQ_TOL, || format!("deviation {worst:.2e}"))?;
    Ok(format!("max deviation {worst:.1e} over 13 potentials, windows 1/4/8"))
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 12] = [
        ("homogeneous reduction", c1_homogeneous),
        ("laminate tensor", c2_laminate),
        ("checkerboard duality", c3_checkerboard),
        ("tensor structure", c4_tensor_structure),
        ("macro Poisson eigenfunction", c5_macro_poisson),
        ("equal-density symmetry and eigenmode decay", c6_eigenmode),
        ("fixed-point behavior", c7_picard),
        ("explicit-oracle equivalence", c8_oracle),
        ("micro-macro consistency, trivial geometry", c9_micro_macro_full),
        ("s-convergence, disc inclusion", c10_s_convergence),
        ("conservation and free energy", c11_conservation_energy),
        ("local-equilibrium diagnostic", c12_local_equilibrium),
    ];
    // Optional filter: `cargo test --test acceptance -- 3 8` runs only those.
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (title, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let tag = if verdict.is_ok() { "PASS" } else { "FAIL" };
        let detail = verdict.unwrap_or_else(|e| {
            failed += 1;
            e
        });
        println!("criterion {:>2} [{tag}] {title}: {detail} ({:.1?})", i + 1, start.elapsed());
    }
    let ran = if only.is_empty() { criteria.len() } else { only.iter().filter(|&&k| (1..=12).contains(&k)).count() };
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
