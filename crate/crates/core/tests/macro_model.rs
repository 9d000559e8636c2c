use std::f64::consts::PI;

use nalgebra::DMatrix;
use pnp_homog::cellcorrect::SolverSettings;
use pnp_homog::grid::{Grid, GridRole};
use pnp_homog::macropnp::{
    check_local_equilibrium, free_energy, run_macro, solve_macro_poisson, InitialProfile, MacroConfig, MacroState,
};
use pnp_homog::transport::{DensityBc, PicardSettings};
use pnp_homog::upscale::EffectiveTensors;
use pnp_homog::CoreError;

fn tight() -> SolverSettings {
    SolverSettings { tol: 1e-12, iter_factor: 100 }
}

fn unit_tensors(dim: usize) -> EffectiveTensors {
    EffectiveTensors::homogeneous(dim, 1.0, 1.0)
}

fn config(dim: usize, n: usize, dt: f64, t_final: f64, bc: DensityBc) -> MacroConfig {
    let mut cfg = MacroConfig::new(dim, n, dt, t_final);
    cfg.bc = bc;
    cfg.solver = tight();
    cfg.picard = PicardSettings { tol: 1e-10, max_iter: 50 };
    cfg
}

#[test]
fn anisotropic_poisson_eigenfunction() {
    let n = 64;
    let g = Grid::new(2, n, GridRole::Macro).unwrap();
    let eps0 = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.6, 2.5]));
    let u1: Vec<f64> = (0..g.len()).map(|i| 1.0 + (PI * g.centers(i)[0]).cos()).collect();
    let u2 = vec![1.0; g.len()];
    let sol = solve_macro_poisson(g, &u1, &u2, &eps0, 1.0, &tight()).unwrap();
    let h = g.h();
    let worst = (0..g.len())
        .map(|i| (sol.potential[i] - (PI * g.centers(i)[0]).cos() / (1.6 * PI * PI)).abs())
        .fold(0.0, f64::max);
    assert!(worst < 0.1 * h * h, "max error {worst:.3e} vs h² = {:.3e}", h * h);
}

#[test]
fn zero_state_gives_zero_rows() {
    let dt = 1e-3;
    let cfg = config(2, 16, dt, 3.0 * dt, DensityBc::Dirichlet);
    let run = run_macro(&cfg, &unit_tensors(2), &MacroState::zeros(cfg.grid().unwrap())).unwrap();
    assert_eq!(run.rows.len(), 3);
    for (k, row) in run.rows.iter().enumerate() {
        assert_eq!(row.t, (k + 1) as f64 * dt);
        assert_eq!((row.mass1, row.mass2, row.charge, row.free_energy), (0.0, 0.0, 0.0, 0.0));
    }
    assert!(run.final_state.u3.iter().all(|&v| v == 0.0));
}

#[test]
fn eigenmode_mass_decays_at_the_heat_rate() {
    let (dt, t_final) = (1e-4, 5e-3);
    let cfg = config(2, 64, dt, t_final, DensityBc::Dirichlet);
    let init = InitialProfile::Eigenmode.macro_state(cfg.grid().unwrap());
    let run = run_macro(&cfg, &unit_tensors(2), &init).unwrap();
    let m0 = init.u1.iter().sum::<f64>() * init.grid.cell_volume();
    for row in &run.rows {
        let expected = m0 * (-2.0 * PI * PI * row.t).exp();
        assert!((row.mass1 - expected).abs() <= 0.01 * expected, "t={}: {} vs {expected}", row.t, row.mass1);
        assert_eq!(row.mass1, row.mass2);
        assert_eq!(row.charge, 0.0);
    }
}

#[test]
fn asymmetric_run_stays_positive_with_mean_zero_potential() {
    let mut cfg = config(1, 64, 1e-4, 0.01, DensityBc::Dirichlet);
    cfg.snapshots = (1..=10).map(|k| k as f64 * 1e-3).collect();
    let init = InitialProfile::Asymmetric { amplitude: 0.5 }.macro_state(cfg.grid().unwrap());
    let run = run_macro(&cfg, &unit_tensors(1), &init).unwrap();
    assert_eq!(run.snapshots.len(), 10);
    for s in run.snapshots.iter().chain(std::iter::once(&run.final_state)) {
        assert!(s.u1.iter().chain(&s.u2).all(|&v| v >= -1e-12));
        let max = s.u3.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mean = s.u3.iter().sum::<f64>() / s.u3.len() as f64;
        assert!(mean.abs() <= 1e-10 * max.max(f64::MIN_POSITIVE));
    }
    assert!(run.final_state.u3.iter().any(|&v| v.abs() > 1e-4), "asymmetric data should drive a potential");
}

#[test]
fn picard_cap_is_reported() {
    let mut cfg = config(1, 32, 0.05, 0.05, DensityBc::Dirichlet);
    cfg.picard = PicardSettings { tol: 1e-14, max_iter: 1 };
    let init = InitialProfile::Asymmetric { amplitude: 0.9 }.macro_state(cfg.grid().unwrap());
    let err = run_macro(&cfg, &unit_tensors(1), &init).unwrap_err();
    assert!(matches!(err, CoreError::PicardCap { .. }), "{err}");
    assert!(err.to_string().contains("reduce dt"));
}

#[test]
fn invalid_configuration_is_rejected() {
    let mut cfg = config(1, 32, -1e-3, 0.01, DensityBc::Dirichlet);
    assert!(cfg.validate().is_err());
    cfg.dt = 0.1;
    assert!(cfg.validate().is_err(), "T smaller than dt");
    let bad = EffectiveTensors::homogeneous(1, 1.0, -1.0);
    let cfg = config(1, 32, 1e-3, 0.01, DensityBc::Dirichlet);
    let init = MacroState::zeros(cfg.grid().unwrap());
    assert!(matches!(run_macro(&cfg, &bad, &init), Err(CoreError::NotSpd(_))));
}

#[test]
fn free_energy_rejects_negative_density() {
    let g = Grid::new(1, 8, GridRole::Macro).unwrap();
    let mut s = MacroState::zeros(g);
    s.u1[3] = -0.5;
    assert!(matches!(free_energy(&s, 1.0), Err(CoreError::NegativeDensity { index: 3, .. })));
}

#[test]
fn local_equilibrium_skips_empty_blocks() {
    let g = Grid::new(1, 16, GridRole::Macro).unwrap();
    let mut s = MacroState::zeros(g);
    for i in 4..16 {
        s.u1[i] = 1.0;
        s.u2[i] = 2.0;
    }
    let report = check_local_equilibrium(&s, 4);
    assert_eq!(report.skipped_blocks, 1);
    assert_eq!(report.deviation, 0.0);
}
