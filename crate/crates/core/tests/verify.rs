use std::f64::consts::TAU;

use kamtori::kamflow::{run_iteration, KamConfig};
use kamtori::resonance::{screen_small_divisors, ScreenParams};
use kamtori::standard_test_model;
use kamtori::sympmap::{orbit, GeneratingMap, PhasePoint};
use kamtori::verify::*;

#[test]
fn synthetic_rotation_is_recovered() {
    let rho = TAU * (2f64.sqrt() - 1.0) / 7.0;
    // A smoothly conjugated rigid rotation.
    let lifted: Vec<Vec<f64>> = (0..100_000).map(|i| {
        let phase = 0.3 + i as f64 * rho;
        vec![phase + 0.05 * phase.sin()]
    }).collect();
    let est = rotation_vector(&lifted).unwrap();
    assert!((est.rotation[0] - rho).abs() < 1e-10);
    assert!(est.error < 1e-10);
}

#[test]
fn unperturbed_twist_rotates_by_t_xi() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    let z = PhasePoint::new(vec![0.0], vec![0.0], vec![0.5], vec![0.0]);
    let (_, lifted) = orbit(|p| map.apply_lifted(p), &z, 2000).unwrap();
    let est = rotation_vector(&lifted).unwrap();
    assert!((est.rotation[0] - 0.05).abs() < 1e-10);
}

#[test]
fn converged_torus_is_invariant_and_rotates_at_the_limit_frequency() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    let cfg = KamConfig::default();
    let out = run_iteration(&model, &model.default_xi, &cfg).unwrap();
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    assert!(invariance_residual(&out.state, &map, 64, None).unwrap() <= 1e-9);
    let wrong: Vec<f64> = out.omega_inf.iter().map(|w| 0.1 * w + 1e-3).collect();
    assert!(invariance_residual(&out.state, &map, 64, Some(&wrong)).unwrap() >= 1e-4);
    let lifted = torus_orbit(&out.state, &map, 20_000).unwrap();
    let est = rotation_vector(&lifted).unwrap();
    assert!((est.rotation[0] - 0.1 * out.omega_inf[0]).abs() <= 10.0 * cfg.stop_eps);
}

#[test]
fn unperturbed_residual_is_round_off() {
    let model = standard_test_model("twist-2-1", 0.0, 0.1).unwrap();
    let out = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    assert!(invariance_residual(&out.state, &map, 32, None).unwrap() <= 1e-13);
}

#[test]
fn residual_improves_with_the_stopping_tolerance() {
    let model = standard_test_model("twist-1-1", 1e-5, 0.1).unwrap();
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    let mut last = f64::INFINITY;
    for stop_eps in [1e-7, 1e-10, 1e-13] {
        let cfg = KamConfig { stop_eps, ..KamConfig::default() };
        let out = run_iteration(&model, &model.default_xi, &cfg).unwrap();
        let r = invariance_residual(&out.state, &map, 32, None).unwrap();
        assert!(r <= last, "{r:e} > {last:e}");
        last = r;
    }
}

#[test]
fn resonant_rotation_fails_the_screen() {
    let t = 1.0;
    let model = standard_test_model("twist-1-1", 1e-6, t).unwrap();
    // 6tξ = 2π.
    let xi = [TAU / 6.0];
    let p = ScreenParams::with_windows(t, 0.05, 8.0, 16, model.freq().sup_omega(), 1.0, 1.0);
    assert!(!screen_small_divisors(&model.freq().omega(&xi), &model.elliptic().theta, &xi, &p).passed);
}

#[test]
fn equal_steps_compare_to_zero() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    let c = scheme_two_step_compare(&model, &model.default_xi, 0.1, 0.1, &KamConfig::default()).unwrap();
    assert_eq!(c.omega_diff, 0.0);
    assert_eq!(c.psi_diff, 0.0);
    assert!(c.ratio.is_none());
}

#[test]
fn scheme_frequency_differences_shrink_along_the_ladder() {
    let model = standard_test_model("twist-1-1", 3e-3, 0.1).unwrap();
    let (cmp, _) = scheme_ladder(&model, &model.default_xi, &[0.1, 0.05, 0.025], &KamConfig::default()).unwrap();
    assert!(cmp[1].omega_diff < cmp[0].omega_diff);
    assert!(cmp[1].ratio.unwrap() <= 2.0 * cmp[0].ratio.unwrap());
    assert!(cmp[1].psi_diff < cmp[0].psi_diff);
}

#[test]
fn survival_table_trends() {
    let cfg = SurvivalConfig { samples: 12, ..SurvivalConfig::default() };
    let rows = survival_sweep(&cfg).unwrap();
    assert_eq!(rows.len(), cfg.eps_grid.len());
    let first = &rows[0];
    assert_eq!(first.eps, 0.0);
    assert_eq!(first.converged, first.screen_pass);
    assert_eq!(first.fraction, first.screen_pass);
    let inversions = rows.windows(2).filter(|w| w[1].fraction > w[0].fraction).count();
    assert!(inversions <= 1);
    for r in &rows {
        assert!(r.fraction <= r.screen_pass);
        assert!(r.converged <= r.screen_pass);
    }
    let csv = survival_csv(&rows);
    assert!(csv.starts_with("eps,t,screen_pass,converged,residual_ok,fraction\n"));
}
