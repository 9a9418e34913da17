use kamtori::kamflow::{run_iteration, schedule_gamma, schedule_rho, trace_jsonl, KamConfig, KamState};
use kamtori::{standard_test_model, Error};

#[test]
fn twist_run_contracts_superlinearly() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    let out = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    let trace = &out.state.trace;
    assert!(trace.len() >= 3);
    for rec in trace {
        assert!(rec.eps_next <= rec.eps_v.powf(1.25), "{} -> {}", rec.eps_v, rec.eps_next);
        assert!(rec.min_divisor_margin > 0.0);
    }
    assert!(out.state.eps <= 1e-13);
    assert!(out.state.check_schedule());
}

#[test]
fn schedules_follow_their_closed_forms() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    let cfg = KamConfig::default();
    let out = run_iteration(&model, &model.default_xi, &cfg).unwrap();
    let rho0 = cfg.s0 / 20.0;
    let mut s = cfg.s0;
    for (v, rec) in out.state.trace.iter().enumerate() {
        assert_eq!(rec.rho_v, rho0 / 2f64.powi(v as i32));
        assert_eq!(rec.rho_v, schedule_rho(rho0, v));
        assert_eq!(rec.gamma_v, cfg.gamma / 2f64.powi(((cfg.nbar + 1) * cfg.l_order) as i32 * v as i32));
        assert_eq!(rec.gamma_v, schedule_gamma(cfg.gamma, cfg.nbar, cfg.l_order, v));
        assert_eq!(rec.s_v, s);
        s -= 5.0 * rec.rho_v;
        assert!(rec.eta_v <= cfg.eta_cap);
    }
    assert!(out.state.s >= cfg.s0 / 2.0);
}

#[test]
fn elliptic_coefficient_stays_bracketed() {
    let model = standard_test_model("twist-1-1", 1e-5, 0.1).unwrap();
    let out = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    let b0 = model.elliptic().theta[0].tan().abs();
    for rec in &out.state.trace {
        let bv = rec.theta[0].tan().abs();
        assert!(0.5 * b0 <= bv && bv <= 2.0 * b0);
    }
}

#[test]
fn frequency_drift_is_of_order_epsilon() {
    let model = standard_test_model("twist-1-1", 1e-5, 0.1).unwrap();
    let out = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    assert!(out.omega_drift <= 10.0 * 1e-5);
    assert!(out.eps_sum >= 1e-5);
}

#[test]
fn unperturbed_state_needs_no_steps() {
    let model = standard_test_model("twist-2-1", 0.0, 0.1).unwrap();
    let out = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    assert!(out.state.trace.is_empty());
    assert_eq!(out.omega_inf, model.freq().omega(&model.default_xi));
}

#[test]
fn resonant_parameter_aborts_with_a_divisor_violation() {
    let model = standard_test_model("twist-2-1", 1e-6, 0.1).unwrap();
    // tξ₁ = θ puts the angle combination of the u-linear cos x₁ term on the lattice.
    let xi = [model.elliptic().theta[0] / 0.1, 0.381_966_011_250_105_1];
    let err = run_iteration(&model, &xi, &KamConfig::default()).unwrap_err();
    assert!(err.is_dynamical());
    match err {
        Error::Aborted { source, step, .. } => {
            assert_eq!(step, 0);
            assert!(matches!(*source, Error::DivisorViolation { .. }));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn runs_are_reproducible() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    let a = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    let b = run_iteration(&model, &model.default_xi, &KamConfig::default()).unwrap();
    assert_eq!(trace_jsonl(&a.state.trace).unwrap(), trace_jsonl(&b.state.trace).unwrap());
}

#[test]
fn invalid_parameters_are_rejected() {
    let model = standard_test_model("twist-1-1", 1e-6, 0.1).unwrap();
    assert!(matches!(KamState::initial(&model, &[f64::NAN], &KamConfig::default()), Err(Error::InvalidInput(_))));
    assert!(matches!(KamState::initial(&model, &[0.5, 0.5], &KamConfig::default()), Err(Error::InvalidInput(_))));
}
