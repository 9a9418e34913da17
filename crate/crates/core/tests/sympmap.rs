use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kamtori::model::{standard_test_model, TestModel};
use kamtori::sympmap::{symplecticity_defect, GeneratingMap, HamiltonianFlow, PhasePoint};
use kamtori::verify::midpoint_defect;

fn random_point(model: &TestModel, rng: &mut ChaCha8Rng) -> PhasePoint {
    let (n, m) = (model.hamiltonian.n(), model.hamiltonian.m());
    PhasePoint::new(
        (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect(),
        (0..m).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        model.freq().domain.sample(rng),
        (0..m).map(|_| rng.gen_range(-0.1..0.1)).collect(),
    )
}

/// Central differences of a map on the lifted coordinates.
fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, z: &[f64], h: f64) -> DMatrix<f64> {
    let d = z.len();
    let mut jac = DMatrix::zeros(d, d);
    for b in 0..d {
        let mut zp = z.to_vec();
        let mut zm = z.to_vec();
        zp[b] += h;
        zm[b] -= h;
        let (fp, fm) = (f(&zp), f(&zm));
        for a in 0..d {
            jac[(a, b)] = (fp[a] - fm[a]) / (2.0 * h);
        }
    }
    jac
}

#[test]
fn twist_and_scheme_maps_are_symplectic() {
    for preset in ["twist-1-1", "twist-2-1"] {
        let model = standard_test_model(preset, 1e-3, 0.1).unwrap();
        let (n, m) = (model.hamiltonian.n(), model.hamiltonian.m());
        let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
        let flow = HamiltonianFlow::from_scheme(&model.scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let z = random_point(&model, &mut rng);
            let jm = map.jacobian(&z).unwrap();
            assert!(symplecticity_defect(&jm, n, m) <= 1e-9);
            let js = flow.midpoint_jacobian(&z.to_vec(), 0.1).unwrap();
            assert!(symplecticity_defect(&js, n, m) <= 1e-9);
        }
    }
}

#[test]
fn analytic_jacobians_match_finite_differences() {
    let model = standard_test_model("twist-2-1", 1e-2, 0.1).unwrap();
    let (n, m) = (model.hamiltonian.n(), model.hamiltonian.m());
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    let flow = HamiltonianFlow::from_scheme(&model.scheme);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..5 {
        let z = random_point(&model, &mut rng).to_vec();
        let fd = fd_jacobian(|w| map.apply_lifted(&PhasePoint::from_slice(w, n, m)).unwrap().0.to_vec(), &z, 1e-5);
        assert!((map.jacobian(&PhasePoint::from_slice(&z, n, m)).unwrap() - fd).amax() < 1e-8);
        let fd = fd_jacobian(|w| flow.midpoint_step(w, 0.1).unwrap().0, &z, 1e-5);
        assert!((flow.midpoint_jacobian(&z, 0.1).unwrap() - fd).amax() < 1e-8);
    }
}

#[test]
fn unperturbed_map_is_a_rigid_rotation() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    let z = PhasePoint::new(vec![1.0], vec![0.0], vec![0.5], vec![0.0]);
    let (zh, _) = map.apply_lifted(&z).unwrap();
    assert!((zh.x[0] - 1.05).abs() < 1e-15);
    assert_eq!(zh.y, vec![0.5]);
}

#[test]
fn midpoint_rule_has_local_order_three() {
    let model = standard_test_model("twist-1-1", 1e-2, 0.1).unwrap();
    let fit = midpoint_defect(&model, &[0.1, 0.05, 0.025], 8, 1).unwrap();
    let e = fit.exponent.unwrap();
    assert!((2.8..=3.2).contains(&e), "exponent {e}");
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn inverse_undoes_the_map(seed in 0u64..10_000, eps in 0.0f64..1e-2) {
        let model = standard_test_model("twist-2-1", eps, 0.1).unwrap();
        let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = random_point(&model, &mut rng);
        let (zh, _) = map.apply_lifted(&z).unwrap();
        prop_assert!(map.relation_residual(&z, &zh) <= 1e-12);
        let (back, _) = map.apply_inverse(&zh).unwrap();
        prop_assert!(back.distance(&z) <= 1e-12);
    }
}
