use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kamtori::model::ParamBox;
use kamtori::resonance::*;
use kamtori::{standard_test_model, Error};

fn unit_box(lo: f64, hi: f64) -> ParamBox {
    ParamBox { lo: vec![lo], hi: vec![hi] }
}

#[test]
fn linear_frequency_map_has_index_one() {
    let src = FnFrequency { n: 1, f: |x: &[f64]| vec![x[0]] };
    let data = russmann_index_amount(&src, &unit_box(-0.5, 0.5), 3, 101).unwrap();
    assert_eq!(data.nbar, 1);
    assert!((0.9..=1.0).contains(&data.beta_amount), "beta {}", data.beta_amount);
}

#[test]
fn degenerate_demo_has_index_two() {
    let model = standard_test_model("ruessmann-degenerate-demo", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let data = russmann_index_amount(freq, &freq.domain, 4, 101).unwrap();
    assert_eq!(data.nbar, 2);
    // Oracle: ω = ξ², so max(|ξ²|, |2ξ|, 2) ≥ 2 with equality at ξ = 0.
    assert!((data.beta_amount - 0.95 * 2.0).abs() < 1e-9);
}

#[test]
fn amount_bounds_every_probe() {
    let model = standard_test_model("twist-2-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let data = russmann_index_amount(freq, &freq.domain, 3, 9).unwrap();
    assert_eq!(data.nbar, 1);
    for (xi, _) in data.grid.iter().zip(&data.amounts) {
        for k in probe_vectors(2, 50, 0) {
            let kabs: i32 = k.iter().map(|v| v.abs()).sum();
            let w = freq.omega(xi);
            let d0 = (k[0] as f64 * w[0] + k[1] as f64 * w[1]).abs();
            let d1 = (k[0].abs().max(k[1].abs())) as f64;
            assert!(d0.max(d1) >= data.beta_amount * kabs as f64);
        }
    }
}

#[test]
fn flat_frequency_region_fails_the_rank_condition() {
    let src = FnFrequency { n: 1, f: |x: &[f64]| vec![if x[0] < 0.0 { 0.0 } else { x[0].powi(4) }] };
    let err = russmann_index_amount(&src, &unit_box(-1.0, 1.0), 3, 41).unwrap_err();
    match err {
        Error::RankConditionUnmet { worst_xi, .. } => assert!(worst_xi[0] < 0.0),
        other => panic!("unexpected {other}"),
    }
}

fn params(t: f64, gamma: f64, tau: f64, k_max: u32, omega: f64, max_b: f64) -> ScreenParams {
    ScreenParams::with_windows(t, gamma, tau, k_max, omega.abs(), 1.0, max_b)
}

#[test]
fn golden_rotation_has_no_violations() {
    let golden = 0.5 * (1.0 + 5f64.sqrt());
    let t = 0.1;
    let omega = TAU * golden / t;
    let report = screen_small_divisors(&[omega], &[], &[0.0], &params(t, 1e-3, 5.0, 50, omega, 0.0));
    assert!(report.passed);
    assert!(report.min_margin > 0.0);
}

#[test]
fn constructed_resonance_is_reported() {
    let (t, gamma, tau) = (0.1, 0.05, 4.0);
    let omega = TAU / 3.0 / t;
    let report = screen_small_divisors(&[omega], &[], &[0.0], &params(t, gamma, tau, 10, omega, 0.0));
    assert!(!report.passed);
    let v = report.violations.iter().find(|v| v.k == vec![3] && v.l == 1 && v.condition == 1).unwrap();
    assert!((v.margin + t * gamma / 3f64.powf(tau)).abs() < 1e-12);
}

#[test]
fn zero_mode_margin_of_the_angle_condition() {
    let (t, tau) = (0.1, 4.0);
    let theta = (t * 1.0f64).atan();
    let omega = 0.618_033_988_749_894_9;
    // tγ just above |θ| makes the k = 0 condition fail with margin |θ| − tγ.
    let gamma = 1.2 * theta / t;
    let report = screen_small_divisors(&[omega], &[theta], &[0.0], &params(t, gamma, tau, 0, omega, 1.0));
    let v = report.violations.iter().find(|v| v.k == vec![0] && v.condition == 2 && v.l == 0).unwrap();
    assert!((v.margin - (theta - t * gamma)).abs() < 1e-15);
    let report = screen_small_divisors(&[omega], &[theta], &[0.0], &params(t, 0.05, tau, 0, omega, 1.0));
    assert!(report.passed);
}

fn expected_count(n_modes: &[Vec<i32>], m: usize, p: &ScreenParams) -> usize {
    let combos = 2 * m + m * (m + 1) + m * (m - 1);
    n_modes
        .iter()
        .map(|k| {
            let kabs: i32 = k.iter().map(|v| v.abs()).sum();
            let first = if kabs == 0 { 0 } else { 2 * (kabs as f64 * p.k_hat).floor() as usize + 1 };
            first + (2 * (kabs as f64 * p.k_hat_prime).floor() as usize + 1) * combos
        })
        .sum()
}

#[test]
fn every_margin_is_recorded_once() {
    let model = standard_test_model("twist-2-1", 0.0, 0.1).unwrap();
    let theta = vec![0.07, 0.11];
    let p = params(0.1, 0.05, 8.0, 6, model.freq().sup_omega(), 1.0);
    let report = screen_small_divisors(&[0.6, 0.4], &theta, &[0.6, 0.4], &p);
    let modes = kamtori::genfun::modes_within(2, 6);
    assert_eq!(report.margins_recorded, expected_count(&modes, 2, &p));
}

#[test]
fn violations_only_occur_inside_the_l_window() {
    let t = 0.1;
    let model = standard_test_model("twist-1-1", 0.0, t).unwrap();
    let freq = model.freq();
    let theta = model.elliptic().theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let xi = freq.domain.sample(&mut rng);
        let omega = freq.omega(&xi);
        let p = params(t, 0.5, 2.0, 12, freq.sup_omega(), 1.0);
        let windowed = screen_small_divisors(&omega, &theta, &xi, &p);
        let wide = ScreenParams { k_hat: 1000.0, k_hat_prime: 1000.0, ..p.clone() };
        let unrestricted: Vec<_> = screen_small_divisors(&omega, &theta, &xi, &wide).violations.into_iter().filter(|v| v.l.abs() <= 1000).collect();
        assert_eq!(unrestricted, windowed.violations);
    }
}

#[test]
fn nearest_lattice_check_agrees_with_the_screen() {
    let t = 0.1;
    let model = standard_test_model("twist-1-1", 0.0, t).unwrap();
    let freq = model.freq();
    let theta = model.elliptic().theta.clone();
    let p = params(t, 0.05, 3.0, 16, freq.sup_omega(), 1.0);
    for i in 0..200 {
        let xi = vec![0.2 + i as f64 / 200.0];
        let omega = freq.omega(&xi);
        let report = screen_small_divisors(&omega, &theta, &xi, &p);
        let flags = violated_families(&omega, &theta, t, p.gamma, p.tau, p.k_max);
        assert_eq!(flags.iter().any(|&b| b), !report.passed);
        for fam in 1..=4u8 {
            assert_eq!(flags[fam as usize - 1], report.violations.iter().any(|v| v.condition == fam));
        }
    }
}

fn measure_params(grid_res: usize) -> MeasureParams {
    MeasureParams { t: 0.1, tau: 8.0, k_max: 32, grid_res, mc_samples: 4000, seed: 42 }
}

#[test]
fn zero_gamma_excludes_nothing() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let est = excluded_measure(freq, &freq.domain, &model.elliptic().theta, 0.0, &measure_params(512)).unwrap();
    assert_eq!(est.measure, 0.0);
}

#[test]
fn excluded_sets_are_nested() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let theta = &model.elliptic().theta;
    let small = excluded_measure(freq, &freq.domain, theta, 0.02, &measure_params(1024)).unwrap();
    let large = excluded_measure(freq, &freq.domain, theta, 0.04, &measure_params(1024)).unwrap();
    assert!(small.excluded_cells.iter().zip(&large.excluded_cells).all(|(s, l)| !s || *l));
    assert!(small.measure <= large.measure);
}

#[test]
fn monte_carlo_estimate_brackets_the_grid_count() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let est = excluded_measure(freq, &freq.domain, &model.elliptic().theta, 0.05, &measure_params(2048)).unwrap();
    let slack = 0.02;
    assert!(est.ci_low - slack <= est.measure && est.measure <= est.ci_high + slack, "{est:?}");
    let total: f64 = est.breakdown.iter().sum();
    assert!(total >= est.measure - 1e-12);
}

#[test]
fn coarse_measure_grids_are_rejected() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    assert!(matches!(
        excluded_measure(freq, &freq.domain, &model.elliptic().theta, 0.05, &measure_params(32)),
        Err(Error::GridTooCoarse { .. })
    ));
}

#[test]
fn sweep_csv_has_the_documented_header() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let (rows, _) = measure_sweep(freq, &freq.domain, &model.elliptic().theta, &[0.01, 0.02], &measure_params(256)).unwrap();
    let csv = measure_csv(&rows);
    assert!(csv.starts_with("gamma,excluded_measure,ci_low,ci_high,slope_running\n"));
    assert_eq!(csv.lines().count(), 3);
    assert!(rows[0].slope_running.is_none() && rows[1].slope_running.is_some());
}

#[test]
fn sublevel_of_the_identity() {
    let r = sublevel_measure(&|x| x, &|_| 1.0, (-1.0, 1.0), 0.1, 1, 1.0).unwrap();
    assert!((r.measure - 0.2).abs() < 1e-8);
    assert!(r.holds);
}

#[test]
fn sublevel_of_a_shifted_square() {
    let g = |x: f64| x * x - 0.25;
    let err = sublevel_measure(&g, &|x| 2.0 * x, (-1.0, 1.0), 0.01, 1, 1.0).unwrap_err();
    assert!(matches!(err, Error::DerivativeFloorViolated { .. }));
    let r = sublevel_measure(&g, &|_| 2.0, (-1.0, 1.0), 0.01, 2, 2.0).unwrap();
    let exact = 2.0 * (0.26f64.sqrt() - 0.24f64.sqrt());
    assert!((r.measure - exact).abs() < 1e-8);
    assert!(r.holds);
}

/// `g = x² − h` with `m = 2`, `d = 2`: the sublevel set is
/// `(−√(2h), √(2h))`, longer than the bound `2√h`.
#[test]
fn sublevel_bound_fails_for_a_tangent_square() {
    let h = 0.01;
    let r = sublevel_measure(&|x| x * x - h, &|_| 2.0, (-1.0, 1.0), h, 2, 2.0).unwrap();
    assert!((r.measure - 2.0 * (2.0 * h).sqrt()).abs() < 1e-8);
    assert!((r.bound - 2.0 * h.sqrt()).abs() < 1e-15);
    assert!(!r.holds);
}

fn monic(coeffs: Vec<f64>) -> impl Fn(f64) -> f64 {
    move |x| coeffs.iter().rev().fold(1.0, |v, a| v * x + a)
}

#[test]
fn random_cubics_respect_the_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..100 {
        let c: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 10f64.powf(rng.gen_range(-4.0..-1.0));
        let r = sublevel_measure(&monic(c), &|_| 6.0, (-1.0, 1.0), h, 3, 6.0).unwrap();
        assert!(r.holds, "{r:?}");
    }
}

fn dense_grid(lo: f64, hi: f64, count: usize) -> Vec<Vec<f64>> {
    (0..count).map(|i| vec![lo + (hi - lo) * (i as f64 + 0.5) / count as f64]).collect()
}

#[test]
fn matrix_screen_reduces_to_the_rotation_condition() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let grid = dense_grid(0.2, 1.2, 200_000);
    let (t, alpha, tau) = (0.1, 0.05, 1.0);
    // tkξ = 2π at ξ ≈ 1.047.
    let (k, l) = (vec![60], 1i64);
    let fraction = lemma52_matrix_screen(freq, &grid, &k, l, 0.0, &|_| 0.0, alpha, tau, t).unwrap();
    let thr = t * alpha / 61f64.powf(tau);
    let direct = grid.iter().filter(|xi| (t * 60.0 * xi[0] - TAU).abs() < thr).count() as f64 / grid.len() as f64;
    assert_eq!(fraction, direct);
    assert!(fraction > 0.0);
}

#[test]
fn matrix_screen_follows_the_bound_shape() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let freq = model.freq();
    let grid = dense_grid(0.2, 1.2, 200_000);
    let (t, tau, l_order) = (0.1, 2.0, 2.0);
    let root = 0.7;
    let frac = |k: i32, alpha: f64| {
        let theta = t * k as f64 * root;
        lemma52_matrix_screen(freq, &grid, &[k], 0, theta, &|_| 0.0, alpha, tau, t).unwrap()
    };
    // Halving α shrinks the fraction at least as fast as the envelope α^{1/L}.
    let alphas = [0.04, 0.02, 0.01, 0.005];
    let fr: Vec<f64> = alphas.iter().map(|&a| frac(1, a)).collect();
    for w in fr.windows(2) {
        assert!(w[1] / w[0] <= 0.5f64.powf(1.0 / l_order) * 1.3, "{fr:?}");
    }
    // Doubling |k̃| shrinks it at least like |k̃|^{−(τ−1)/L}.
    let ks = [1, 2, 4];
    let fk: Vec<f64> = ks.iter().map(|&k| frac(k, 0.04)).collect();
    let slope = log_log_slope(&ks.map(|k| k as f64), &fk).unwrap();
    assert!(slope <= -(tau - 1.0) / l_order + 0.3, "slope {slope}");
}

#[test]
fn matrix_screen_needs_a_fine_grid() {
    let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
    let grid = dense_grid(0.2, 1.2, 500);
    let r = lemma52_matrix_screen(model.freq(), &grid, &[1], 0, 0.0, &|_| 0.0, 0.1, 2.0, 0.1);
    assert!(matches!(r, Err(Error::GridTooCoarse { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn wilson_interval_contains_the_proportion(x in 0usize..500, extra in 0usize..500) {
        let n = x + extra + 1;
        let (lo, hi) = wilson_interval(x, n);
        let p = x as f64 / n as f64;
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
        prop_assert!(0.0 <= lo && hi <= 1.0);
    }

    #[test]
    fn screens_are_monotone_in_gamma(xi in 0.2f64..1.2, g in 0.001f64..0.1) {
        let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
        let theta = &model.elliptic().theta;
        let small = violated_families(&[xi], theta, 0.1, g, 4.0, 16);
        let large = violated_families(&[xi], theta, 0.1, 2.0 * g, 4.0, 16);
        for f in 0..4 {
            prop_assert!(!small[f] || large[f]);
        }
    }
}
