//! Independent checks of converged tori: rotation vectors from orbits,
//! invariance residuals, scheme-versus-flow defects, step-size comparisons
//! of the scheme pipeline and survival tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genfun::{self, Projection};
use crate::kamflow::{self, evaluate_conjugacy, iterate, Constants, KamConfig, KamOutcome, KamState};
use crate::model::{standard_test_model_with_kmax, TestModel};
use crate::resonance::{log_log_slope, screen_small_divisors, ScreenParams};
use crate::sympmap::{orbit, GeneratingMap, HamiltonianFlow};

/// Weighted Birkhoff estimate of a rotation vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RotationEstimate {
    pub rotation: Vec<f64>,
    /// Difference between the estimates from the two halves of the orbit.
    pub error: f64,
}

fn bump(s: f64) -> f64 {
    if s <= 0.0 || s >= 1.0 {
        0.0
    } else {
        (-1.0 / (s * (1.0 - s))).exp()
    }
}

fn birkhoff(lifted: &[Vec<f64>]) -> Vec<f64> {
    let steps = lifted.len() - 1;
    let n = lifted[0].len();
    let mut acc = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..steps {
        let w = bump((i as f64 + 0.5) / steps as f64);
        total += w;
        for a in 0..n {
            acc[a] += w * (lifted[i + 1][a] - lifted[i][a]);
        }
    }
    acc.iter().map(|v| v / total).collect()
}

/// Rotation per iterate of an orbit given by its lifted angles.
pub fn rotation_vector(lifted: &[Vec<f64>]) -> Result<RotationEstimate> {
    if lifted.len() < 1000 {
        return Err(Error::InvalidInput(format!("orbit needs at least 1000 points, got {}", lifted.len())));
    }
    if lifted.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("orbit angles"));
    }
    let rotation = birkhoff(lifted);
    let half = lifted.len() / 2;
    let a = birkhoff(&lifted[..=half]);
    let b = birkhoff(&lifted[half..]);
    let error = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(RotationEstimate { rotation, error })
}

/// Torus samples `φ`: a regular grid for `n = 1`, a Kronecker sequence
/// otherwise.
pub fn torus_samples(n: usize, count: usize) -> Vec<Vec<f64>> {
    let tau = std::f64::consts::TAU;
    let alphas: Vec<f64> = [2f64, 3.0, 5.0, 7.0, 11.0].iter().map(|p| p.sqrt().fract()).collect();
    (0..count)
        .map(|i| {
            if n == 1 {
                vec![tau * i as f64 / count as f64]
            } else {
                (0..n).map(|a| tau * ((i as f64 + 0.5) * alphas[a % alphas.len()]).fract()).collect()
            }
        })
        .collect()
}

/// `max_φ |F(Ψ(φ)) − Ψ(φ + ρ)|` with `ρ = tω_∞` unless overridden.
pub fn invariance_residual(state: &KamState, map: &GeneratingMap, n_phi: usize, rotation: Option<&[f64]>) -> Result<f64> {
    let rho: Vec<f64> = match rotation {
        Some(r) => r.to_vec(),
        None => state.omega.iter().map(|w| state.t * w).collect(),
    };
    let res: Vec<Result<f64>> = torus_samples(state.n(), n_phi)
        .par_iter()
        .map(|phi| {
            let z = evaluate_conjugacy(state, phi)?;
            let (fz, _) = map.apply_lifted(&z)?;
            let shifted: Vec<f64> = phi.iter().zip(&rho).map(|(p, r)| p + r).collect();
            let target = evaluate_conjugacy(state, &shifted)?;
            Ok(fz.distance(&target))
        })
        .collect();
    res.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?)))
}

/// Lifted-angle orbit of the twist map started on the torus at `φ = 0`.
pub fn torus_orbit(state: &KamState, map: &GeneratingMap, steps: usize) -> Result<Vec<Vec<f64>>> {
    let z0 = evaluate_conjugacy(state, &vec![0.0; state.n()])?;
    Ok(orbit(|z| map.apply_lifted(z), &z0, steps)?.1)
}

/// Initial state of the implicit-midpoint scheme of a preset at `ξ` with
/// step `t`: the scheme's generating function is rebuilt on the angle grid.
pub fn scheme_state(model: &TestModel, xi: &[f64], t: f64, cfg: &KamConfig) -> Result<KamState> {
    let sm = &model.scheme;
    let h = sm.hamiltonian_field().recenter_actions(xi);
    let proj = Projection { k_max: cfg.k_max.unwrap_or(h.k_max), degree: cfg.degree };
    let (s, _) = genfun::midpoint_generating_field(&h, t, proj)?;
    KamState::from_field(&s, t, xi.to_vec(), sm.epsilon, cfg)
}

/// Full pipeline on the scheme.
pub fn scheme_run(model: &TestModel, xi: &[f64], t: f64, cfg: &KamConfig) -> Result<KamOutcome> {
    iterate(scheme_state(model, xi, t, cfg)?)
}

/// Differences between the scheme pipelines at two step sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStepComparison {
    pub t1: f64,
    pub t2: f64,
    pub omega_1: Vec<f64>,
    pub omega_2: Vec<f64>,
    pub omega_diff: f64,
    /// `max_φ |Ψ_{t₁}(φ) − Ψ_{t₂}(φ)|`; reported only.
    pub psi_diff: f64,
    /// `|ω diff| / |t₁^{s/2} − t₂^{s/2}|`.
    pub ratio: Option<f64>,
}

const SCHEME_ORDER: f64 = 2.0;

fn scheme_labeled(model: &TestModel, xi: &[f64], t: f64, cfg: &KamConfig) -> Result<KamOutcome> {
    scheme_run(model, xi, t, cfg).map_err(|e| Error::Pipeline { label: format!("scheme at t = {t}"), source: Box::new(e) })
}

fn compare(a: &KamOutcome, b: &KamOutcome, t1: f64, t2: f64) -> Result<TwoStepComparison> {
    let omega_diff = a.omega_inf.iter().zip(&b.omega_inf).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let mut psi_diff: f64 = 0.0;
    for phi in torus_samples(a.state.n(), 16) {
        psi_diff = psi_diff.max(evaluate_conjugacy(&a.state, &phi)?.distance(&evaluate_conjugacy(&b.state, &phi)?));
    }
    let scale = step_scale(t1, t2);
    Ok(TwoStepComparison {
        t1,
        t2,
        omega_1: a.omega_inf.clone(),
        omega_2: b.omega_inf.clone(),
        omega_diff,
        psi_diff,
        ratio: (scale > 0.0).then(|| omega_diff / scale),
    })
}

fn step_scale(t1: f64, t2: f64) -> f64 {
    (t1.powf(SCHEME_ORDER / 2.0) - t2.powf(SCHEME_ORDER / 2.0)).abs()
}

pub fn scheme_two_step_compare(model: &TestModel, xi: &[f64], t1: f64, t2: f64, cfg: &KamConfig) -> Result<TwoStepComparison> {
    let a = scheme_labeled(model, xi, t1, cfg)?;
    let b = if t1 == t2 { a.clone() } else { scheme_labeled(model, xi, t2, cfg)? };
    compare(&a, &b, t1, t2)
}

/// Comparisons between consecutive entries of a step-size ladder and the
/// fitted exponent of `|ω diff|` against `t₁^{s/2} − t₂^{s/2}`.
pub fn scheme_ladder(model: &TestModel, xi: &[f64], ts: &[f64], cfg: &KamConfig) -> Result<(Vec<TwoStepComparison>, Option<f64>)> {
    let runs: Vec<KamOutcome> = ts.iter().map(|&t| scheme_labeled(model, xi, t, cfg)).collect::<Result<_>>()?;
    let out: Vec<TwoStepComparison> =
        (1..ts.len()).map(|w| compare(&runs[w - 1], &runs[w], ts[w - 1], ts[w])).collect::<Result<_>>()?;
    let xs: Vec<f64> = out.iter().map(|c| step_scale(c.t1, c.t2)).collect();
    let ys: Vec<f64> = out.iter().map(|c| c.omega_diff).collect();
    Ok((out, log_log_slope(&xs, &ys)))
}

/// One-step defects of the implicit midpoint rule against a high-order
/// reference flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefectFit {
    pub ts: Vec<f64>,
    pub defects: Vec<f64>,
    pub exponent: Option<f64>,
}

pub fn midpoint_defect(model: &TestModel, ts: &[f64], points: usize, seed: u64) -> Result<DefectFit> {
    let flow = HamiltonianFlow::from_scheme(&model.scheme);
    let (n, m) = (model.scheme.n(), model.scheme.m());
    let dom = &model.scheme.freq.domain;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Vec<f64>> = (0..points)
        .map(|_| {
            let mut z = Vec::with_capacity(2 * (n + m));
            z.extend((0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)));
            z.extend((0..m).map(|_| rng.gen_range(-0.1..0.1)));
            z.extend(dom.sample(&mut rng));
            z.extend((0..m).map(|_| rng.gen_range(-0.1..0.1)));
            z
        })
        .collect();
    let mut defects = Vec::with_capacity(ts.len());
    for &t in ts {
        let mut d: f64 = 0.0;
        for z in &zs {
            let (mid, _) = flow.midpoint_step(z, t)?;
            let exact = flow.reference_flow(z, t, 8)?;
            d = d.max(mid.iter().zip(&exact).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        }
        defects.push(d);
    }
    Ok(DefectFit { ts: ts.to_vec(), exponent: log_log_slope(ts, &defects), defects })
}

/// Settings of a survival sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurvivalConfig {
    pub preset: String,
    pub eps_grid: Vec<f64>,
    pub t_grid: Vec<f64>,
    pub gamma: f64,
    pub samples: usize,
    pub seed: u64,
    pub residual_tol: f64,
    pub n_phi: usize,
    pub kam: KamConfig,
}

impl Default for SurvivalConfig {
    fn default() -> Self {
        SurvivalConfig {
            preset: "twist-1-1".into(),
            eps_grid: vec![0.0, 1e-7, 1e-6, 1e-5, 1e-4],
            t_grid: vec![0.1],
            gamma: 0.05,
            samples: 16,
            seed: 42,
            residual_tol: 1e-8,
            n_phi: 32,
            kam: KamConfig::default(),
        }
    }
}

/// Fractions of the `ξ` samples in one `(ε, t)` cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurvivalRow {
    pub eps: f64,
    pub t: f64,
    pub screen_pass: f64,
    pub converged: f64,
    pub residual_ok: f64,
    /// Fraction passing all three checks.
    pub fraction: f64,
}

/// Outcome for one parameter sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct SampleOutcome {
    screened: bool,
    converged: bool,
    residual_ok: bool,
}

fn survival_sample(model: &TestModel, xi: &[f64], cfg: &SurvivalConfig, k_max: u32) -> SampleOutcome {
    let freq = model.freq();
    let t = model.hamiltonian.t();
    let tau = Constants::new(freq.n(), &cfg.kam).tau;
    let max_b = model.twist_b.iter().fold(0.0f64, |m, b| m.max(b.abs()));
    let params = ScreenParams::with_windows(t, cfg.gamma, tau, k_max, freq.sup_omega(), 1.0, max_b);
    let report = screen_small_divisors(&freq.omega(xi), &model.elliptic().theta, xi, &params);
    let mut out = SampleOutcome { screened: report.passed, ..Default::default() };
    if !out.screened {
        return out;
    }
    let kam = KamConfig { gamma: cfg.gamma, ..cfg.kam.clone() };
    let Ok(outcome) = kamflow::run_iteration(model, xi, &kam) else { return out };
    out.converged = true;
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    out.residual_ok = invariance_residual(&outcome.state, &map, cfg.n_phi, None).is_ok_and(|r| r <= cfg.residual_tol);
    out
}

/// Survival table over the `(ε, t)` grid. The same `ξ` samples are used in
/// every cell.
pub fn survival_sweep(cfg: &SurvivalConfig) -> Result<Vec<SurvivalRow>> {
    if cfg.eps_grid.is_empty() || cfg.t_grid.is_empty() || cfg.samples == 0 {
        return Err(Error::InvalidInput("survival sweep needs nonempty grids and samples".into()));
    }
    let probe = standard_test_model_with_kmax(&cfg.preset, 0.0, cfg.t_grid[0], cfg.kam.k_max.unwrap_or(32))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let xis: Vec<Vec<f64>> = (0..cfg.samples).map(|_| probe.freq().domain.sample(&mut rng)).collect();
    let mut rows = Vec::new();
    for &t in &cfg.t_grid {
        for &eps in &cfg.eps_grid {
            let model = standard_test_model_with_kmax(&cfg.preset, eps, t, cfg.kam.k_max.unwrap_or(32))?;
            let k_max = model.hamiltonian.perturbation.k_max;
            let outcomes: Vec<SampleOutcome> = xis.par_iter().map(|xi| survival_sample(&model, xi, cfg, k_max)).collect();
            let frac = |f: fn(&SampleOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / outcomes.len() as f64;
            rows.push(SurvivalRow {
                eps,
                t,
                screen_pass: frac(|o| o.screened),
                converged: frac(|o| o.converged),
                residual_ok: frac(|o| o.residual_ok),
                fraction: frac(|o| o.screened && o.converged && o.residual_ok),
            });
        }
    }
    Ok(rows)
}

pub fn survival_csv(rows: &[SurvivalRow]) -> String {
    let mut out = String::from("eps,t,screen_pass,converged,residual_ok,fraction\n");
    for r in rows {
        out.push_str(&format!("{:e},{},{},{},{},{}\n", r.eps, r.t, r.screen_pass, r.converged, r.residual_ok, r.fraction));
    }
    out
}
