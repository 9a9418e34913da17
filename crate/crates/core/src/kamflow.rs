//! The KAM iteration at a fixed parameter `ξ`.
//!
//! The generating function is kept as one field `S = tN + tP` in local
//! coordinates around the torus `ŷ = 0, u = v̂ = 0`; the normal form is the
//! `k = 0` part `t⟨ω, ŷ⟩ + ⟨(A − I)u, v̂⟩ + ½⟨Bu, u⟩ + ½⟨Cv̂, v̂⟩` and the rest
//! of `h(ξ + ŷ)` sits in `P`. Each step removes the weight-≤2 part of `P`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{FourierField, DROP_TOL};
use crate::genfun::{self, Projection};
use crate::homological::{self, normal_form_from_angles, Components};
use crate::model::TestModel;
use crate::sympmap::PhasePoint;

/// Schedule constants and numerical knobs of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KamConfig {
    /// Diophantine exponent; `None` uses `max((n+2)(n̄+1), (n+2)L + 1) + 1`.
    pub tau: Option<f64>,
    pub nbar: u32,
    #[serde(rename = "L")]
    pub l_order: u32,
    #[serde(rename = "K0")]
    pub k0: u32,
    pub gamma: f64,
    pub s0: f64,
    /// `None` gives `s0 / 20`, so that `Σ 5ρ_v = s0 / 2`.
    pub rho0: Option<f64>,
    /// `None` gives `ε₀^{1/4}`, balancing the angle and twist parts of `P`.
    pub r0: Option<f64>,
    /// Stands in for `γ^ν̄ ρ^ν` in `η³ = ε / (γ^ν̄ ρ^ν)`.
    pub kappa: f64,
    pub eta_cap: f64,
    /// `None` keeps the model's truncation.
    pub k_max: Option<u32>,
    pub stop_eps: f64,
    pub max_steps: usize,
    /// Weighted degree kept in the generating function.
    pub degree: u32,
}

impl Default for KamConfig {
    fn default() -> Self {
        KamConfig {
            tau: None,
            nbar: 1,
            l_order: 2,
            k0: 10,
            gamma: 0.05,
            s0: 0.5,
            rho0: None,
            r0: None,
            kappa: 1e-3,
            eta_cap: 0.5,
            k_max: None,
            stop_eps: 1e-13,
            max_steps: 12,
            degree: 4,
        }
    }
}

/// `(τ, n̄, ν, ν̄, L)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    pub tau: f64,
    pub nbar: u32,
    pub nu: f64,
    pub nu_bar: f64,
    pub l_order: u32,
}

impl Constants {
    pub fn new(n: usize, cfg: &KamConfig) -> Self {
        let (n, nb, l) = (n as f64, cfg.nbar as f64, cfg.l_order as f64);
        let tau = cfg.tau.unwrap_or(((n + 2.0) * (nb + 1.0)).max((n + 2.0) * l + 1.0) + 1.0);
        Constants { tau, nbar: cfg.nbar, nu: tau * (nb + 1.0) + nb + n, nu_bar: nb + 1.0, l_order: cfg.l_order }
    }
}

/// One accepted step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub v: usize,
    pub s_v: f64,
    pub r_v: f64,
    pub rho_v: f64,
    pub gamma_v: f64,
    pub eps_v: f64,
    pub eta_v: f64,
    pub eps_next: f64,
    pub min_divisor_margin: f64,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// Weighted norm of the remainder `Q`, in the same units as `eps_v`.
    pub q_norm: f64,
    /// Largest gradient mismatch of the rebuilt generating functions.
    pub gradient_defect: f64,
}

/// Per-step change of variables: old = ψ_F(ψ_G(new)).
#[derive(Clone, Debug, PartialEq)]
pub struct StepTransform {
    pub f: FourierField,
    pub g: FourierField,
}

#[derive(Clone, Debug)]
pub struct KamState {
    pub v: usize,
    pub t: f64,
    pub xi: Vec<f64>,
    pub s: f64,
    pub r: f64,
    pub rho: f64,
    pub gamma: f64,
    /// `ε_v` in units of the initial perturbation size.
    pub eps: f64,
    pub eps_raw: f64,
    /// `ε₀ / raw ε₀`.
    pub eps_unit: f64,
    pub omega: Vec<f64>,
    pub theta: Vec<f64>,
    /// `tP` in local coordinates.
    pub perturbation: FourierField,
    pub composed_psi: Vec<StepTransform>,
    pub constants: Constants,
    pub config: KamConfig,
    pub k_max: u32,
    pub trace: Vec<StepRecord>,
    /// Initial data `(s0, ρ0, r0, γ0)` for schedule checks.
    pub initial: [f64; 4],
}

fn weighted(field: &FourierField, s: f64, r: f64, t: f64) -> Result<f64> {
    Ok(field.weighted_norm(s, r)? / t)
}

impl KamState {
    /// Starts from a generating function in local coordinates whose
    /// `k = 0` weight-≤2 part is the normal form (up to normalization).
    pub fn from_field(s_field: &FourierField, t: f64, xi: Vec<f64>, eps0: f64, cfg: &KamConfig) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidInput(format!("time step must be positive, got {t}")));
        }
        let (n, m) = (s_field.n, s_field.m);
        let k_max = cfg.k_max.unwrap_or(s_field.k_max);
        let s_field = s_field.with_k_max(k_max).cap_degree(cfg.degree);
        let comps = Components::from_field(&s_field);
        let zero = vec![0; n];
        let omega: Vec<f64> = (0..n).map(|a| comps.c100[a].get(&zero).map_or(0.0, |c| c.re) / t).collect();
        let diag = |c: &Vec<Vec<homological::Coeffs>>, j: usize| c[j][j].get(&zero).map_or(0.0, |c| c.re);
        let mut theta = Vec::with_capacity(m);
        let mut pairs = Vec::with_capacity(m);
        for j in 0..m {
            let (p, th) = homological::normalize_mode(1.0 + diag(&comps.c011, j), diag(&comps.c020, j), diag(&comps.c002, j))?;
            pairs.push(p);
            theta.push(th);
        }
        let proj = Projection { k_max, degree: cfg.degree };
        let g = homological::normalization_generator(n, m, k_max, &pairs);
        let normalized = if pairs.iter().all(|p| p.lambda == 1.0 && p.beta == 0.0) {
            s_field.clone()
        } else {
            genfun::conjugate(&s_field, &g, proj)?.field
        };
        let perturbation = strip(normalized.sub(&normal_form_from_angles(t, &omega, &theta, k_max)));
        let constants = Constants::new(n, cfg);
        let s0 = cfg.s0;
        let rho0 = cfg.rho0.unwrap_or(s0 / 20.0);
        let r0 = cfg.r0.unwrap_or(if eps0 > 0.0 { eps0.powf(0.25) } else { 1.0 });
        let gamma0 = cfg.gamma;
        let eps_raw = weighted(&perturbation, s0, r0, t)?;
        let eps_unit = if eps_raw > 0.0 { eps0 / eps_raw } else { 0.0 };
        let composed_psi = if g.is_empty() { vec![] } else { vec![StepTransform { f: FourierField::zero(n, m, k_max), g }] };
        Ok(KamState {
            v: 0,
            t,
            xi,
            s: s0,
            r: r0,
            rho: rho0,
            gamma: gamma0,
            eps: eps_raw * eps_unit,
            eps_raw,
            eps_unit,
            omega,
            theta,
            perturbation,
            composed_psi,
            constants,
            config: cfg.clone(),
            k_max,
            trace: vec![],
            initial: [s0, rho0, r0, gamma0],
        })
    }

    /// Initial state of a preset's twist map at `ξ`.
    pub fn initial(model: &TestModel, xi: &[f64], cfg: &KamConfig) -> Result<Self> {
        let h = &model.hamiltonian;
        if xi.len() != h.n() || xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("xi must have {} finite entries", h.n())));
        }
        let s_field = local_generating_field(model, xi);
        KamState::from_field(&s_field, h.t(), xi.to_vec(), h.epsilon, cfg)
    }

    pub fn n(&self) -> usize {
        self.perturbation.n
    }

    pub fn m(&self) -> usize {
        self.perturbation.m
    }

    /// `tN + tP` at the current step.
    pub fn generating_field(&self) -> FourierField {
        normal_form_from_angles(self.t, &self.omega, &self.theta, self.k_max).add(&self.perturbation)
    }

    pub fn converged(&self) -> bool {
        self.eps <= self.config.stop_eps
    }

    /// Recomputes the schedule from the initial data and the recorded `η`'s
    /// and checks it against the stored values bit for bit.
    pub fn check_schedule(&self) -> bool {
        let [s0, rho0, r0, gamma0] = self.initial;
        let (mut s, mut r) = (s0, r0);
        for (v, rec) in self.trace.iter().enumerate() {
            if rec.s_v != s || rec.r_v != r || rec.rho_v != schedule_rho(rho0, v) || rec.gamma_v != self.schedule_gamma(gamma0, v) {
                return false;
            }
            s -= 5.0 * schedule_rho(rho0, v);
            r *= rec.eta_v;
        }
        s == self.s && r == self.r && self.rho == schedule_rho(rho0, self.v) && self.gamma == self.schedule_gamma(gamma0, self.v)
    }

    fn schedule_gamma(&self, gamma0: f64, v: usize) -> f64 {
        schedule_gamma(gamma0, self.constants.nbar, self.constants.l_order, v)
    }
}

pub fn schedule_rho(rho0: f64, v: usize) -> f64 {
    rho0 / 2f64.powi(v as i32)
}

/// `γ_v = γ / 2^{(n̄+1)Lv}`.
pub fn schedule_gamma(gamma0: f64, nbar: u32, l_order: u32, v: usize) -> f64 {
    gamma0 / 2f64.powi(((nbar + 1) * l_order) as i32 * v as i32)
}

/// Drops round-off coefficients and the irrelevant constant.
pub(crate) fn strip(f: FourierField) -> FourierField {
    f.pruned(DROP_TOL).filter(|m| !(m.weight() == 0 && m.k.iter().all(|&k| k == 0)))
}

/// `tH` of a preset in local coordinates at `ξ`: the normal form plus
/// `t(h(ξ+ŷ) − h(ξ) − ⟨ω(ξ), ŷ⟩) + tP(x, ξ+ŷ, u, v̂)`.
pub fn local_generating_field(model: &TestModel, xi: &[f64]) -> FourierField {
    let h = &model.hamiltonian;
    let (m, t) = (h.m(), h.t());
    let k_max = h.perturbation.k_max;
    let omega = h.freq.omega(xi);
    let twist = h.freq.h.to_field(m, k_max, t).recenter_actions(xi).filter(|md| md.l.iter().sum::<u32>() >= 2);
    let p = h.perturbation.recenter_actions(xi).scale(t);
    normal_form_from_angles(t, &omega, &h.elliptic.theta, k_max).add(&twist).add(&p).pruned(0.0)
}

/// Final state and limit quantities of a run.
#[derive(Clone, Debug)]
pub struct KamOutcome {
    pub state: KamState,
    pub omega_inf: Vec<f64>,
    pub theta_inf: Vec<f64>,
    /// `|ω_∞ − ω₀|` (max norm).
    pub omega_drift: f64,
    pub theta_drift: f64,
    /// `Σ ε_v` over the accepted steps.
    pub eps_sum: f64,
}

/// Runs `kam_step` until `ε_v ≤ stop_eps` or `max_steps`.
pub fn iterate(mut state: KamState) -> Result<KamOutcome> {
    let omega0 = state.omega.clone();
    let theta0 = state.theta.clone();
    let mut eps_sum = 0.0;
    while !state.converged() {
        if state.v >= state.config.max_steps {
            return Err(Error::Aborted { step: state.v, source: Box::new(Error::NotConverged), trace: state.trace.clone() });
        }
        eps_sum += state.eps;
        let trace = state.trace.clone();
        let v = state.v;
        state = homological::kam_step(&state).map_err(|e| Error::Aborted { step: v, source: Box::new(e), trace })?;
    }
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    Ok(KamOutcome {
        omega_drift: diff(&state.omega, &omega0),
        theta_drift: diff(&state.theta, &theta0),
        omega_inf: state.omega.clone(),
        theta_inf: state.theta.clone(),
        eps_sum,
        state,
    })
}

/// Full iteration for a preset at `ξ`.
pub fn run_iteration(model: &TestModel, xi: &[f64], cfg: &KamConfig) -> Result<KamOutcome> {
    iterate(KamState::initial(model, xi, cfg)?)
}

/// Maps a point of the final local coordinates back to original coordinates.
pub fn pull_back(state: &KamState, local: &[f64]) -> Result<PhasePoint> {
    let (n, m) = (state.n(), state.m());
    let mut z = local.to_vec();
    for step in state.composed_psi.iter().rev() {
        z = genfun::apply_change(&step.g, &z)?;
        z = genfun::apply_change(&step.f, &z)?;
    }
    for a in 0..n {
        z[n + m + a] += state.xi[a];
    }
    Ok(PhasePoint::from_slice(&z, n, m))
}

/// Point of the invariant torus with parameter `φ`, in original coordinates.
pub fn evaluate_conjugacy(state: &KamState, phi: &[f64]) -> Result<PhasePoint> {
    if !state.converged() {
        return Err(Error::NotConverged);
    }
    let (n, m) = (state.n(), state.m());
    let mut z = vec![0.0; 2 * (n + m)];
    z[..n].copy_from_slice(phi);
    pull_back(state, &z)
}

/// Run manifest written by the command line tool.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub preset: String,
    pub xi: Vec<f64>,
    pub t: f64,
    pub epsilon: f64,
    pub config: KamConfig,
    pub constants: Constants,
    pub trace: Vec<StepRecord>,
    pub omega_0: Vec<f64>,
    pub theta_0: Vec<f64>,
    pub omega_inf: Vec<f64>,
    pub theta_inf: Vec<f64>,
    pub final_eps: f64,
    pub converged: bool,
}

impl RunManifest {
    pub fn new(model: &TestModel, xi: &[f64], outcome: &KamOutcome, omega_0: Vec<f64>, theta_0: Vec<f64>) -> Self {
        let st = &outcome.state;
        RunManifest {
            preset: model.name.clone(),
            xi: xi.to_vec(),
            t: st.t,
            epsilon: model.hamiltonian.epsilon,
            config: st.config.clone(),
            constants: st.constants,
            trace: st.trace.clone(),
            omega_0,
            theta_0,
            omega_inf: outcome.omega_inf.clone(),
            theta_inf: outcome.theta_inf.clone(),
            final_eps: st.eps,
            converged: st.converged(),
        }
    }
}

/// Step trace as JSON lines.
pub fn trace_jsonl(trace: &[StepRecord]) -> Result<String> {
    let mut out = String::new();
    for rec in trace {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::standard_test_model;

    #[test]
    fn constants_follow_the_schedule_formulas() {
        let c = Constants::new(1, &KamConfig::default());
        assert_eq!(c.tau, 8.0);
        assert_eq!(c.nu, 18.0);
        assert_eq!(c.nu_bar, 2.0);
    }

    #[test]
    fn unperturbed_state_is_converged() {
        let model = standard_test_model("twist-1-1", 0.0, 0.1).unwrap();
        let st = KamState::initial(&model, &[0.618], &KamConfig::default()).unwrap();
        assert_eq!(st.eps, 0.0);
        let out = iterate(st).unwrap();
        assert_eq!(out.omega_inf, vec![0.618]);
        let p = evaluate_conjugacy(&out.state, &[0.3]).unwrap();
        assert_eq!(p.to_vec(), vec![0.3, 0.0, 0.618, 0.0]);
    }

    #[test]
    fn local_field_reproduces_the_global_one() {
        let model = standard_test_model("twist-2-1", 1e-3, 0.1).unwrap();
        let xi = [0.6, 0.4];
        let local = local_generating_field(&model, &xi);
        let global = model.hamiltonian.generating_field();
        let (x, u, yh, v) = ([0.3, 1.1], [0.02], [0.01, -0.03], [0.05]);
        let y = [xi[0] + yh[0], xi[1] + yh[1]];
        // Agree up to the constant t·h(ξ).
        let lin = |f: &FourierField| f.eval(&x, &u, &yh, &v);
        let expect = global.eval(&x, &u, &y, &v) - 0.1 * model.hamiltonian.freq.h.eval(&xi);
        assert!((lin(&local) - expect).abs() < 1e-14);
    }
}
