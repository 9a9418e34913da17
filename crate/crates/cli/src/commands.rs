use std::fs;
use std::path::{Path, PathBuf};

use kamtori::kamflow::{run_iteration, trace_jsonl, Constants, KamConfig, RunManifest};
use kamtori::model::standard_test_model_with_kmax;
use kamtori::resonance::{measure_csv, measure_sweep, screen_small_divisors, MeasureParams, ScreenParams};
use kamtori::sympmap::{orbit, write_orbit_csv, GeneratingMap, HamiltonianFlow, PhasePoint};
use kamtori::verify::{
    invariance_residual, midpoint_defect, rotation_vector, scheme_ladder, survival_csv, survival_sweep, torus_orbit,
    SurvivalConfig,
};
use kamtori::{Error, TestModel};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, UsageError};

/// Why a command did not succeed.
#[derive(Debug)]
pub enum Failure {
    Usage(UsageError),
    /// Screen or convergence failure, with machine-readable details.
    Dynamical { message: String, details: serde_json::Value },
    Internal(String),
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Internal(e.to_string())
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_dynamical() {
            let details = match &e {
                Error::Aborted { step, source, .. } => json!({ "step": step, "cause": source.to_string() }),
                other => json!({ "cause": other.to_string() }),
            };
            Failure::Dynamical { message: e.to_string(), details }
        } else {
            match e {
                Error::UnknownPreset(p) => Failure::Usage(UsageError::new("preset", format!("unknown preset `{p}`"))),
                Error::InvalidInput(m) => Failure::Usage(UsageError::new(guess_key(&m), m)),
                Error::GridTooCoarse { .. } => Failure::Usage(UsageError::new("measure.grid_res", e.to_string())),
                other => Failure::Internal(other.to_string()),
            }
        }
    }
}

fn guess_key(message: &str) -> &'static str {
    if message.starts_with("xi") {
        "xi"
    } else if message.contains("epsilon") {
        "eps"
    } else {
        "config"
    }
}

pub struct Run<'a> {
    pub cfg: &'a RunConfig,
    pub dir: &'a Path,
    pub files: Vec<String>,
}

impl Run<'_> {
    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
        fs::write(self.dir.join(name), contents)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Internal(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    fn model(&self, eps: f64, t: f64) -> Result<TestModel, Failure> {
        Ok(standard_test_model_with_kmax(&self.cfg.preset, eps, t, self.cfg.kam.k_max.unwrap_or(32))?)
    }

    fn xi(&self, model: &TestModel) -> Result<Vec<f64>, Failure> {
        let xi = self.cfg.xi.clone().unwrap_or_else(|| model.default_xi.clone());
        if xi.len() != model.freq().n() {
            return Err(UsageError::new("xi", format!("need {} entries for preset {}", model.freq().n(), model.name)).into());
        }
        Ok(xi)
    }
}

pub fn iterate_map(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let model = run.model(c.eps, c.t)?;
    let xi = run.xi(&model)?;
    let (n, m) = (model.freq().n(), model.elliptic().m());
    let z0 = PhasePoint::new(vec![0.0; n], vec![c.orbit.u0; m], xi, vec![c.orbit.v0; m]);
    let (pts, lifted) = if c.orbit.map == "twist" {
        let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
        orbit(|z| map.apply_lifted(z), &z0, c.orbit.steps)?
    } else {
        let flow = HamiltonianFlow::from_scheme(&model.scheme);
        orbit(
            |z| flow.midpoint_step(&z.to_vec(), c.t).map(|(w, rep)| (PhasePoint::from_slice(&w, n, m), rep)),
            &z0,
            c.orbit.steps,
        )?
    };
    let mut csv = Vec::new();
    write_orbit_csv(&mut csv, &pts, &lifted)?;
    run.write("orbit.csv", csv)?;
    if lifted.len() >= 1000 {
        let est = rotation_vector(&lifted)?;
        run.write_json("rotation.json", &est)?;
    }
    Ok(())
}

fn write_trace_on_abort(run: &mut Run, err: &Error) -> Result<(), Failure> {
    if let Error::Aborted { trace, .. } = err {
        run.write("trace.jsonl", trace_jsonl(trace)?)?;
    }
    Ok(())
}

pub fn kam_run(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let model = run.model(c.eps, c.t)?;
    let xi = run.xi(&model)?;
    let out = match run_iteration(&model, &xi, &c.kam) {
        Ok(o) => o,
        Err(e) => {
            write_trace_on_abort(run, &e)?;
            return Err(e.into());
        }
    };
    let manifest = RunManifest::new(&model, &xi, &out, model.freq().omega(&xi), model.elliptic().theta.clone());
    run.write("trace.jsonl", trace_jsonl(&manifest.trace)?)?;
    run.write_json("manifest.json", &manifest)?;
    Ok(())
}

fn screen_params(model: &TestModel, kam: &KamConfig, gamma: f64) -> ScreenParams {
    let freq = model.freq();
    let tau = Constants::new(freq.n(), kam).tau;
    let max_b = model.twist_b.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    ScreenParams::with_windows(model.hamiltonian.t(), gamma, tau, model.hamiltonian.perturbation.k_max, freq.sup_omega(), 1.0, max_b)
}

pub fn verify_torus(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let model = run.model(c.eps, c.t)?;
    let xi = run.xi(&model)?;
    let report = screen_small_divisors(&model.freq().omega(&xi), &model.elliptic().theta, &xi, &screen_params(&model, &c.kam, c.kam.gamma));
    run.write_json("screen.json", &report)?;
    if !report.passed {
        return Err(Failure::Dynamical {
            message: format!("resonance screen failed with {} violations", report.violations.len()),
            details: json!({ "min_margin": report.min_margin, "violations": report.violations.len() }),
        });
    }
    let out = match run_iteration(&model, &xi, &c.kam) {
        Ok(o) => o,
        Err(e) => {
            write_trace_on_abort(run, &e)?;
            return Err(e.into());
        }
    };
    let map = GeneratingMap::from_hamiltonian(&model.hamiltonian);
    let residual = invariance_residual(&out.state, &map, c.verify.n_phi, None)?;
    let est = rotation_vector(&torus_orbit(&out.state, &map, c.verify.orbit_steps)?)?;
    let expected: Vec<f64> = out.omega_inf.iter().map(|w| c.t * w).collect();
    let residual_ok = residual <= c.verify.residual_tol;
    run.write_json(
        "verify.json",
        &json!({
            "xi": xi,
            "omega_inf": out.omega_inf,
            "residual": residual,
            "residual_tol": c.verify.residual_tol,
            "residual_ok": residual_ok,
            "rotation": est.rotation,
            "rotation_error": est.error,
            "expected_rotation": expected,
        }),
    )?;
    if !residual_ok {
        return Err(Failure::Dynamical {
            message: format!("invariance residual {residual:e} exceeds {:e}", c.verify.residual_tol),
            details: json!({ "residual": residual }),
        });
    }
    Ok(())
}

pub fn measure(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let model = run.model(0.0, c.t)?;
    let freq = model.freq();
    let m = &c.measure;
    let p = MeasureParams {
        t: c.t,
        tau: m.tau.unwrap_or_else(|| Constants::new(freq.n(), &c.kam).tau),
        k_max: model.hamiltonian.perturbation.k_max,
        grid_res: m.grid_res,
        mc_samples: m.mc_samples,
        seed: c.seed,
    };
    let gammas: Vec<f64> =
        (0..m.points).map(|i| m.gamma_min * (m.gamma_max / m.gamma_min).powf(i as f64 / (m.points - 1) as f64)).collect();
    let (rows, estimates) = measure_sweep(freq, &freq.domain, &model.elliptic().theta, &gammas, &p)?;
    run.write("measure.csv", measure_csv(&rows))?;
    run.write_json("measure.json", &json!({ "params": p, "estimates": estimates }))?;
    Ok(())
}

pub fn scheme_compare(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let model = run.model(c.eps, c.t)?;
    let xi = run.xi(&model)?;
    let fit = midpoint_defect(&model, &c.scheme.ts, c.scheme.defect_points, c.seed)?;
    let (cmp, exponent) = scheme_ladder(&model, &xi, &c.scheme.ts, &c.kam)?;
    let mut csv = String::from("t1,t2,omega_diff,psi_diff,ratio\n");
    for r in &cmp {
        let ratio = r.ratio.map(|v| format!("{v:e}")).unwrap_or_default();
        csv.push_str(&format!("{},{},{:e},{:e},{ratio}\n", r.t1, r.t2, r.omega_diff, r.psi_diff));
    }
    run.write("scheme.csv", csv)?;
    run.write_json("scheme.json", &json!({ "defect": fit, "comparisons": cmp, "omega_diff_exponent": exponent }))?;
    Ok(())
}

pub fn survival(run: &mut Run) -> Result<(), Failure> {
    let c = run.cfg;
    let s = &c.survival;
    let cfg = SurvivalConfig {
        preset: c.preset.clone(),
        eps_grid: s.eps_grid.clone(),
        t_grid: s.t_grid.clone(),
        gamma: s.gamma,
        samples: s.samples,
        seed: c.seed,
        residual_tol: s.residual_tol,
        n_phi: s.n_phi,
        kam: c.kam.clone(),
    };
    let rows = survival_sweep(&cfg)?;
    run.write("survival.csv", survival_csv(&rows))?;
    run.write_json("survival.json", &rows)?;
    Ok(())
}

pub fn run_dir(out: &Path, command: &str, hash: &str) -> PathBuf {
    out.join(format!("{command}-{}", &hash[..16]))
}
