//! Python bindings: presets, the twist map and scheme, the KAM iteration and
//! torus checks, and the measure and survival sweeps.

use kamtori::kamflow::{run_iteration, KamConfig, KamOutcome, RunManifest};
use kamtori::model::standard_test_model_with_kmax;
use kamtori::resonance::{excluded_measure as measure_estimate, MeasureParams};
use kamtori::sympmap::{symplecticity_defect, GeneratingMap, HamiltonianFlow, PhasePoint};
use kamtori::verify::{invariance_residual, rotation_vector as birkhoff_rotation, survival_csv, survival_sweep as sweep, torus_orbit, SurvivalConfig};
use kamtori::{Error, TestModel};
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(kamtori_py, KamFailure, PyRuntimeError, "Screen or convergence failure.");

fn to_py(e: Error) -> PyErr {
    if e.is_dynamical() {
        KamFailure::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn parse_config<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("config: {e}"))),
        None => Ok(T::default()),
    }
}

type Point = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

fn unpack(p: PhasePoint) -> Point {
    (p.x, p.u, p.y, p.v)
}

/// One of the named test models at perturbation size `eps` and step `t`.
#[pyclass(name = "TestModel", frozen)]
struct PyTestModel {
    inner: TestModel,
}

#[pymethods]
impl PyTestModel {
    #[new]
    #[pyo3(signature = (preset, eps, t, k_max = 32))]
    fn new(preset: &str, eps: f64, t: f64, k_max: u32) -> PyResult<Self> {
        Ok(PyTestModel { inner: standard_test_model_with_kmax(preset, eps, t, k_max).map_err(to_py)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.hamiltonian.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.hamiltonian.m()
    }

    #[getter]
    fn t(&self) -> f64 {
        self.inner.hamiltonian.t()
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.inner.hamiltonian.epsilon
    }

    #[getter]
    fn default_xi(&self) -> Vec<f64> {
        self.inner.default_xi.clone()
    }

    #[getter]
    fn twist_b(&self) -> Vec<f64> {
        self.inner.twist_b.clone()
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.inner.elliptic().theta.clone()
    }

    fn omega(&self, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        if xi.len() != self.n() {
            return Err(PyValueError::new_err(format!("xi must have {} entries", self.n())));
        }
        Ok(self.inner.freq().omega(&xi))
    }

    /// One step of the twist map on the lifted angles.
    fn apply_map(&self, x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> PyResult<Point> {
        let z = self.point(x, u, y, v)?;
        let map = GeneratingMap::from_hamiltonian(&self.inner.hamiltonian);
        Ok(unpack(map.apply_lifted(&z).map_err(to_py)?.0))
    }

    /// One implicit-midpoint step of the scheme model.
    fn scheme_step(&self, x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>, t: f64) -> PyResult<Point> {
        let z = self.point(x, u, y, v)?;
        let flow = HamiltonianFlow::from_scheme(&self.inner.scheme);
        let (w, _) = flow.midpoint_step(&z.to_vec(), t).map_err(to_py)?;
        Ok(unpack(PhasePoint::from_slice(&w, self.n(), self.m())))
    }

    /// `‖JᵀΩJ − Ω‖∞` of the twist map's Jacobian at a point.
    fn symplecticity_defect(&self, x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
        let z = self.point(x, u, y, v)?;
        let map = GeneratingMap::from_hamiltonian(&self.inner.hamiltonian);
        Ok(symplecticity_defect(&map.jacobian(&z).map_err(to_py)?, self.n(), self.m()))
    }

    /// Runs the KAM iteration; `config` is a JSON object of iteration keys.
    #[pyo3(signature = (xi = None, config = None))]
    fn kam_run(&self, xi: Option<Vec<f64>>, config: Option<&str>) -> PyResult<PyKamRun> {
        let cfg: KamConfig = parse_config(config)?;
        let xi = xi.unwrap_or_else(|| self.inner.default_xi.clone());
        let outcome = run_iteration(&self.inner, &xi, &cfg).map_err(to_py)?;
        Ok(PyKamRun { model: self.inner.clone(), xi, outcome })
    }
}

impl PyTestModel {
    fn point(&self, x: Vec<f64>, u: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> PyResult<PhasePoint> {
        let (n, m) = (self.n(), self.m());
        if x.len() != n || y.len() != n || u.len() != m || v.len() != m {
            return Err(PyValueError::new_err(format!("point needs x, y of length {n} and u, v of length {m}")));
        }
        Ok(PhasePoint::new(x, u, y, v))
    }
}

/// A converged KAM run.
#[pyclass(name = "KamRun", frozen)]
struct PyKamRun {
    model: TestModel,
    xi: Vec<f64>,
    outcome: KamOutcome,
}

#[pymethods]
impl PyKamRun {
    #[getter]
    fn xi(&self) -> Vec<f64> {
        self.xi.clone()
    }

    #[getter]
    fn omega_inf(&self) -> Vec<f64> {
        self.outcome.omega_inf.clone()
    }

    #[getter]
    fn theta_inf(&self) -> Vec<f64> {
        self.outcome.theta_inf.clone()
    }

    #[getter]
    fn omega_drift(&self) -> f64 {
        self.outcome.omega_drift
    }

    #[getter]
    fn steps(&self) -> usize {
        self.outcome.state.trace.len()
    }

    /// `ε_v` before each step followed by the final value.
    #[getter]
    fn eps_trace(&self) -> Vec<f64> {
        let trace = &self.outcome.state.trace;
        let mut out: Vec<f64> = trace.iter().map(|r| r.eps_v).collect();
        out.push(self.outcome.state.eps);
        out
    }

    #[getter]
    fn converged(&self) -> bool {
        self.outcome.state.converged()
    }

    #[pyo3(signature = (n_phi = 64, rotation = None))]
    fn invariance_residual(&self, n_phi: usize, rotation: Option<Vec<f64>>) -> PyResult<f64> {
        let map = GeneratingMap::from_hamiltonian(&self.model.hamiltonian);
        invariance_residual(&self.outcome.state, &map, n_phi, rotation.as_deref()).map_err(to_py)
    }

    /// Weighted Birkhoff rotation estimate along an orbit on the torus.
    #[pyo3(signature = (steps = 20000))]
    fn rotation(&self, steps: usize) -> PyResult<(Vec<f64>, f64)> {
        let map = GeneratingMap::from_hamiltonian(&self.model.hamiltonian);
        let est = birkhoff_rotation(&torus_orbit(&self.outcome.state, &map, steps).map_err(to_py)?).map_err(to_py)?;
        Ok((est.rotation, est.error))
    }

    fn manifest_json(&self) -> PyResult<String> {
        let omega0 = self.model.freq().omega(&self.xi);
        let theta0 = self.model.elliptic().theta.clone();
        let manifest = RunManifest::new(&self.model, &self.xi, &self.outcome, omega0, theta0);
        serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

#[pyfunction]
fn rotation_vector(lifted: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, f64)> {
    let est = birkhoff_rotation(&lifted).map_err(to_py)?;
    Ok((est.rotation, est.error))
}

/// Excluded parameter measure at one `γ`, as a dict.
#[pyfunction]
#[pyo3(signature = (preset, t, gamma, grid_res = 2048, tau = 8.0, k_max = 32, mc_samples = 2000, seed = 42))]
#[allow(clippy::too_many_arguments)]
fn excluded_measure<'py>(
    py: Python<'py>,
    preset: &str,
    t: f64,
    gamma: f64,
    grid_res: usize,
    tau: f64,
    k_max: u32,
    mc_samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let model = standard_test_model_with_kmax(preset, 0.0, t, k_max).map_err(to_py)?;
    let freq = model.freq();
    let p = MeasureParams { t, tau, k_max, grid_res, mc_samples, seed };
    let est = py.detach(|| measure_estimate(freq, &freq.domain, &model.elliptic().theta, gamma, &p)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("gamma", est.gamma)?;
    d.set_item("measure", est.measure)?;
    d.set_item("breakdown", est.breakdown.to_vec())?;
    d.set_item("mc_measure", est.mc_measure)?;
    d.set_item("ci", (est.ci_low, est.ci_high))?;
    Ok(d)
}

/// Survival table as CSV; `config` is a JSON object of sweep keys.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn survival_sweep(py: Python<'_>, config: Option<&str>) -> PyResult<String> {
    let cfg: SurvivalConfig = parse_config(config)?;
    let rows = py.detach(|| sweep(&cfg)).map_err(to_py)?;
    Ok(survival_csv(&rows))
}

#[pymodule]
fn kamtori_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTestModel>()?;
    m.add_class::<PyKamRun>()?;
    m.add_function(wrap_pyfunction!(rotation_vector, m)?)?;
    m.add_function(wrap_pyfunction!(excluded_measure, m)?)?;
    m.add_function(wrap_pyfunction!(survival_sweep, m)?)?;
    m.add("KamFailure", m.py().get_type::<KamFailure>())?;
    m.add("PRESETS", kamtori::model::PRESETS.to_vec())?;
    Ok(())
}
