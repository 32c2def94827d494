use std::sync::Arc;

use distobs_core::harness::export::trace_csv_string;
use distobs_core::harness::{
    self, generate_scenario, AnalysisOptions, Scenario, ScenarioConfig, SimTrace, Summary,
};
use distobs_core::solvers::solve_centralized;
use distobs_core::{Error, SolverKind};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyTypeError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};

create_exception!(distobs, DistobsError, PyException);

fn err(e: Error) -> PyErr {
    DistobsError::new_err(e.to_string())
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn to_toml_value(obj: &Bound<'_, PyAny>) -> PyResult<toml::Value> {
    if obj.is_instance_of::<PyBool>() {
        Ok(toml::Value::Boolean(obj.extract()?))
    } else if obj.is_instance_of::<PyInt>() {
        Ok(toml::Value::Integer(obj.extract()?))
    } else if obj.is_instance_of::<PyFloat>() {
        Ok(toml::Value::Float(obj.extract()?))
    } else if obj.is_instance_of::<PyString>() {
        Ok(toml::Value::String(obj.extract()?))
    } else if let Ok(list) = obj.try_iter() {
        Ok(toml::Value::Array(
            list.map(|x| to_toml_value(&x?)).collect::<PyResult<_>>()?,
        ))
    } else {
        Err(PyTypeError::new_err(format!(
            "unsupported config value {}",
            obj.repr()?
        )))
    }
}

fn apply_kwargs(mut cfg: ScenarioConfig, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<ScenarioConfig> {
    if let Some(kw) = kwargs {
        for (k, v) in kw.iter() {
            let name: String = k.extract()?;
            let value = to_toml_value(&v)?.to_string();
            cfg = harness::with_param(&cfg, &name, &value).map_err(err)?;
        }
    }
    Ok(cfg)
}

/// Scenario configuration. Keyword arguments override the defaults.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            inner: apply_kwargs(ScenarioConfig::default(), kwargs)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ScenarioConfig::from_toml_str(text).map_err(err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    /// A copy with some keys replaced.
    #[pyo3(signature = (**kwargs))]
    fn replace(&self, kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            inner: apply_kwargs(self.inner.clone(), kwargs)?,
        })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &serde_json::to_string(&self.inner).expect("config is serializable"))
    }

    #[getter]
    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn solver(&self) -> &'static str {
        self.inner.solver.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(n_agents={}, solver='{}', seed={}, steps={})",
            self.inner.n_agents,
            self.inner.solver.name(),
            self.inner.seed,
            self.inner.steps
        )
    }
}

/// Generated graph, anchors and initial conditions of a config.
#[pyclass(name = "Scenario", unsendable)]
struct PyScenario {
    inner: Arc<Scenario>,
}

#[pymethods]
impl PyScenario {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(Self {
            inner: Arc::new(generate_scenario(&config.inner).map_err(err)?),
        })
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.topology().n_agents()
    }

    #[getter]
    fn anchors(&self) -> Vec<usize> {
        self.inner.topology().anchors().collect()
    }

    #[getter]
    fn sensing_edges(&self) -> Vec<(usize, usize)> {
        self.inner.topology().sensing_edges().to_vec()
    }

    #[getter]
    fn comm_edges(&self) -> Vec<(usize, usize)> {
        self.inner.topology().comm_edges().to_vec()
    }

    #[getter]
    fn positions(&self) -> Vec<[f64; 2]> {
        self.inner.positions.clone()
    }

    #[getter]
    fn x0(&self) -> Vec<f64> {
        self.inner.x0.as_slice().to_vec()
    }

    #[getter]
    fn xhat0(&self) -> Vec<f64> {
        self.inner.xhat0.as_slice().to_vec()
    }

    #[getter]
    fn observable_window(&self) -> usize {
        self.inner.observable_window
    }

    #[getter]
    fn attempts(&self) -> usize {
        self.inner.attempts
    }

    /// Assumption bounds over `horizon` steps, as a dict.
    fn verify_assumptions(&self, py: Python<'_>, horizon: usize) -> PyResult<Py<PyAny>> {
        let rep = self
            .inner
            .model
            .verify_assumptions(horizon, self.inner.observable_window)
            .map_err(err)?;
        json_to_py(py, &serde_json::to_string(&rep).expect("report is serializable"))
    }

    /// Runs the scenario with `solver`, or the configured one.
    #[pyo3(signature = (solver=None))]
    fn run(&self, solver: Option<&str>) -> PyResult<PyTrace> {
        let kind = match solver {
            Some(s) => s.parse::<SolverKind>().map_err(err)?,
            None => self.inner.config.solver,
        };
        let trace = harness::run_scenario(self.inner.clone(), kind, self.inner.config.solver_params())
            .map_err(err)?;
        Ok(PyTrace { inner: trace })
    }
}

/// Per-step metrics of a finished run.
#[pyclass(name = "Trace")]
struct PyTrace {
    inner: SimTrace,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn solver(&self) -> &'static str {
        self.inner.solver.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    #[getter]
    fn k(&self) -> Vec<usize> {
        self.inner.rows.iter().map(|r| r.k).collect()
    }

    #[getter]
    fn err_state_norm(&self) -> Vec<f64> {
        self.inner.column(|r| r.err_state_norm)
    }

    #[getter]
    fn err_corr_norm(&self) -> Vec<f64> {
        self.inner.column(|r| r.err_corr_norm)
    }

    #[getter]
    fn lyapunov_v(&self) -> Vec<f64> {
        self.inner.column(|r| r.lyapunov_v)
    }

    #[getter]
    fn dist_qeq(&self) -> Vec<f64> {
        self.inner.column(|r| r.dist_qeq)
    }

    #[getter]
    fn agent_errors(&self) -> Vec<Vec<f64>> {
        self.inner.agent_errors.clone()
    }

    #[getter]
    fn baseline_err(&self) -> Option<Vec<f64>> {
        self.inner.baseline_err.clone()
    }

    fn to_csv(&self) -> String {
        trace_csv_string(&self.inner)
    }

    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        json_to_py(py, &Summary::from_trace(&self.inner, None).to_json())
    }
}

/// Step-by-step observer loop.
#[pyclass(name = "Simulation", unsendable)]
struct PySimulation {
    inner: harness::Simulation,
}

#[pymethods]
impl PySimulation {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        let scenario = Arc::new(generate_scenario(&config.inner).map_err(err)?);
        Ok(Self {
            inner: harness::Simulation::new(scenario).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    /// Prior estimate `x̂_{k|k-1}`.
    #[getter]
    fn estimate(&self) -> Vec<f64> {
        self.inner.observer().x_prior.as_slice().to_vec()
    }

    #[getter]
    fn truth(&self) -> Vec<f64> {
        self.inner.truth().as_slice().to_vec()
    }

    /// Advances one step and returns its metrics.
    fn step(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let (row, _, _, _) = self.inner.step(false).map_err(err)?;
        json_to_py(py, &serde_json::to_string(&row).expect("row is serializable"))
    }
}

#[pyfunction]
fn run(config: &PyConfig) -> PyResult<PyTrace> {
    Ok(PyTrace {
        inner: harness::run(&config.inner).map_err(err)?,
    })
}

/// Re-runs `config` with dense diagnostics; returns `(trace, report)`.
#[pyfunction]
#[pyo3(signature = (config, kernel_stride=50, kernel_horizon=500, contraction_steps=vec![0, 10, 100], contraction_iters=100))]
fn analyze(
    py: Python<'_>,
    config: &PyConfig,
    kernel_stride: usize,
    kernel_horizon: usize,
    contraction_steps: Vec<usize>,
    contraction_iters: usize,
) -> PyResult<(PyTrace, Py<PyAny>)> {
    let opts = AnalysisOptions {
        kernel_stride,
        kernel_horizon,
        contraction_steps,
        contraction_iters,
        ..AnalysisOptions::default()
    };
    let (trace, report) = harness::analyze(&config.inner, &opts).map_err(err)?;
    let report = json_to_py(py, &serde_json::to_string(&report).expect("report is serializable"))?;
    Ok((PyTrace { inner: trace }, report))
}

/// One run per value of `param`; values are written as TOML literals.
#[pyfunction]
fn sweep(py: Python<'_>, config: &PyConfig, param: &str, values: &Bound<'_, PyList>) -> PyResult<Py<PyAny>> {
    let values = values
        .iter()
        .map(|v| Ok(to_toml_value(&v)?.to_string()))
        .collect::<PyResult<Vec<_>>>()?;
    let rows = harness::sweep(&config.inner, param, &values).map_err(err)?;
    json_to_py(py, &serde_json::to_string(&rows).expect("rows are serializable"))
}

/// Dense solve of `S ξ = b` by Cholesky.
#[pyfunction]
fn solve_dense(s: Vec<Vec<f64>>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    let n = b.len();
    if s.len() != n || s.iter().any(|row| row.len() != n) {
        return Err(PyTypeError::new_err(format!("S must be {n}x{n}")));
    }
    let m = DMatrix::from_fn(n, n, |i, j| s[i][j]);
    let xi = solve_centralized(&m, &DVector::from_vec(b)).map_err(err)?;
    Ok(xi.as_slice().to_vec())
}

#[pymodule]
fn distobs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DistobsError", m.py().get_type::<DistobsError>())?;
    m.add("SOLVERS", SolverKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>())?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PySimulation>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(sweep, m)?)?;
    m.add_function(wrap_pyfunction!(solve_dense, m)?)?;
    Ok(())
}
