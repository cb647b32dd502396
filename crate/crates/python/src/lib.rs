//! Python bindings. Configuration objects cross the boundary as JSON text.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mfstop::calculus::{check_projection_derivatives, BuiltinFunctional};
use mfstop::harness::{run, Command, ExperimentConfig};
use mfstop::measures::{read_measure, w1 as core_w1, w2 as core_w2, write_measure, EmpiricalMeasure, GroundMetric, Transport};
use mfstop::model::BuiltinModel;
use mfstop::policy::{evaluate_policy as core_evaluate, EvalRule, StoppingPolicy};
use mfstop::simulate::{simulate_system, Noise, StoppingRule, StreamKey, SystemState, TimeGrid};
use mfstop::snell::{brute_force_value as core_brute_force, solve_cascade_with_spec, Backend, ValueTable};

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned>(what: &str, text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("{what}: {e}")))
}

fn noise_of(noise: Option<&str>) -> PyResult<Noise> {
    noise.map_or(Ok(Noise::Gaussian), |s| from_json("noise", s))
}

fn state_1d(xs: &[f64], alive: &[bool]) -> PyResult<SystemState> {
    if xs.len() != alive.len() {
        return Err(PyValueError::new_err("xs and alive differ in length"));
    }
    SystemState::new(1, xs.to_vec(), alive.to_vec()).map_err(err)
}

/// Weighted atoms on `R^d x {0, 1}`.
#[pyclass(name = "Measure", module = "mfstop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMeasure {
    inner: EmpiricalMeasure,
}

#[pymethods]
impl PyMeasure {
    /// `xs` is row-major `[atom][coordinate]`; uniform weights when omitted.
    #[new]
    #[pyo3(signature = (xs, alive, weights=None, dim=1))]
    fn new(xs: Vec<f64>, alive: Vec<bool>, weights: Option<Vec<f64>>, dim: usize) -> PyResult<Self> {
        let inner = match weights {
            Some(w) => EmpiricalMeasure::new(dim, xs, alive, w),
            None => EmpiricalMeasure::uniform(dim, xs, alive),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read_csv(path: PathBuf) -> PyResult<Self> {
        let file = File::open(path).map_err(err)?;
        Ok(Self {
            inner: read_measure(BufReader::new(file)).map_err(err)?,
        })
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = File::create(path).map_err(err)?;
        write_measure(&self.inner, BufWriter::new(file)).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn positions(&self) -> Vec<f64> {
        self.inner.positions().to_vec()
    }

    #[getter]
    fn alive(&self) -> Vec<bool> {
        self.inner.indicators().to_vec()
    }

    fn alive_mass(&self) -> f64 {
        self.inner.alive_mass()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Measure(atoms={}, dim={}, alive_mass={})", self.inner.len(), self.inner.dim(), self.inner.alive_mass())
    }
}

fn transport(indicator_weight: f64, general: bool) -> Transport {
    Transport {
        metric: GroundMetric { indicator_weight },
        allow_general: general,
    }
}

/// Exact `W1` under the ground metric with the given indicator weight.
#[pyfunction]
#[pyo3(signature = (a, b, indicator_weight=1.0, general=false))]
fn w1(py: Python<'_>, a: &PyMeasure, b: &PyMeasure, indicator_weight: f64, general: bool) -> PyResult<f64> {
    let t = transport(indicator_weight, general);
    py.detach(|| core_w1(&a.inner, &b.inner, &t)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, indicator_weight=1.0, general=false))]
fn w2(py: Python<'_>, a: &PyMeasure, b: &PyMeasure, indicator_weight: f64, general: bool) -> PyResult<f64> {
    let t = transport(indicator_weight, general);
    py.detach(|| core_w2(&a.inner, &b.inner, &t)).map_err(err)
}

/// A builtin model, described by its JSON spec (`{"name": ...}`).
#[pyclass(name = "Model", module = "mfstop_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel {
    spec: BuiltinModel,
    model: mfstop::model::Model,
}

impl PyModel {
    fn from_spec(spec: BuiltinModel) -> PyResult<Self> {
        spec.validate().map_err(err)?;
        let model = spec.build();
        Ok(Self { spec, model })
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Self::from_spec(from_json("model", text)?)
    }

    #[staticmethod]
    fn decoupled_additive() -> PyResult<Self> {
        Self::from_spec(BuiltinModel::decoupled_additive())
    }

    #[staticmethod]
    fn mean_reverter() -> PyResult<Self> {
        Self::from_spec(BuiltinModel::mean_reverter())
    }

    #[getter]
    fn name(&self) -> &str {
        self.model.name()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.dim()
    }

    #[getter]
    fn coupled(&self) -> bool {
        self.model.is_coupled()
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.spec).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.spec.tag())
    }
}

/// Values of the `N`-particle problem on every node and regime.
#[pyclass(name = "ValueTable", module = "mfstop_py", frozen)]
struct PyValueTable {
    table: Arc<ValueTable>,
    model: PyModel,
}

#[pymethods]
impl PyValueTable {
    /// Solve the cascade on `steps` equal steps of `[0, t_end]`. `backend` is
    /// the JSON backend description (`{"kind": "lattice", ...}`).
    #[staticmethod]
    #[pyo3(signature = (model, n, steps, backend, t_end=1.0))]
    fn solve(py: Python<'_>, model: &PyModel, n: usize, steps: usize, backend: &str, t_end: f64) -> PyResult<Self> {
        let backend: Backend = from_json("backend", backend)?;
        let grid = TimeGrid::new(0.0, t_end, steps).map_err(err)?;
        let table = py
            .detach(|| solve_cascade_with_spec(&model.model, Some(&model.spec), n, &grid, &backend))
            .map_err(err)?;
        Ok(Self {
            table: Arc::new(table),
            model: model.clone(),
        })
    }

    #[staticmethod]
    fn read(path: PathBuf, model: &PyModel) -> PyResult<Self> {
        let file = File::open(path).map_err(err)?;
        let table = ValueTable::read(BufReader::new(file), Some(&model.model)).map_err(err)?;
        Ok(Self {
            table: Arc::new(table),
            model: model.clone(),
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        let file = File::create(path).map_err(err)?;
        self.table.write(BufWriter::new(file)).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.table.n
    }

    #[getter]
    fn backend(&self) -> &'static str {
        self.table.backend_tag()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.table.warnings.clone()
    }

    /// `v^N(t_node, y)` for a one-dimensional system.
    fn value_at(&self, node: usize, xs: Vec<f64>, alive: Vec<bool>) -> PyResult<f64> {
        self.table.value_at(node, &state_1d(&xs, &alive)?).map_err(err)
    }

    /// Particles the optimal policy stops at `node` with slack `eta`.
    #[pyo3(signature = (node, xs, alive, eta=1e-9))]
    fn stops(&self, node: usize, xs: Vec<f64>, alive: Vec<bool>, eta: f64) -> PyResult<Vec<usize>> {
        let policy = StoppingPolicy::new(self.table.clone(), eta).map_err(err)?;
        policy.stops(node, &state_1d(&xs, &alive)?).map_err(err)
    }

    /// Monte Carlo objective of the optimal policy from `y0`:
    /// `(mean, std_error, clamps)`.
    #[pyo3(signature = (xs, alive, reps, seed, eta=1e-9, noise=None))]
    fn evaluate(
        &self,
        py: Python<'_>,
        xs: Vec<f64>,
        alive: Vec<bool>,
        reps: usize,
        seed: u64,
        eta: f64,
        noise: Option<&str>,
    ) -> PyResult<(f64, f64, usize)> {
        let y0 = state_1d(&xs, &alive)?;
        let noise = noise_of(noise)?;
        let policy = Arc::new(StoppingPolicy::new(self.table.clone(), eta).map_err(err)?);
        let grid = self.table.grid;
        let est = py
            .detach(|| core_evaluate(&self.model.model, &grid, &y0, EvalRule::Policy(&policy), reps, noise, seed))
            .map_err(err)?;
        Ok((est.j, est.std_error, est.clamps))
    }
}

/// Optimal value by enumerating every stopping decision on the lattice chain.
#[pyfunction]
#[pyo3(signature = (model, steps, xs, alive, h, t_end=1.0))]
fn brute_force_value(model: &PyModel, steps: usize, xs: Vec<f64>, alive: Vec<bool>, h: f64, t_end: f64) -> PyResult<f64> {
    let grid = TimeGrid::new(0.0, t_end, steps).map_err(err)?;
    core_brute_force(&model.model, &grid, &state_1d(&xs, &alive)?, h).map_err(err)
}

/// One replication without stopping: `(positions[node][k], alive[node][k])`.
#[pyfunction]
#[pyo3(signature = (model, steps, xs, alive, seed, replication=0, t_end=1.0, noise=None))]
#[allow(clippy::too_many_arguments)]
fn simulate(
    model: &PyModel,
    steps: usize,
    xs: Vec<f64>,
    alive: Vec<bool>,
    seed: u64,
    replication: u64,
    t_end: f64,
    noise: Option<&str>,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let grid = TimeGrid::new(0.0, t_end, steps).map_err(err)?;
    let y0 = state_1d(&xs, &alive)?;
    let paths = simulate_system(
        &model.model,
        &grid,
        &y0,
        &StoppingRule::Never,
        noise_of(noise)?,
        StreamKey::new(seed, replication),
    )
    .map_err(err)?;
    Ok((0..grid.n_nodes())
        .map(|s| {
            let st = paths.state(s);
            (st.xs, st.alive)
        })
        .unzip())
}

/// Worst relative errors `(first, second)` of the projected derivatives of a
/// builtin functional against finite differences.
#[pyfunction]
#[pyo3(signature = (functional, xs, alive, t=0.0, h_fd=1e-4))]
fn check_derivatives(functional: &str, xs: Vec<f64>, alive: Vec<bool>, t: f64, h_fd: f64) -> PyResult<(f64, f64)> {
    let f: BuiltinFunctional = from_json("functional", &format!("\"{functional}\""))?;
    let y = state_1d(&xs, &alive)?;
    let c = check_projection_derivatives(&f.build(), xs.len(), t, &y, h_fd).map_err(err)?;
    Ok((c.first_order, c.second_order))
}

/// Run a CLI command from a JSON config; returns the manifest as JSON.
#[pyfunction]
fn run_experiment(py: Python<'_>, command: &str, config: &str, out: PathBuf) -> PyResult<String> {
    let command: Command = from_json("command", &format!("\"{command}\""))?;
    let cfg = ExperimentConfig::from_json(config).map_err(err)?;
    let manifest = py.detach(|| run(&cfg, config, command, &out)).map_err(err)?;
    serde_json::to_string(&manifest).map_err(err)
}

#[pymodule]
fn mfstop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMeasure>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyValueTable>()?;
    m.add_function(wrap_pyfunction!(w1, m)?)?;
    m.add_function(wrap_pyfunction!(w2, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_value, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(check_derivatives, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
