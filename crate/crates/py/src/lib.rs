//! Python bindings.

use std::collections::HashMap;
use std::path::PathBuf;

use driftfollow::clreg::{self, Accumulation, ImportanceKind, ImportanceVector, RegConfig};
use driftfollow::data::{self, IdmParams, Regime};
use driftfollow::nn::{self, ParamVector};
use driftfollow::train::{self, Method, TrainConfig};
use driftfollow::{dfw, eval, Error};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Parse { .. } => PyIOError::new_err(e.to_string()),
        Error::Numeric(_) | Error::InvalidState(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

#[pyclass(name = "Event", module = "driftfollow_py", from_py_object)]
#[derive(Clone)]
pub struct PyEvent {
    inner: data::Event,
}

#[pymethods]
impl PyEvent {
    #[new]
    fn new(event_id: String, dt: f64, lv_speed: Vec<f64>, fv_speed: Vec<f64>, spacing: Vec<f64>) -> PyResult<Self> {
        let inner = data::Event {
            event_id,
            dt,
            lv_speed,
            fv_speed,
            spacing,
        };
        inner.validate(nn::DEFAULT_HORIZON).map_err(py_err)?;
        Ok(PyEvent { inner })
    }

    #[getter]
    fn event_id(&self) -> String {
        self.inner.event_id.clone()
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn lv_speed(&self) -> Vec<f64> {
        self.inner.lv_speed.clone()
    }

    #[getter]
    fn fv_speed(&self) -> Vec<f64> {
        self.inner.fv_speed.clone()
    }

    #[getter]
    fn spacing(&self) -> Vec<f64> {
        self.inner.spacing.clone()
    }

    fn mean_fv_speed(&self) -> f64 {
        data::mean_fv_speed(&self.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Event({:?}, {} steps)", self.inner.event_id, self.inner.len())
    }
}

fn unwrap_events(events: &[PyEvent]) -> Vec<data::Event> {
    events.iter().map(|e| e.inner.clone()).collect()
}

fn wrap_events(events: &[data::Event]) -> Vec<PyEvent> {
    events.iter().cloned().map(|inner| PyEvent { inner }).collect()
}

#[pyclass(name = "TaskSet", module = "driftfollow_py", from_py_object)]
#[derive(Clone)]
pub struct PyTaskSet {
    inner: data::TaskSet,
}

#[pymethods]
impl PyTaskSet {
    #[getter]
    fn task_id(&self) -> u8 {
        self.inner.task_id
    }

    #[getter]
    fn speed_range(&self) -> String {
        self.inner.speed_range.to_string()
    }

    #[getter]
    fn train(&self) -> Vec<PyEvent> {
        wrap_events(&self.inner.train)
    }

    #[getter]
    fn val(&self) -> Vec<PyEvent> {
        wrap_events(&self.inner.val)
    }

    #[getter]
    fn test(&self) -> Vec<PyEvent> {
        wrap_events(&self.inner.test)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn three_tasks(tasks: Vec<PyTaskSet>) -> PyResult<[data::TaskSet; 3]> {
    let v: Vec<data::TaskSet> = tasks.into_iter().map(|t| t.inner).collect();
    v.try_into()
        .map_err(|_| PyValueError::new_err("expected exactly three task sets"))
}

#[pyclass(name = "Params", module = "driftfollow_py", from_py_object)]
#[derive(Clone)]
pub struct PyParams {
    inner: ParamVector,
}

#[pymethods]
impl PyParams {
    #[new]
    fn new(hidden_size: usize, values: Vec<f64>) -> PyResult<Self> {
        Ok(PyParams {
            inner: ParamVector::from_values(hidden_size, values).map_err(py_err)?,
        })
    }

    #[getter]
    fn hidden_size(&self) -> usize {
        self.inner.hidden_size()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Acceleration for a window of `[sv, lv, lv - sv, spacing]` rows.
    fn forward(&self, rows: Vec<[f64; 4]>) -> PyResult<f64> {
        let h = rows.len();
        let w = nn::FeatureWindow::new(rows, h).map_err(py_err)?;
        Ok(nn::forward(&w, &self.inner).map_err(py_err)?.0)
    }

    /// `upstream * d(accel)/d(params)` for the window.
    #[pyo3(signature = (rows, upstream = 1.0))]
    fn backward(&self, rows: Vec<[f64; 4]>, upstream: f64) -> PyResult<Vec<f64>> {
        let h = rows.len();
        let w = nn::FeatureWindow::new(rows, h).map_err(py_err)?;
        let (_, cache) = nn::forward(&w, &self.inner).map_err(py_err)?;
        Ok(nn::backward(&cache, &self.inner, upstream).map_err(py_err)?.values)
    }
}

#[pyclass(name = "Checkpoint", module = "driftfollow_py", from_py_object)]
#[derive(Clone)]
pub struct PyCheckpoint {
    inner: train::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[getter]
    fn method(&self) -> String {
        self.inner.method.name().to_owned()
    }

    #[getter]
    fn stage(&self) -> u8 {
        self.inner.stage
    }

    #[getter]
    fn params(&self) -> PyParams {
        PyParams {
            inner: self.inner.params.clone(),
        }
    }

    #[getter]
    fn file_name(&self) -> String {
        self.inner.file_name()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dfw::save_checkpoint(&self.inner, &path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({}, stage {})", self.inner.method, self.inner.stage)
    }
}

#[pyfunction]
#[pyo3(signature = (regime, count, dt = 0.1, seed = 42))]
fn generate_events(regime: &str, count: usize, dt: f64, seed: u64) -> PyResult<Vec<PyEvent>> {
    let r: Regime = regime.parse().map_err(py_err)?;
    Ok(wrap_events(&data::generate_events(r, count, dt, seed).map_err(py_err)?))
}

#[pyfunction]
fn load_events(path: PathBuf) -> PyResult<Vec<PyEvent>> {
    Ok(wrap_events(&data::load_events(&path).map_err(py_err)?))
}

#[pyfunction]
fn save_events(events: Vec<PyEvent>, path: PathBuf) -> PyResult<()> {
    data::save_events(&unwrap_events(&events), &path).map_err(py_err)
}

/// Returns `([task1, task2, task3], (lower, upper))`.
#[pyfunction]
#[pyo3(signature = (events, seed = 42))]
fn split_tasks(events: Vec<PyEvent>, seed: u64) -> PyResult<(Vec<PyTaskSet>, (f64, f64))> {
    let (tasks, b) = data::split_tasks(&unwrap_events(&events), seed).map_err(py_err)?;
    Ok((tasks.into_iter().map(|inner| PyTaskSet { inner }).collect(), (b.lower, b.upper)))
}

#[pyfunction]
fn percentile(values: Vec<f64>, p: f64) -> f64 {
    data::percentile(&values, p)
}

#[pyfunction]
#[pyo3(signature = (v, dv, s, **params))]
fn idm_accel(v: f64, dv: f64, s: f64, params: Option<HashMap<String, f64>>) -> PyResult<f64> {
    let mut p = IdmParams::default();
    for (k, val) in params.unwrap_or_default() {
        match k.as_str() {
            "desired_speed" => p.desired_speed = val,
            "time_headway" => p.time_headway = val,
            "min_gap" => p.min_gap = val,
            "max_accel" => p.max_accel = val,
            "comfortable_decel" => p.comfortable_decel = val,
            "exponent" => p.exponent = val,
            other => return Err(PyValueError::new_err(format!("unknown IDM parameter {other:?}"))),
        }
    }
    data::idm_accel(v, dv, s, &p).map_err(py_err)
}

#[pyfunction]
fn init_params(hidden_size: usize, seed: u64) -> PyResult<PyParams> {
    Ok(PyParams {
        inner: nn::init_params(hidden_size, seed).map_err(py_err)?,
    })
}

/// Quadratic consolidation penalty; `kind` is "fisher" or "mas".
#[pyfunction]
fn penalty(params: Vec<f64>, weights: Vec<f64>, anchor: Vec<f64>, kind: &str, lam: f64) -> PyResult<(f64, Vec<f64>)> {
    let kind = match kind {
        "fisher" | "ewc" => ImportanceKind::Fisher,
        "mas" => ImportanceKind::Mas,
        other => return Err(PyValueError::new_err(format!("unknown importance kind {other:?}"))),
    };
    let imp = ImportanceVector::new(kind, weights, anchor, 1).map_err(py_err)?;
    let cfg = RegConfig::new(lam, Accumulation::Sum).map_err(py_err)?;
    clreg::penalty(&params, &imp, &cfg).map_err(py_err)
}

/// Percent change from `first` to `last`; None when `first` is zero.
#[pyfunction]
fn forgetting_score(first: f64, last: f64) -> Option<f64> {
    eval::relative_increase(first, last)
}

/// Runs one method's curriculum. `config` holds `key: value` overrides in
/// the config-file vocabulary (epochs, hidden_size, lambda, ...).
#[pyfunction]
#[pyo3(signature = (tasks, method, config = None))]
fn run_curriculum(
    py: Python<'_>,
    tasks: Vec<PyTaskSet>,
    method: &str,
    config: Option<HashMap<String, String>>,
) -> PyResult<Vec<PyCheckpoint>> {
    let tasks = three_tasks(tasks)?;
    let m: Method = method.parse().map_err(py_err)?;
    let mut cfg = TrainConfig::for_method(m);
    let mut entries: Vec<(String, String)> = config.unwrap_or_default().into_iter().collect();
    entries.sort();
    for (k, v) in &entries {
        cfg.set(k, v).map_err(py_err)?;
    }
    let run = py
        .detach(|| train::run_curriculum(&tasks, &cfg))
        .map_err(py_err)?;
    Ok(run.checkpoints.into_iter().map(|inner| PyCheckpoint { inner }).collect())
}

/// Stage matrix of the checkpoints over the tasks' test splits, as CSV.
#[pyfunction]
#[pyo3(signature = (checkpoints, tasks, dt = 0.1))]
fn stage_matrix_csv(py: Python<'_>, checkpoints: Vec<PyCheckpoint>, tasks: Vec<PyTaskSet>, dt: f64) -> PyResult<String> {
    let tasks = three_tasks(tasks)?;
    let cks: Vec<train::Checkpoint> = checkpoints.into_iter().map(|c| c.inner).collect();
    let m = py
        .detach(|| eval::build_stage_matrix(&cks, &tasks, dt))
        .map_err(py_err)?;
    Ok(m.to_csv())
}

#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<PyCheckpoint> {
    Ok(PyCheckpoint {
        inner: dfw::load_checkpoint(&path).map_err(py_err)?,
    })
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| driftfollow::cli::main_with(std::iter::once("driftfollow".to_string()).chain(args)))
}

#[pymodule]
fn driftfollow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEvent>()?;
    m.add_class::<PyTaskSet>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(generate_events, m)?)?;
    m.add_function(wrap_pyfunction!(load_events, m)?)?;
    m.add_function(wrap_pyfunction!(save_events, m)?)?;
    m.add_function(wrap_pyfunction!(split_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(idm_accel, m)?)?;
    m.add_function(wrap_pyfunction!(init_params, m)?)?;
    m.add_function(wrap_pyfunction!(penalty, m)?)?;
    m.add_function(wrap_pyfunction!(forgetting_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_curriculum, m)?)?;
    m.add_function(wrap_pyfunction!(stage_matrix_csv, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
