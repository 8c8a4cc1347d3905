//! Python bindings for irregrid-core.

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use irregrid_core::dict::{self, KsvdParams, NnParams};
use irregrid_core::experiment::{self, ExperimentConfig};
use irregrid_core::{io, oi, pipeline, Error};

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.code()))
}

#[pyclass(name = "GridSpec", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGridSpec(irregrid_core::GridSpec);

#[pymethods]
impl PyGridSpec {
    #[new]
    fn new(lat_min: f64, lat_max: f64, lon_min: f64, lon_max: f64, step: f64) -> PyResult<Self> {
        irregrid_core::GridSpec::new(lat_min, lat_max, lon_min, lon_max, step)
            .map(Self)
            .map_err(py_err)
    }
    #[getter]
    fn n_rows(&self) -> usize {
        self.0.n_rows()
    }
    #[getter]
    fn n_cols(&self) -> usize {
        self.0.n_cols()
    }
    #[getter]
    fn step(&self) -> f64 {
        self.0.step()
    }
    fn lat(&self, row: usize) -> f64 {
        self.0.lat(row)
    }
    fn lon(&self, col: usize) -> f64 {
        self.0.lon(col)
    }
    fn __repr__(&self) -> String {
        format!(
            "GridSpec({}, {}, {}, {}, step={}; {}x{})",
            self.0.lat_min(),
            self.0.lat_max(),
            self.0.lon_min(),
            self.0.lon_max(),
            self.0.step(),
            self.0.n_rows(),
            self.0.n_cols()
        )
    }
}

/// Time stack of gridded fields; `values` is slice-major, row-major.
#[pyclass(name = "FieldStack", frozen, from_py_object)]
#[derive(Clone)]
struct PyFieldStack(irregrid_core::FieldStack);

#[pymethods]
impl PyFieldStack {
    #[new]
    #[pyo3(signature = (grid, times, values, mask=None))]
    fn new(
        grid: PyGridSpec,
        times: Vec<i64>,
        values: Vec<f64>,
        mask: Option<Vec<bool>>,
    ) -> PyResult<Self> {
        irregrid_core::FieldStack::new(grid.0, times, values, mask)
            .map(Self)
            .map_err(py_err)
    }
    #[getter]
    fn grid(&self) -> PyGridSpec {
        PyGridSpec(*self.0.grid())
    }
    #[getter]
    fn times(&self) -> Vec<i64> {
        self.0.times().to_vec()
    }
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }
    fn slice(&self, ti: usize) -> PyResult<Vec<f64>> {
        if ti >= self.0.n_times() {
            return Err(PyValueError::new_err("slice index out of range"));
        }
        Ok(self.0.slice(ti).to_vec())
    }
    fn sample(&self, t: f64, lat: f64, lon: f64) -> PyResult<f64> {
        self.0
            .sample(t, irregrid_core::Point::new(lat, lon))
            .map_err(py_err)
    }
    fn patch(&self, t: f64, lat: f64, lon: f64, w_p: usize) -> PyResult<Vec<f64>> {
        self.0
            .patch(t, irregrid_core::Point::new(lat, lon), w_p)
            .map_err(py_err)
    }
    fn __len__(&self) -> usize {
        self.0.n_times()
    }
}

/// Irregular point observations `(t, lat, lon, value)`.
#[pyclass(name = "TrackObservations", frozen, from_py_object)]
#[derive(Clone)]
struct PyTrackObservations(irregrid_core::TrackObservations);

#[pymethods]
impl PyTrackObservations {
    #[new]
    fn new(records: Vec<(f64, f64, f64, f64)>) -> PyResult<Self> {
        let recs = records
            .into_iter()
            .map(|(t, lat, lon, value)| irregrid_core::Observation { t, lat, lon, value })
            .collect();
        irregrid_core::TrackObservations::new(recs)
            .map(Self)
            .map_err(py_err)
    }
    fn records(&self) -> Vec<(f64, f64, f64, f64)> {
        self.0
            .iter()
            .map(|o| (o.t, o.lat, o.lon, o.value))
            .collect()
    }
    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Operator dictionary (`pca`, `ksvd` or `nn`).
#[pyclass(name = "OperatorDictionary", frozen, from_py_object)]
#[derive(Clone)]
struct PyDictionary(irregrid_core::OperatorDictionary);

#[pymethods]
impl PyDictionary {
    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind().method_name()
    }
    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }
    #[getter]
    fn m(&self) -> usize {
        self.0.m()
    }
    /// Atoms as a list of columns.
    fn atoms(&self) -> Vec<Vec<f64>> {
        self.0
            .atoms()
            .column_iter()
            .map(|c| c.iter().copied().collect())
            .collect()
    }
    fn mean(&self) -> Vec<f64> {
        self.0.mean().iter().copied().collect()
    }
    fn code(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.code(&h).map(|c| c.alpha).map_err(py_err)
    }
    /// Joint operator `[h_y | h_x]` for coefficients `alpha`.
    fn decode(&self, alpha: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0
            .decode(&alpha)
            .map(|op| op.joint().to_vec())
            .map_err(py_err)
    }
    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.0).map_err(|e| py_err(e.into()))
    }
    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        serde_json::from_str(s)
            .map(Self)
            .map_err(|e| py_err(e.into()))
    }
}

/// Learns a dictionary from operator samples (one per row).
#[pyfunction]
#[pyo3(signature = (method, samples, k, t0=3, iters=None, seed=0))]
fn fit_dictionary(
    method: &str,
    samples: Vec<Vec<f64>>,
    k: usize,
    t0: usize,
    iters: Option<usize>,
    seed: u64,
) -> PyResult<PyDictionary> {
    let n = samples.len();
    let m = samples.first().map_or(0, Vec::len);
    if samples.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("E_DIM: ragged sample rows"));
    }
    let mat = DMatrix::from_fn(n, m, |i, j| samples[i][j]);
    let dict = match method {
        "pca" => dict::pca_fit(&mat, k).map(|f| f.dict),
        "ksvd" => {
            let p = KsvdParams {
                t0,
                iters: iters.unwrap_or(KsvdParams::default().iters),
                seed,
            };
            dict::ksvd_fit(&mat, k, &p).map(|f| f.0)
        }
        "nn" => {
            let p = NnParams {
                iters: iters.unwrap_or(NnParams::default().iters),
                seed,
            };
            dict::nn_fit(&mat, k, &p).map(|f| f.0)
        }
        other => {
            return Err(PyValueError::new_err(format!(
                "E_PARAM: unknown method {other:?}"
            )))
        }
    };
    dict.map(PyDictionary).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (obs, grid, times, sigma2, l_s=1.0, l_t=10.0, noise2=None, max_obs=100))]
#[allow(clippy::too_many_arguments)]
fn oi_reconstruct(
    py: Python<'_>,
    obs: PyTrackObservations,
    grid: PyGridSpec,
    times: Vec<i64>,
    sigma2: f64,
    l_s: f64,
    l_t: f64,
    noise2: Option<f64>,
    max_obs: usize,
) -> PyResult<PyFieldStack> {
    let params = oi::OiParams {
        sigma2,
        l_s,
        l_t,
        noise2: noise2.unwrap_or(0.01 * sigma2),
        max_obs,
    };
    py.detach(|| oi::oi_reconstruct(&obs.0, &grid.0, &times, &params))
        .map(PyFieldStack)
        .map_err(py_err)
}

#[pyfunction]
fn upsample(lr: PyFieldStack, grid: PyGridSpec) -> PyResult<PyFieldStack> {
    irregrid_core::upsample(&lr.0, &grid.0)
        .map(PyFieldStack)
        .map_err(py_err)
}

/// `(per_day, mean)` relative RMSE.
#[pyfunction]
fn evaluate_rmse(estimate: PyFieldStack, truth: PyFieldStack) -> PyResult<(Vec<f64>, f64)> {
    pipeline::evaluate_rmse(&estimate.0, &truth.0)
        .map(|r| (r.per_day, r.mean))
        .map_err(py_err)
}

#[pyfunction]
fn read_fld(path: &str) -> PyResult<PyFieldStack> {
    io::read_fld(path).map(PyFieldStack).map_err(py_err)
}

#[pyfunction]
fn write_fld(stack: PyFieldStack, path: &str) -> PyResult<()> {
    io::write_fld(&stack.0, path).map_err(py_err)
}

#[pyfunction]
fn read_obs(path: &str) -> PyResult<PyTrackObservations> {
    io::read_obs(path).map(PyTrackObservations).map_err(py_err)
}

/// Runs the synthetic experiment in memory. `config` is a (partial) JSON
/// config; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (config="{}"))]
fn run_experiment(py: Python<'_>, config: &str) -> PyResult<String> {
    let value: serde_json::Value = serde_json::from_str(config).map_err(|e| py_err(e.into()))?;
    let cfg = ExperimentConfig::resolve(Some(value), &[]).map_err(py_err)?;
    let out = py
        .detach(|| experiment::run_experiment(&cfg))
        .map_err(py_err)?;
    serde_json::to_string(&out.report).map_err(|e| py_err(e.into()))
}

/// Resolved default config as JSON.
#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string_pretty(&ExperimentConfig::default()).map_err(|e| py_err(e.into()))
}

#[pymodule]
fn irregrid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGridSpec>()?;
    m.add_class::<PyFieldStack>()?;
    m.add_class::<PyTrackObservations>()?;
    m.add_class::<PyDictionary>()?;
    m.add_function(wrap_pyfunction!(fit_dictionary, m)?)?;
    m.add_function(wrap_pyfunction!(oi_reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(upsample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(read_fld, m)?)?;
    m.add_function(wrap_pyfunction!(write_fld, m)?)?;
    m.add_function(wrap_pyfunction!(read_obs, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
