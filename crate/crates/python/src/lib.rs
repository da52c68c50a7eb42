//! Python module `xinr`: load a checkpoint and answer the service's JSON
//! queries in process.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use serde_json::{json, Value};

use xinr::field::checkpoint;
use xinr::ExplorableModel;
use xinr_cli::engine::{self, Query};
use xinr_cli::ApiError;

fn py_err(e: ApiError) -> PyErr {
    PyValueError::new_err(serde_json::to_string(&e).unwrap_or_else(|_| e.detail.clone()))
}

fn parse(text: &str) -> PyResult<Value> {
    serde_json::from_str(text).map_err(|e| py_err(e.into()))
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ExplorableModel,
}

impl PyModel {
    fn ask(&self, py: Python<'_>, endpoint: &str, body: Value) -> PyResult<Value> {
        let q: Query = serde_json::from_value(json!({ "endpoint": endpoint, "body": body })).map_err(|e| py_err(e.into()))?;
        py.allow_threads(|| engine::answer(&self.inner, &q)).map_err(py_err)
    }
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(|e| py_err(e.into()))? })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Model description as a JSON string.
    fn info(&self, py: Python<'_>) -> PyResult<String> {
        Ok(self.ask(py, "info", Value::Null)?.to_string())
    }

    /// Physical prediction at one point and parameter vector.
    fn point(&self, py: Python<'_>, x: f64, y: f64, z: f64, params: Vec<f64>) -> PyResult<f64> {
        let v = self.ask(py, "point", json!({ "x": x, "y": y, "z": z, "params": params }))?;
        v["value"].as_f64().ok_or_else(|| PyValueError::new_err("non-numeric value"))
    }

    /// Propagated `(mu, sigma)` at one point over a JSON parameter box.
    fn dist(&self, py: Python<'_>, x: f64, y: f64, z: f64, param_box: &str) -> PyResult<(f64, f64)> {
        let v = self.ask(py, "dist", json!({ "x": x, "y": y, "z": z, "param_box": parse(param_box)? }))?;
        match (v["mu"].as_f64(), v["sigma"].as_f64()) {
            (Some(mu), Some(sigma)) => Ok((mu, sigma)),
            _ => Err(PyValueError::new_err("non-numeric summary")),
        }
    }

    /// Answers one service request; `endpoint` is info, point, dist, slice or
    /// search and `body` its JSON request.
    #[pyo3(signature = (endpoint, body = "null"))]
    fn query(&self, py: Python<'_>, endpoint: &str, body: &str) -> PyResult<String> {
        Ok(self.ask(py, endpoint, parse(body)?)?.to_string())
    }
}

#[pymodule]
#[pyo3(name = "xinr")]
fn xinr_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    Ok(())
}
