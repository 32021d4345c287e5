//! Python bindings: `create_engine` plus an engine handle with
//! prefill / generate / release / shutdown.

use std::sync::Mutex;

use pyo3::create_exception;
use pyo3::exceptions::PyRuntimeError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

create_exception!(
    edgert_py,
    EdgertError,
    PyRuntimeError,
    "Raised as EdgertError(name, message)."
);

fn to_py_err(e: edgert::Error) -> PyErr {
    EdgertError::new_err((e.name(), e.to_string()))
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(xs) => {
            let items = xs.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn stats_to_py<'py>(py: Python<'py>, s: &edgert::RequestStats) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(s).expect("stats serialize"))
}

/// Live engine. Dropped on shutdown so its buffers go with it.
#[pyclass(module = "edgert_py", frozen)]
pub struct Engine {
    inner: Mutex<Option<edgert::Engine>>,
}

impl Engine {
    fn with<R: Send>(
        &self,
        py: Python<'_>,
        f: impl FnOnce(&edgert::Engine) -> edgert::Result<R> + Send,
    ) -> PyResult<R> {
        py.detach(|| {
            let guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
            match guard.as_ref() {
                Some(e) => f(e),
                None => Err(edgert::Error::Closed),
            }
        })
        .map_err(to_py_err)
    }
}

#[pymethods]
impl Engine {
    /// Runs the prompt and leaves the request open for `generate`.
    fn prefill<'py>(&self, py: Python<'py>, request_id: &str, tokens: Vec<u32>) -> PyResult<Bound<'py, PyAny>> {
        let stats = self.with(py, |e| e.prefill(request_id, &tokens))?;
        stats_to_py(py, &stats)
    }

    /// Returns `(tokens, stats)`.
    #[pyo3(signature = (request_id, tokens, max_new=None))]
    fn generate<'py>(
        &self,
        py: Python<'py>,
        request_id: &str,
        tokens: Vec<u32>,
        max_new: Option<usize>,
    ) -> PyResult<(Vec<u32>, Bound<'py, PyAny>)> {
        let resp = self.with(py, |e| e.generate(request_id, &tokens, max_new))?;
        Ok((resp.output_tokens, stats_to_py(py, &resp.stats)?))
    }

    fn release(&self, py: Python<'_>, request_id: &str) -> PyResult<()> {
        self.with(py, |e| e.release(request_id))
    }

    /// Idempotent.
    fn shutdown(&self, py: Python<'_>) {
        py.detach(|| {
            let mut guard = self.inner.lock().unwrap_or_else(|p| p.into_inner());
            if let Some(e) = guard.take() {
                e.shutdown();
            }
        })
    }

    #[getter]
    fn closed(&self) -> bool {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).is_none()
    }

    fn __enter__(slf: Py<Self>) -> Py<Self> {
        slf
    }

    fn __exit__(&self, py: Python<'_>, _t: Py<PyAny>, _v: Py<PyAny>, _tb: Py<PyAny>) -> bool {
        self.shutdown(py);
        false
    }
}

#[pyfunction]
fn create_engine(py: Python<'_>, config_path: std::path::PathBuf) -> PyResult<Engine> {
    let engine = py.detach(|| edgert::create_engine(&config_path)).map_err(to_py_err)?;
    Ok(Engine {
        inner: Mutex::new(Some(engine)),
    })
}

#[pymodule]
fn edgert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(create_engine, m)?)?;
    m.add_class::<Engine>()?;
    m.add("EdgertError", m.py().get_type::<EdgertError>())?;
    Ok(())
}
