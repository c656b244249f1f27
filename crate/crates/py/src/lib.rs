//! Python bindings for the part-discovery toolkit.
//!
//! Exposes dataset generation, training, evaluation and the clustering
//! metrics, so experiments can be driven from Python:
//!
//!     import pdisco
//!     pdisco.generate("data", seed=7, n=160)
//!     pdisco.train("data", "run", config_text=pdisco.default_config())
//!     print(pdisco.evaluate("run/checkpoint.pdsc", "data", "run/eval"))

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pdisco_core::commands::{cmd_eval, cmd_generate, cmd_train, GenerateArgs};
use pdisco_core::config::ExperimentConfig;
use pdisco_core::error::Error;
use pdisco_core::metrics;

fn to_py_err(err: Error) -> PyErr {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Precondition(_) => {
            PyValueError::new_err(err.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Generate a PartGlyphs dataset directory.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, n = 160, image_size = 64, parts = 4,
                    occlude_prob = 0.0, train_fraction = 0.8, force = false))]
#[allow(clippy::too_many_arguments)]
fn generate(
    out: PathBuf,
    seed: u64,
    n: usize,
    image_size: usize,
    parts: usize,
    occlude_prob: f64,
    train_fraction: f64,
    force: bool,
) -> PyResult<()> {
    cmd_generate(&GenerateArgs {
        seed,
        n,
        out,
        image_size,
        parts,
        occlude_prob,
        train_fraction,
        force,
    })
    .map_err(to_py_err)
}

/// Train on a dataset directory; returns the per-epoch log as a JSON string.
///
/// `config_text` is the key = value experiment config; defaults apply when
/// omitted. Artifacts (checkpoint, log, resolved config) land in `out`.
#[pyfunction]
#[pyo3(signature = (data, out, config_text = None))]
fn train(data: PathBuf, out: PathBuf, config_text: Option<String>) -> PyResult<String> {
    let config_path = match config_text {
        Some(text) => {
            std::fs::create_dir_all(&out).map_err(|e| to_py_err(e.into()))?;
            let path = out.join("config.txt");
            std::fs::write(&path, text).map_err(|e| to_py_err(e.into()))?;
            Some(path)
        }
        None => None,
    };
    let logs = cmd_train(config_path.as_deref(), &data, &out).map_err(to_py_err)?;
    serde_json::to_string(&logs).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Evaluate a checkpoint on a dataset; returns the metrics report as a JSON
/// string and writes metrics/centroids/part maps into `out`.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, data: PathBuf, out: PathBuf) -> PyResult<String> {
    let report = cmd_eval(&checkpoint, &data, &out).map_err(to_py_err)?;
    serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Normalized mutual information between two integer labelings.
#[pyfunction]
fn nmi(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    metrics::nmi(&a, &b).map_err(to_py_err)
}

/// Adjusted Rand index between two integer labelings.
#[pyfunction]
fn ari(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    metrics::ari(&a, &b).map_err(to_py_err)
}

/// The fully resolved default experiment config as key = value text.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().serialize()
}

#[pymodule]
fn pdisco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(ari, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    Ok(())
}
