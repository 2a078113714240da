//! Python bindings: the command-line pipeline plus the core numeric pieces.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use trv_core::cli::{self, RunConfig};
use trv_core::control::{self, Control, MppiConfig, VehicleState};
use trv_core::eval;
use trv_core::features;
use trv_core::trainer::{self, Checkpoint};
use trv_core::TrvError;

fn py_err(e: TrvError) -> PyErr {
    match e {
        TrvError::Io { .. } => PyIOError::new_err(e.to_string()),
        TrvError::Numeric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config(json: Option<&str>) -> PyResult<RunConfig> {
    match json {
        None => Ok(RunConfig::default()),
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("invalid config: {e}"))),
    }
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for item in items {
                list.append(to_py(py, item)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Default run configuration as a JSON string.
#[pyfunction]
fn default_config() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).unwrap_or_default()
}

/// Generate a synthetic dataset; returns the number of frames written.
#[pyfunction]
#[pyo3(signature = (out, frames=None, seed=None, config_json=None))]
fn sim_gen(out: PathBuf, frames: Option<usize>, seed: Option<u64>, config_json: Option<&str>) -> PyResult<usize> {
    let mut cfg = config(config_json)?;
    if let Some(f) = frames {
        cfg.sim.frames = f;
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    Ok(cli::cmd_sim_gen(&cfg, &out).map_err(py_err)?.frames.len())
}

#[pyfunction]
#[pyo3(signature = (manifest, out, config_json=None))]
fn train(manifest: PathBuf, out: PathBuf, config_json: Option<&str>) -> PyResult<TrainedModel> {
    let cfg = config(config_json)?;
    cli::cmd_train(&cfg, &manifest, &out)
        .map(|inner| TrainedModel { inner })
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, out, config_json=None))]
fn adapt(checkpoint: PathBuf, manifest: PathBuf, out: PathBuf, config_json: Option<&str>) -> PyResult<TrainedModel> {
    let cfg = config(config_json)?;
    cli::cmd_adapt(&cfg, &checkpoint, &manifest, &out)
        .map(|inner| TrainedModel { inner })
        .map_err(py_err)
}

/// Write cost images and BEV costmaps; returns the number of frames.
#[pyfunction]
#[pyo3(signature = (checkpoint, manifest, out, config_json=None))]
fn predict(checkpoint: PathBuf, manifest: PathBuf, out: PathBuf, config_json: Option<&str>) -> PyResult<usize> {
    let cfg = config(config_json)?;
    Ok(cli::cmd_predict(&cfg, &checkpoint, &manifest, &out)
        .map_err(py_err)?
        .len())
}

/// Classification metrics of a `predict` directory against manifest labels.
#[pyfunction]
#[pyo3(signature = (predictions, manifest, config_json=None))]
fn evaluate_metrics<'py>(
    py: Python<'py>,
    predictions: PathBuf,
    manifest: PathBuf,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let out = cli::eval_metrics(&cfg, &predictions, &manifest).map_err(py_err)?;
    serialize(py, &out)
}

/// Collision report; plans on ground-truth costs when `predictions` is None.
#[pyfunction]
#[pyo3(signature = (manifest, predictions=None, config_json=None))]
fn evaluate_collisions<'py>(
    py: Python<'py>,
    manifest: PathBuf,
    predictions: Option<PathBuf>,
    config_json: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json)?;
    let dataset = features::Dataset::load(&manifest).map_err(py_err)?;
    let frames = cli::collision_frames(&cfg, &dataset, predictions.as_deref()).map_err(py_err)?;
    let report = control::evaluate_collisions(&frames, &cfg.mppi, cfg.eval_seed).map_err(py_err)?;
    serialize(py, &report)
}

#[pyfunction]
fn contrastive_loss(positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let p: Vec<&[f64]> = positives.iter().map(Vec::as_slice).collect();
    let n: Vec<&[f64]> = negatives.iter().map(Vec::as_slice).collect();
    Ok(trainer::contrastive_loss(&p, &n, tau).map_err(py_err)?.loss)
}

#[pyfunction]
fn classification_metrics<'py>(py: Python<'py>, scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Bound<'py, PyAny>> {
    let m = eval::classification_metrics(&scores, &labels).map_err(py_err)?;
    serialize(py, &m)
}

/// Check a feature file; returns `(height, width, dim, stride)`.
#[pyfunction]
fn validate_feature_map(path: PathBuf) -> PyResult<(usize, usize, usize, usize)> {
    let m = features::load_feature_map(&path).map_err(py_err)?;
    Ok((m.height, m.width, m.dim, m.stride))
}

/// Check a mask file; returns one `(area, confidence)` per proposal.
#[pyfunction]
fn validate_masks(path: PathBuf) -> PyResult<Vec<(usize, f32)>> {
    let masks = trv_core::sampling::read_masks(&path).map_err(py_err)?;
    Ok(masks.iter().map(|m| (m.area, m.confidence)).collect())
}

/// Roll the bicycle model forward; returns `(x, y, heading, speed)` per step.
#[pyfunction]
#[pyo3(signature = (state, controls, dt=0.1, wheelbase=2.5))]
fn rollout(
    state: (f64, f64, f64, f64),
    controls: Vec<(f64, f64)>,
    dt: f64,
    wheelbase: f64,
) -> PyResult<Vec<(f64, f64, f64, f64)>> {
    let cfg = MppiConfig {
        horizon_steps: controls.len(),
        dt,
        wheelbase,
        ..MppiConfig::default()
    };
    let s = VehicleState {
        x: state.0,
        y: state.1,
        heading: state.2,
        speed: state.3,
    };
    let u: Vec<Control> = controls
        .iter()
        .map(|&(steer, accel)| Control { steer, accel })
        .collect();
    let traj = control::rollout(s, &u, &cfg).map_err(py_err)?;
    Ok(traj.iter().map(|s| (s.x, s.y, s.heading, s.speed)).collect())
}

/// Decoder and traversability vector loaded from, or produced as, a checkpoint.
#[pyclass(name = "Model", module = "trv")]
struct TrainedModel {
    inner: Checkpoint,
}

#[pymethods]
impl TrainedModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::read(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    #[getter]
    fn dims(&self) -> Vec<usize> {
        self.inner.decoder.dims()
    }

    #[getter]
    fn vector(&self) -> Option<Vec<f64>> {
        self.inner.vector.initialized.then(|| self.inner.vector.z.clone())
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.loss.tau
    }

    #[getter]
    fn omega_mask(&self) -> f64 {
        self.inner.loss.omega_mask
    }

    /// Decode raw feature rows to unit vectors.
    fn decode(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let d = self.inner.decoder.input_dim();
        if let Some(bad) = rows.iter().find(|r| r.len() != d) {
            return Err(py_err(TrvError::DimensionMismatch {
                expected: d,
                actual: bad.len(),
            }));
        }
        Ok(rows.iter().map(|r| self.inner.decoder.forward(r)).collect())
    }

    /// Cosine similarity of each decoded row to the traversability vector.
    fn similarity(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let z = self.vector().ok_or_else(|| py_err(TrvError::UninitializedVector))?;
        Ok(self
            .decode(rows)?
            .iter()
            .map(|f| f.iter().zip(&z).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(dims={:?}, initialized={})",
            self.dims(),
            self.inner.vector.initialized
        )
    }
}

#[pymodule]
fn trv(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TrainedModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(sim_gen, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(adapt, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_collisions, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(classification_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(validate_feature_map, m)?)?;
    m.add_function(wrap_pyfunction!(validate_masks, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    Ok(())
}
