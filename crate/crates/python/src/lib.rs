//! Python bindings: volumes, degradation, metrics, reconstruction, training
//! and the built-in verification suite.

use std::path::PathBuf;

use isoscan_core::checkpoint::Checkpoint;
use isoscan_core::checks::{grad_cases, run_selftest, SelftestOptions};
use isoscan_core::degradation::{degrade as degrade_volume, DegradationProfile};
use isoscan_core::losses::Metrics;
use isoscan_core::moco::Encoder;
use isoscan_core::network::Model;
use isoscan_core::reconstruct::{embed, upsample_nearest_h, Axis, Reconstructor, TileConfig};
use isoscan_core::train::{encoder_window, train_stage1, train_stage2, TrainConfig};
use isoscan_core::volume::{self, generate_phantom, import_raw_u8, transpose_axial_to_h};
use isoscan_core::diffcore::ParamStore;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use serde_json::Value;

create_exception!(isoscan, IsoscanError, PyException);

fn err(e: isoscan_core::Error) -> PyErr {
    IsoscanError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// Scalar volume in `[0, 1]` with dims `(F, h, W)`.
#[pyclass(name = "Volume", module = "isoscan", frozen)]
struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (dims, data, spacing = [1.0, 1.0, 1.0]))]
    fn new(dims: [usize; 3], data: Vec<f32>, spacing: [f32; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: volume::Volume::new(dims, spacing, data).map_err(err)?,
        })
    }

    /// Deterministic synthetic test volume.
    #[staticmethod]
    #[pyo3(signature = (dims, seed = 0))]
    fn phantom(py: Python<'_>, dims: [usize; 3], seed: u64) -> PyResult<Self> {
        let inner = py.detach(|| generate_phantom(dims, seed)).map_err(err)?;
        Ok(Self { inner })
    }

    /// Maps raw 8-bit voxels to `[0, 1]`.
    #[staticmethod]
    #[pyo3(signature = (raw, dims, spacing = [1.0, 1.0, 1.0]))]
    fn from_raw_u8(raw: &[u8], dims: [usize; 3], spacing: [f32; 3]) -> PyResult<Self> {
        Ok(Self {
            inner: import_raw_u8(raw, dims, spacing).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_bytes(raw: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: volume::from_bytes(raw).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let raw = std::fs::read(&path).map_err(|e| IsoscanError::new_err(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&raw)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &volume::to_bytes(&self.inner))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, volume::to_bytes(&self.inner))
            .map_err(|e| IsoscanError::new_err(format!("{}: {e}", path.display())))
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims()
    }

    #[getter]
    fn spacing(&self) -> [f32; 3] {
        self.inner.spacing()
    }

    /// Voxels in `(f, y, x)` row-major order.
    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, f: usize, y: usize, x: usize) -> PyResult<f32> {
        let [nf, nh, nw] = self.inner.dims();
        if f >= nf || y >= nh || x >= nw {
            return Err(PyValueError::new_err(format!("({f}, {y}, {x}) outside {:?}", self.inner.dims())));
        }
        Ok(self.inner.get(f, y, x))
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    /// Moves the section axis into the height slot.
    fn transpose_axial_to_h(&self) -> Self {
        Self {
            inner: transpose_axial_to_h(&self.inner),
        }
    }

    /// Nearest-neighbor upsampling along h.
    fn upsample_nearest(&self, scale: usize) -> PyResult<Self> {
        Ok(Self {
            inner: upsample_nearest_h(&self.inner, scale).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Volume(dims={:?}, spacing={:?})", self.inner.dims(), self.inner.spacing())
    }
}

/// Blurs, subsamples and adds noise along h.
#[pyfunction]
#[pyo3(signature = (volume, blur_sigma = 4.0, scale = 2, noise_sigma = 0.01, filter_size = 8, seed = 0))]
fn degrade(
    py: Python<'_>,
    volume: &PyVolume,
    blur_sigma: f64,
    scale: usize,
    noise_sigma: f64,
    filter_size: usize,
    seed: u64,
) -> PyResult<PyVolume> {
    let p = DegradationProfile {
        filter_size,
        blur_sigma,
        scale,
        noise_sigma,
        seed,
    };
    let x = &volume.inner;
    let inner = py.detach(|| degrade_volume(x, &p)).map_err(err)?;
    Ok(PyVolume { inner })
}

/// `{"psnr", "ssim", "l1"}` of a prediction against its target.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: &PyVolume, target: &PyVolume) -> PyResult<Bound<'py, PyAny>> {
    if pred.inner.dims() != target.inner.dims() {
        return Err(PyValueError::new_err(format!(
            "prediction dims {:?} differ from target dims {:?}",
            pred.inner.dims(),
            target.inner.dims()
        )));
    }
    let m = Metrics::compute(&target.inner.to_f64(), &pred.inner.to_f64(), target.inner.dims()).map_err(err)?;
    to_py(py, &m.to_json())
}

/// A trained reconstruction network paired with its frozen degradation encoder.
#[pyclass(name = "Reconstructor", module = "isoscan")]
struct PyReconstructor {
    model: Model,
    params: ParamStore,
    encoder: Encoder,
    encoder_params: ParamStore,
    window: [usize; 3],
    tiles: TileConfig,
}

#[pymethods]
impl PyReconstructor {
    #[new]
    #[pyo3(signature = (checkpoint, encoder, tile = [16, 32, 64], overlap = 8, halo = 8))]
    fn new(checkpoint: PathBuf, encoder: PathBuf, tile: [usize; 3], overlap: usize, halo: usize) -> PyResult<Self> {
        let (model, params) = Checkpoint::load(&checkpoint).and_then(|c| c.into_model()).map_err(err)?;
        let enc_ckpt = Checkpoint::load(&encoder).map_err(err)?;
        let (enc, encoder_params) = enc_ckpt.into_encoder().map_err(err)?;
        if enc.cfg.embed_dim != model.cfg.embed_dim {
            return Err(IsoscanError::new_err(format!(
                "encoder embeds to {}, model expects {}",
                enc.cfg.embed_dim, model.cfg.embed_dim
            )));
        }
        Ok(Self {
            model,
            params,
            encoder: enc,
            encoder_params,
            window: encoder_window(&enc_ckpt),
            tiles: TileConfig { tile, overlap, halo },
        })
    }

    #[getter]
    fn scale(&self) -> usize {
        self.model.cfg.scale
    }

    /// Degradation embedding of a low-resolution volume along `axis`.
    #[pyo3(signature = (volume, axis = "h"))]
    fn embed(&self, py: Python<'_>, volume: &PyVolume, axis: &str) -> PyResult<Vec<f64>> {
        let axis = parse_axis(axis)?;
        py.detach(|| self.embed_for(&volume.inner, axis)).map_err(err)
    }

    /// Upsamples `volume` along `axis` (`"h"` or `"z"`).
    #[pyo3(signature = (volume, axis = "h"))]
    fn reconstruct(&self, py: Python<'_>, volume: &PyVolume, axis: &str) -> PyResult<PyVolume> {
        let axis = parse_axis(axis)?;
        let x = &volume.inner;
        let inner = py
            .detach(|| {
                let d = self.embed_for(x, axis)?;
                Reconstructor {
                    model: &self.model,
                    params: &self.params,
                    tiles: self.tiles,
                }
                .reconstruct(x, &d, axis)
            })
            .map_err(err)?;
        Ok(PyVolume { inner })
    }
}

impl PyReconstructor {
    fn embed_for(&self, x: &volume::Volume, axis: Axis) -> isoscan_core::Result<Vec<f64>> {
        let seen = match axis {
            Axis::H => x.clone(),
            Axis::Z => transpose_axial_to_h(x),
        };
        embed(&self.encoder, &self.encoder_params, &seen, self.window)
    }
}

fn parse_axis(axis: &str) -> PyResult<Axis> {
    match axis {
        "h" => Ok(Axis::H),
        "z" => Ok(Axis::Z),
        _ => Err(PyValueError::new_err(format!("axis must be \"h\" or \"z\", got {axis:?}"))),
    }
}

fn config(json: Option<&str>, output_dir: PathBuf) -> PyResult<TrainConfig> {
    let mut cfg = match json {
        Some(text) => TrainConfig::from_json(text).map_err(err)?,
        None => TrainConfig::default(),
    };
    cfg.output_dir = output_dir;
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Contrastive encoder pre-training; returns the losses and artifact paths.
#[pyfunction]
#[pyo3(signature = (output_dir, config_json = None, resume = None))]
fn train_moco<'py>(
    py: Python<'py>,
    output_dir: PathBuf,
    config_json: Option<&str>,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json, output_dir)?;
    let r = py.detach(|| train_stage1(&cfg, resume.as_deref())).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({"losses": r.losses, "checkpoint": r.checkpoint, "curve": r.curve}),
    )
}

/// Reconstruction-network training against a frozen encoder.
#[pyfunction]
#[pyo3(signature = (output_dir, encoder, config_json = None, resume = None))]
fn train<'py>(
    py: Python<'py>,
    output_dir: PathBuf,
    encoder: PathBuf,
    config_json: Option<&str>,
    resume: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config(config_json, output_dir)?;
    let r = py.detach(|| train_stage2(&cfg, &encoder, resume.as_deref())).map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "losses": r.losses,
            "val": {"psnr": r.final_val.0, "ssim": r.final_val.1},
            "encoder_checksum_unchanged": r.encoder_checksum_before == r.encoder_checksum_after,
            "checkpoint": r.checkpoint,
            "curve": r.curve,
        }),
    )
}

/// Names of the registered gradient checks.
#[pyfunction]
fn gradcheck_ops() -> Vec<&'static str> {
    grad_cases().iter().map(|c| c.name).collect()
}

/// Worst relative error of one gradient check over `seeds` seeds.
#[pyfunction]
#[pyo3(signature = (op, seeds = 5))]
fn gradcheck<'py>(py: Python<'py>, op: &str, seeds: u64) -> PyResult<Bound<'py, PyAny>> {
    let case = grad_cases()
        .into_iter()
        .find(|c| c.name == op)
        .ok_or_else(|| PyValueError::new_err(format!("unknown op `{op}`")))?;
    let worst = py
        .detach(|| {
            (0..seeds.max(1)).try_fold(0.0f64, |w, s| case.run(s).map(|r| w.max(r.max_rel_err)))
        })
        .map_err(err)?;
    to_py(
        py,
        &serde_json::json!({
            "op": op,
            "max_rel_err": worst,
            "tolerance": case.tolerance,
            "passed": worst < case.tolerance,
        }),
    )
}

/// Runs every built-in invariant check; one dict per check.
#[pyfunction]
fn selftest<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    let out = py.detach(|| run_selftest(&SelftestOptions::default()));
    to_py(py, &Value::Array(out.iter().map(|o| o.to_json()).collect()))
}

#[pymodule]
fn isoscan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IsoscanError", m.py().get_type::<IsoscanError>())?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyReconstructor>()?;
    m.add_function(wrap_pyfunction!(degrade, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(train_moco, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_ops, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}
