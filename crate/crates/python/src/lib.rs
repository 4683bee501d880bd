//! Python bindings. Images cross the boundary as interleaved 8-bit RGB
//! `bytes` plus width and height, or as PNG paths.

use haat_core::cli::{format_config, parse_config, resolve_config};
use haat_core::imaging::{self, ImageBuffer};
use haat_core::optim::AdamConfig;
use haat_core::verification::{self, GradCheckOptions, Level};
use haat_core::{build_model, weights, Haat, ModelConfig, ParamStore, Tensor};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: haat_core::Error) -> PyErr {
    match e {
        haat_core::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Model hyperparameters.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyConfig {
    #[staticmethod]
    fn toy() -> Self {
        PyConfig { inner: ModelConfig::toy() }
    }

    #[staticmethod]
    fn full() -> Self {
        PyConfig { inner: ModelConfig::full() }
    }

    /// `toy`, `full`, or a path to a key=value file.
    #[staticmethod]
    fn resolve(spec: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: resolve_config(spec).map_err(err)? })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig { inner: parse_config(text).map_err(err)? })
    }

    fn to_text(&self) -> String {
        format_config(&self.inner)
    }

    fn param_count(&self) -> PyResult<usize> {
        self.inner.param_count().map_err(err)
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn scale(&self) -> usize {
        self.inner.scale
    }

    #[getter]
    fn window_size(&self) -> usize {
        self.inner.window_size
    }

    #[getter]
    fn num_rdg(&self) -> usize {
        self.inner.num_rdg
    }

    fn __repr__(&self) -> String {
        format!("Config({:?})", self.inner)
    }
}

/// A network together with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    model: Haat,
    store: ParamStore<f32>,
}

fn image_from_bytes(data: &[u8], width: usize, height: usize) -> PyResult<ImageBuffer> {
    ImageBuffer::new(width, height, data.to_vec()).map_err(err)
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyConfig, seed: u64) -> PyResult<Self> {
        let (model, store) = build_model(&config.inner, seed).map_err(err)?;
        Ok(PyModel { model, store })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, store) = weights::load_model(path).map_err(err)?;
        Ok(PyModel { model, store })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        weights::save_weights(&self.store, &self.model.config, path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.model.config }
    }

    fn num_params(&self) -> usize {
        self.store.num_elements()
    }

    /// Upscales interleaved RGB bytes; returns `(bytes, width, height)`.
    fn upscale<'py>(&self, py: Python<'py>, data: &[u8], width: usize, height: usize) -> PyResult<(Bound<'py, PyBytes>, usize, usize)> {
        let img = image_from_bytes(data, width, height)?;
        let y = self.model.upscale(&self.store, &imaging::to_unit_tensor::<f32>(&img)).map_err(err)?;
        let out = imaging::from_unit_tensor(&y).map_err(err)?;
        Ok((PyBytes::new(py, &out.data), out.width, out.height))
    }

    fn upscale_png(&self, input: &str, output: &str) -> PyResult<()> {
        let img = imaging::load_image(input).map_err(err)?;
        let y = self.model.upscale(&self.store, &imaging::to_unit_tensor::<f32>(&img)).map_err(err)?;
        imaging::save_image(&imaging::from_unit_tensor(&y).map_err(err)?, output).map_err(err)
    }

    /// Fits the model to one HR PNG; returns the per-step losses.
    #[pyo3(signature = (hr_path, steps, seed = 0, lr = 2e-4))]
    fn train(&mut self, hr_path: &str, steps: usize, seed: u64, lr: f64) -> PyResult<Vec<f64>> {
        let hr = imaging::to_unit_tensor::<f32>(&imaging::load_image(hr_path).map_err(err)?);
        let adam = AdamConfig { lr, ..AdamConfig::default() };
        let store = std::mem::take(&mut self.store);
        let (curve, store) = verification::train(&self.model, store, &hr, steps, seed, adam).map_err(err)?;
        self.store = store;
        Ok(curve.losses)
    }
}

fn planar(data: &[u8], width: usize, height: usize) -> PyResult<Tensor<f64>> {
    Ok(image_from_bytes(data, width, height)?.to_planar())
}

/// PSNR in dB between two RGB byte images of equal size.
#[pyfunction]
fn psnr(a: &[u8], b: &[u8], width: usize, height: usize) -> PyResult<f64> {
    imaging::psnr(&planar(a, width, height)?, &planar(b, width, height)?).map_err(err)
}

/// Mean SSIM between two RGB byte images of equal size.
#[pyfunction]
fn ssim(a: &[u8], b: &[u8], width: usize, height: usize) -> PyResult<f64> {
    imaging::ssim(&planar(a, width, height)?, &planar(b, width, height)?).map_err(err)
}

/// Bicubic rescale of RGB bytes by an integer factor (upscale).
#[pyfunction]
fn bicubic_upscale<'py>(py: Python<'py>, data: &[u8], width: usize, height: usize, scale: usize) -> PyResult<(Bound<'py, PyBytes>, usize, usize)> {
    let x = imaging::to_unit_tensor::<f64>(&image_from_bytes(data, width, height)?);
    let out = imaging::from_unit_tensor(&imaging::upscale(&x, scale).map_err(err)?).map_err(err)?;
    Ok((PyBytes::new(py, &out.data), out.width, out.height))
}

/// Runs a gradient check level; returns `(name, passed, max_rel_err)`.
#[pyfunction]
#[pyo3(signature = (level = "primitives", seed = 0))]
fn gradcheck(level: &str, seed: u64) -> PyResult<Vec<(String, bool, f64)>> {
    let level: Level = level.parse().map_err(err)?;
    let results = verification::run_level(level, seed, GradCheckOptions::default()).map_err(err)?;
    Ok(results.into_iter().map(|r| (r.name, r.pass, r.max_rel_err)).collect())
}

#[pymodule]
fn haat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_upscale, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
