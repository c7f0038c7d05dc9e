use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use sketchcomm::data;
use sketchcomm::game::{self, GameConfig};
use sketchcomm::losses;
use sketchcomm::probe;
use sketchcomm::raster::{self, LineSet, RasterConfig};

fn py_err(e: sketchcomm::Error) -> PyErr {
    match e {
        sketchcomm::Error::MissingAsset(msg) => PyFileNotFoundError::new_err(msg),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn raster_config(resolution: usize, sigma2: Option<f64>) -> PyResult<RasterConfig> {
    match sigma2 {
        Some(s) => RasterConfig::new(resolution, s),
        None => RasterConfig::for_resolution(resolution),
    }
    .map_err(py_err)
}

/// Canvas for flat line coordinates, rows of pixels with 1 for paper and 0 for ink.
#[pyfunction]
#[pyo3(signature = (coords, resolution = 224, sigma2 = None))]
fn rasterize(coords: Vec<f64>, resolution: usize, sigma2: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = raster_config(resolution, sigma2)?;
    let lines = LineSet::from_flat(&coords).map_err(py_err)?;
    let img = raster::rasterize(&lines, &cfg).map_err(py_err)?;
    Ok(img.pixels().chunks(resolution).map(<[f64]>::to_vec).collect())
}

/// Gradient of `sum(upstream * canvas)` with respect to the coordinates.
#[pyfunction]
#[pyo3(signature = (coords, upstream, resolution = 224, sigma2 = None))]
fn rasterize_vjp(coords: Vec<f64>, upstream: Vec<f64>, resolution: usize, sigma2: Option<f64>) -> PyResult<Vec<f64>> {
    let cfg = raster_config(resolution, sigma2)?;
    let lines = LineSet::from_flat(&coords).map_err(py_err)?;
    raster::rasterize_vjp(&lines, &cfg, &upstream).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (coords, resolution = 224, sigma2 = None))]
fn render_png<'py>(py: Python<'py>, coords: Vec<f64>, resolution: usize, sigma2: Option<f64>) -> PyResult<Bound<'py, PyBytes>> {
    let cfg = raster_config(resolution, sigma2)?;
    let lines = LineSet::from_flat(&coords).map_err(py_err)?;
    let png = raster::rasterize(&lines, &cfg).and_then(|i| i.to_png()).map_err(py_err)?;
    Ok(PyBytes::new(py, &png))
}

#[pyfunction]
fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    raster::point_segment_distance(p, a, b)
}

#[pyfunction]
fn game_hinge_loss(scores: Vec<f64>, target: usize) -> PyResult<f64> {
    losses::game_hinge_loss(&scores, target).map_err(py_err)
}

/// The twenty probe prompts, drawings first.
#[pyfunction]
fn prompts() -> Vec<String> {
    probe::prompts().into_iter().map(|p| p.text).collect()
}

/// `(target, pool, target_index)` for every image of a split of `n`.
#[pyfunction]
fn enumerate_test_games(n: usize, k: usize, seed: u64) -> PyResult<Vec<(usize, Vec<usize>, usize)>> {
    let games = data::enumerate_test_games(n, k, seed).map_err(py_err)?;
    Ok(games.into_iter().map(|g| (g.target, g.pool, g.target_index)).collect())
}

/// Trains from a JSON config file; returns the outcome as a JSON string.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf) -> PyResult<String> {
    py.detach(|| {
        let cfg = GameConfig::from_json_file(&config)?;
        let outcome = game::train(&cfg)?;
        Ok(serde_json::to_string(&outcome)?)
    })
    .map_err(py_err)
}

/// A trained checkpoint.
#[pyclass(module = "sketchcomm_py", unsendable)]
struct Model {
    inner: game::Model,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| game::Model::load(&path)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Communication rate on the checkpoint's evaluation split.
    fn evaluate(&self, k: usize, games: usize, seed: u64) -> PyResult<f64> {
        let dataset = self.inner.config.data.load_eval().map_err(py_err)?;
        let stats = game::evaluate_comm_rate(&self.inner, &dataset, k, games, seed).map_err(py_err)?;
        Ok(stats.comm_rate)
    }
}

#[pymodule]
fn sketchcomm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(rasterize, m)?)?;
    m.add_function(wrap_pyfunction!(rasterize_vjp, m)?)?;
    m.add_function(wrap_pyfunction!(render_png, m)?)?;
    m.add_function(wrap_pyfunction!(point_segment_distance, m)?)?;
    m.add_function(wrap_pyfunction!(game_hinge_loss, m)?)?;
    m.add_function(wrap_pyfunction!(prompts, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_test_games, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<Model>()?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
