//! Python bindings: grids and fields, EDM coefficients and schedules, CRPS,
//! spectral smoothing, synthetic datasets, checkpoints, the self-checks and
//! the command-line pipelines.

use std::path::PathBuf;

use clap::Parser;
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use downscale_core::diffusion::{self, EdmConfig, NoiseLevel};
use downscale_core::grid::{upsample_bilinear, Channel, Field as CoreField, Grid as CoreGrid};
use downscale_core::net::checkpoint;
use downscale_core::sampler::edm_schedule as core_schedule;
use downscale_core::spectral::{smooth as core_smooth, SmoothingStrength};
use downscale_core::synth::{self, DatasetSpec, TaskParams};
use downscale_core::{checks, verify, Error};

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite { .. } | Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Regular latitude/longitude grid with cell-centre coordinates.
#[pyclass(frozen, from_py_object)]
#[derive(Clone)]
struct Grid(CoreGrid);

#[pymethods]
impl Grid {
    #[new]
    fn new(lat0: f64, lon0: f64, dlat: f64, dlon: f64, height: usize, width: usize) -> PyResult<Self> {
        CoreGrid::new(lat0, lon0, dlat, dlon, height, width).map(Grid).map_err(err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width
    }

    fn lat(&self, i: usize) -> f64 {
        self.0.lat(i)
    }

    fn lon(&self, j: usize) -> f64 {
        self.0.lon(j)
    }

    fn contains(&self, lat: f64, lon: f64) -> bool {
        self.0.contains(lat, lon)
    }

    fn __repr__(&self) -> String {
        let g = &self.0;
        format!(
            "Grid(lat0={}, lon0={}, dlat={}, dlon={}, height={}, width={})",
            g.lat0, g.lon0, g.dlat, g.dlon, g.height, g.width
        )
    }
}

/// Multi-channel field on a grid; data is channel-last, row-major.
#[pyclass(frozen)]
struct Field(CoreField);

#[pymethods]
impl Field {
    /// `channels` holds names, or `(name, unit)` pairs.
    #[new]
    fn new(grid: Grid, channels: Vec<Bound<'_, PyAny>>, data: Vec<f64>) -> PyResult<Self> {
        let channels = channels
            .iter()
            .map(|c| match c.extract::<(String, String)>() {
                Ok((name, unit)) => Ok(Channel::new(name, unit)),
                Err(_) => c.extract::<String>().map(|name| Channel::new(name, "")),
            })
            .collect::<PyResult<Vec<_>>>()?;
        CoreField::new(grid.0, channels, data).map(Field).map_err(err)
    }

    #[getter]
    fn grid(&self) -> Grid {
        Grid(self.0.grid().clone())
    }

    #[getter]
    fn channels(&self) -> Vec<String> {
        self.0.channels().iter().map(|c| c.name.clone()).collect()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let g = self.0.grid();
        (g.height, g.width, self.0.num_channels())
    }

    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, c: usize) -> PyResult<f64> {
        let (h, w, n) = self.shape();
        if i >= h || j >= w || c >= n {
            return Err(PyValueError::new_err(format!("index ({i}, {j}, {c}) outside {h}x{w}x{n}")));
        }
        Ok(self.0.get(i, j, c))
    }

    /// Bilinear interpolation onto `target`, which must lie inside this grid.
    fn upsample(&self, target: &Grid) -> PyResult<Field> {
        upsample_bilinear(&self.0, &target.0).map(Field).map_err(err)
    }

    /// Gaussian spectral low-pass with strength `alpha` in `[0, 0.8]`.
    fn smooth(&self, alpha: f64) -> PyResult<Field> {
        let a = SmoothingStrength::new(alpha).map_err(err)?;
        core_smooth(&self.0, a).map(Field).map_err(err)
    }

    fn __repr__(&self) -> String {
        let (h, w, _) = self.shape();
        format!("Field({h}x{w}, channels={:?})", self.channels())
    }
}

/// Preconditioning coefficients at noise level `sigma`.
#[pyfunction]
#[pyo3(signature = (sigma, sigma_data = 0.5))]
fn precond_coeffs<'py>(py: Python<'py>, sigma: f64, sigma_data: f64) -> PyResult<Bound<'py, PyDict>> {
    let cfg = EdmConfig { sigma_data, ..EdmConfig::default() };
    cfg.validate().map_err(err)?;
    let c = diffusion::precond_coeffs(NoiseLevel::new(sigma).map_err(err)?, &cfg);
    let d = PyDict::new(py);
    d.set_item("c_skip", c.c_skip)?;
    d.set_item("c_out", c.c_out)?;
    d.set_item("c_in", c.c_in)?;
    d.set_item("c_noise", c.c_noise)?;
    Ok(d)
}

/// Effective loss weight `(sigma^2 + sd^2) / (sigma sd)^2`.
#[pyfunction]
#[pyo3(signature = (sigma, sigma_data = 0.5))]
fn loss_weight(sigma: f64, sigma_data: f64) -> PyResult<f64> {
    let cfg = EdmConfig { sigma_data, ..EdmConfig::default() };
    cfg.validate().map_err(err)?;
    Ok(diffusion::loss_weight(NoiseLevel::new(sigma).map_err(err)?, &cfg))
}

/// Decreasing power-law noise levels from `sigma_max` to `sigma_min`.
#[pyfunction]
#[pyo3(signature = (steps = 128, sigma_min = 0.002, sigma_max = 80.0, rho = 7.0))]
fn edm_schedule(steps: usize, sigma_min: f64, sigma_max: f64, rho: f64) -> PyResult<Vec<f64>> {
    core_schedule(steps, sigma_min, sigma_max, rho)
        .map(|s| s.levels().to_vec())
        .map_err(err)
}

/// Ensemble CRPS against one observation.
#[pyfunction]
fn crps_ensemble(members: Vec<f64>, observation: f64) -> PyResult<f64> {
    verify::crps_ensemble(&members, observation).map_err(err)
}

/// `1 - down / base`.
#[pyfunction]
fn skill_score(down: f64, base: f64) -> PyResult<f64> {
    verify::skill_score(down, base).map_err(err)
}

/// Generate a synthetic dataset, write it to `out` and return its manifest.
#[pyfunction]
#[pyo3(signature = (out, task = "gaussian", fine = 16, factor = 4, count = 64, test_count = 16, stations = 32, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn gen_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    task: &str,
    fine: usize,
    factor: usize,
    count: usize,
    test_count: usize,
    stations: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let params = match task {
        "gaussian" => TaskParams::Gaussian { a: 1.0, b: 0.5, s: 1.0 },
        "terrain" => TaskParams::Terrain { roughness: 1.0, bias: 1.0, lapse: 6.0 },
        other => return Err(PyValueError::new_err(format!("unknown task {other:?} (gaussian | terrain)"))),
    };
    let spec = DatasetSpec {
        params,
        fine: CoreGrid::new(52.0, 4.0, -0.05, 0.05, fine, fine).map_err(err)?,
        factor,
        count,
        test_count,
        n_stations: stations,
        obs_noise_std: 0.0,
        lead_time_h: 24,
        seed,
    };
    let manifest = py
        .detach(|| synth::gen_dataset(&spec).and_then(|ds| synth::write_dataset(&out, &ds)))
        .map_err(err)?;
    json_to_py(py, &manifest)
}

/// Manifest of a dataset directory, after verifying every file hash.
#[pyfunction]
fn read_manifest<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let ds = py.detach(|| synth::read_dataset(&path)).map_err(err)?;
    json_to_py(py, &ds.manifest)
}

/// Network configuration and training metadata of a checkpoint.
#[pyfunction]
fn read_checkpoint<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let (net, meta, sha) = checkpoint::read(&path).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("net", json_to_py(py, net.config())?)?;
    d.set_item("meta", json_to_py(py, &meta)?)?;
    d.set_item("parameters", net.params().values().len())?;
    d.set_item("sha256", sha)?;
    Ok(d.into_any())
}

/// Names and descriptions of the self-checks.
#[pyfunction]
fn list_checks() -> Vec<(&'static str, &'static str)> {
    checks::CHECKS.to_vec()
}

/// Run one self-check; returns `(passed, detail)`.
#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn run_check(py: Python<'_>, name: &str, seed: u64) -> PyResult<(bool, String)> {
    let cfg = checks::CheckConfig { seed, ..checks::CheckConfig::default() };
    py.detach(|| checks::run(name, &cfg))
        .map(|o| (o.passed, o.detail))
        .ok_or_else(|| PyValueError::new_err(format!("unknown check {name:?}")))
}

/// Run the command-line tool in-process, e.g. `run_cli(["train", "--dataset", d])`.
/// Returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<i32> {
    let argv = std::iter::once("edm-downscale".to_string()).chain(args);
    let cli = match downscale_cli::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => return Err(PyValueError::new_err(e.to_string())),
    };
    Ok(match py.detach(|| downscale_cli::execute(cli)) {
        Ok(()) => 0,
        Err(f) => f.code(),
    })
}

#[pymodule]
fn edm_downscale(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Grid>()?;
    m.add_class::<Field>()?;
    m.add_function(wrap_pyfunction!(precond_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(loss_weight, m)?)?;
    m.add_function(wrap_pyfunction!(edm_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(crps_ensemble, m)?)?;
    m.add_function(wrap_pyfunction!(skill_score, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(read_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(list_checks, m)?)?;
    m.add_function(wrap_pyfunction!(run_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
