//! Python bindings: snapshot simulation, NUV spectra, the hierarchical
//! estimator, classical baselines and configuration-driven sweeps.

use num_complex::Complex64;
use pyo3::create_exception;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use nuv_doa::array::{
    build_grid, sample_covariance, simulate_snapshots, snapshot_mean, CMatrix, Scenario,
    SnapshotBatch, SourceModel, UlaGeometry,
};
use nuv_doa::baselines;
use nuv_doa::harness::{self, ScenarioConfig};
use nuv_doa::hierarchical::{estimate_multisource, PipelineConfig};
use nuv_doa::nuv::{self, Init, SolverConfig};
use nuv_doa::superres::{plan_subbands, superres_scan};
use nuv_doa::DoaError;

create_exception!(nuv_doa, NumericalError, PyRuntimeError);

fn to_py(e: DoaError) -> PyErr {
    if e.is_numerical_error() {
        NumericalError::new_err(e.to_string())
    } else if e.is_config_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn parse_model(name: &str) -> PyResult<SourceModel> {
    match name {
        "noncoherent" => Ok(SourceModel::Noncoherent),
        "coherent" => Ok(SourceModel::Coherent),
        "static" => Ok(SourceModel::Static),
        other => Err(PyValueError::new_err(format!(
            "unknown source model `{other}`"
        ))),
    }
}

fn json_to_py(py: Python<'_>, text: &str) -> PyResult<Py<PyAny>> {
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// Snapshots of an N-element array, one column per snapshot.
#[pyclass(name = "SnapshotBatch", module = "nuv_doa", skip_from_py_object)]
#[derive(Clone)]
struct PySnapshotBatch {
    inner: SnapshotBatch,
}

#[pymethods]
impl PySnapshotBatch {
    /// Builds a batch from N rows of L complex samples.
    #[new]
    fn new(rows: Vec<Vec<Complex64>>) -> PyResult<Self> {
        let n = rows.len();
        let l = rows.first().map_or(0, Vec::len);
        if n == 0 || l == 0 || rows.iter().any(|r| r.len() != l) {
            return Err(PyValueError::new_err(
                "rows must be a nonempty rectangular list",
            ));
        }
        let m = CMatrix::from_fn(n, l, |i, j| rows[i][j]);
        Ok(Self {
            inner: SnapshotBatch::from_matrix(m).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_sensors(&self) -> usize {
        self.inner.n_sensors()
    }

    #[getter]
    fn n_snapshots(&self) -> usize {
        self.inner.n_snapshots()
    }

    fn rows(&self) -> Vec<Vec<Complex64>> {
        let m = self.inner.matrix();
        (0..m.nrows())
            .map(|i| m.row(i).iter().copied().collect())
            .collect()
    }

    /// Temporal mean of the snapshots.
    fn mean(&self) -> PyResult<Vec<Complex64>> {
        Ok(snapshot_mean(&self.inner)
            .map_err(to_py)?
            .mean()
            .iter()
            .copied()
            .collect())
    }

    fn covariance(&self) -> PyResult<Vec<Vec<Complex64>>> {
        let c = sample_covariance(&self.inner).map_err(to_py)?;
        Ok((0..c.nrows())
            .map(|i| c.row(i).iter().copied().collect())
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "SnapshotBatch(n_sensors={}, n_snapshots={})",
            self.n_sensors(),
            self.n_snapshots()
        )
    }
}

/// Simulates snapshots for DoAs in degrees; `snr_db=None` means noiseless.
#[pyfunction]
#[pyo3(signature = (doas_deg, n_snapshots, snr_db=None, n_sensors=16, source_model="noncoherent", seed=0))]
fn simulate(
    doas_deg: Vec<f64>,
    n_snapshots: usize,
    snr_db: Option<f64>,
    n_sensors: usize,
    source_model: &str,
    seed: u64,
) -> PyResult<PySnapshotBatch> {
    let geom = UlaGeometry::new(n_sensors).map_err(to_py)?;
    let doas: Vec<f64> = doas_deg.iter().map(|d| d.to_radians()).collect();
    let model = parse_model(source_model)?;
    let sc = match snr_db {
        Some(s) => Scenario::new(geom, doas, n_snapshots, s, model),
        None => Scenario::noiseless(geom, doas, n_snapshots, model),
    }
    .map_err(to_py)?;
    Ok(PySnapshotBatch {
        inner: simulate_snapshots(&sc, seed),
    })
}

/// EM solver settings. `init_constant` replaces the seeded random start.
#[pyclass(name = "SolverConfig", module = "nuv_doa", skip_from_py_object)]
#[derive(Clone)]
struct PySolverConfig {
    inner: SolverConfig,
}

#[pymethods]
impl PySolverConfig {
    #[new]
    #[pyo3(signature = (sigma2, n_snapshots, max_iterations=500, tolerance=1e-6, init_seed=0, init_constant=None))]
    fn new(
        sigma2: f64,
        n_snapshots: usize,
        max_iterations: usize,
        tolerance: f64,
        init_seed: u64,
        init_constant: Option<f64>,
    ) -> PyResult<Self> {
        let init = match init_constant {
            Some(value) => Init::Constant { value },
            None => Init::RandomUniform { seed: init_seed },
        };
        let inner = SolverConfig {
            sigma2,
            n_snapshots,
            max_iterations,
            tolerance,
            init,
        };
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2
    }

    #[getter]
    fn n_snapshots(&self) -> usize {
        self.inner.n_snapshots
    }

    #[getter]
    fn max_iterations(&self) -> usize {
        self.inner.max_iterations
    }

    #[getter]
    fn tolerance(&self) -> f64 {
        self.inner.tolerance
    }

    fn __repr__(&self) -> String {
        format!(
            "SolverConfig(sigma2={}, n_snapshots={}, max_iterations={}, tolerance={})",
            self.inner.sigma2,
            self.inner.n_snapshots,
            self.inner.max_iterations,
            self.inner.tolerance
        )
    }
}

type SpectrumRows = (Vec<f64>, Vec<f64>);

fn spectrum_rows(spec: &nuv::Spectrum) -> SpectrumRows {
    (
        spec.grid()
            .values()
            .iter()
            .map(|a| a.to_degrees())
            .collect(),
        spec.values().to_vec(),
    )
}

/// NUV-SSR spectrum on the full-azimuth grid of `grid_cells` cells.
#[pyfunction]
fn nuv_spectrum(
    batch: &PySnapshotBatch,
    grid_cells: usize,
    config: &PySolverConfig,
) -> PyResult<SpectrumRows> {
    let geom = UlaGeometry::new(batch.inner.n_sensors()).map_err(to_py)?;
    let grid = build_grid(grid_cells).map_err(to_py)?;
    let dict = nuv_doa::array::build_dictionary(&grid, geom);
    let stat = snapshot_mean(&batch.inner).map_err(to_py)?;
    let sol = nuv::solve(&dict, &stat, &config.inner).map_err(to_py)?;
    Ok(spectrum_rows(
        &nuv::spectrum(&sol.moments, &grid).map_err(to_py)?,
    ))
}

/// Sub-band super-resolution spectrum over `[lo_deg, hi_deg]`.
#[pyfunction]
#[pyo3(signature = (batch, lo_deg, hi_deg, config, fine_step_deg=0.01, alpha_deg=0.5, workers=1))]
fn superres_spectrum(
    batch: &PySnapshotBatch,
    lo_deg: f64,
    hi_deg: f64,
    config: &PySolverConfig,
    fine_step_deg: f64,
    alpha_deg: f64,
    workers: usize,
) -> PyResult<SpectrumRows> {
    let geom = UlaGeometry::new(batch.inner.n_sensors()).map_err(to_py)?;
    let plan = plan_subbands(
        lo_deg.to_radians(),
        hi_deg.to_radians(),
        fine_step_deg.to_radians(),
        alpha_deg.to_radians(),
        geom,
    )
    .map_err(to_py)?;
    let stat = snapshot_mean(&batch.inner).map_err(to_py)?;
    let spec = superres_scan(&plan, &stat, &config.inner, workers).map_err(to_py)?;
    Ok(spectrum_rows(&spec))
}

/// Hierarchical estimate of `k` DoAs. Returns `(angles_deg, trace_dict)`.
#[pyfunction]
#[pyo3(signature = (batch, k, config, known_snr_db=None, snr_gate_db=7.0, coarse_grid_cells=1800, fine_step_deg=0.01, alpha_deg=0.5))]
#[allow(clippy::too_many_arguments)]
fn estimate(
    py: Python<'_>,
    batch: &PySnapshotBatch,
    k: usize,
    config: &PySolverConfig,
    known_snr_db: Option<f64>,
    snr_gate_db: f64,
    coarse_grid_cells: usize,
    fine_step_deg: f64,
    alpha_deg: f64,
) -> PyResult<(Vec<f64>, Py<PyAny>)> {
    let mut pipe = PipelineConfig::new(config.inner);
    pipe.known_snr_db = known_snr_db;
    pipe.snr_gate_db = snr_gate_db;
    pipe.coarse_grid_cells = coarse_grid_cells;
    pipe.fine_step = fine_step_deg.to_radians();
    pipe.alpha = alpha_deg.to_radians();
    let est = py
        .detach(|| estimate_multisource(&batch.inner, k, &pipe))
        .map_err(to_py)?;
    let trace = serde_json::to_string(&est.trace).map_err(|e| to_py(e.into()))?;
    Ok((
        est.angles.iter().map(|a| a.to_degrees()).collect(),
        json_to_py(py, &trace)?,
    ))
}

/// Root-MUSIC DoAs in degrees from the batch's sample covariance.
#[pyfunction]
fn root_music(batch: &PySnapshotBatch, k: usize) -> PyResult<Vec<f64>> {
    let geom = UlaGeometry::new(batch.inner.n_sensors()).map_err(to_py)?;
    let cov = sample_covariance(&batch.inner).map_err(to_py)?;
    let angles = baselines::root_music(&cov, k, geom).map_err(to_py)?;
    Ok(angles.iter().map(|a| a.to_degrees()).collect())
}

/// Spectrum of `bartlett`, `mvdr` or `music` on a `grid_cells` grid.
#[pyfunction]
#[pyo3(signature = (batch, method, grid_cells=1800, k=1, diagonal_load=None))]
fn baseline_spectrum(
    batch: &PySnapshotBatch,
    method: &str,
    grid_cells: usize,
    k: usize,
    diagonal_load: Option<f64>,
) -> PyResult<SpectrumRows> {
    let grid = build_grid(grid_cells).map_err(to_py)?;
    let cov = sample_covariance(&batch.inner).map_err(to_py)?;
    let spec = match method {
        "bartlett" => baselines::bartlett_spectrum(&cov, &grid),
        "mvdr" => {
            let load = diagonal_load.unwrap_or_else(|| baselines::default_diagonal_load(&cov));
            baselines::mvdr_spectrum(&cov, &grid, load)
        }
        "music" => baselines::music_spectrum(&cov, &grid, k),
        other => return Err(PyValueError::new_err(format!("unknown baseline `{other}`"))),
    }
    .map_err(to_py)?;
    Ok(spectrum_rows(&spec))
}

/// Permutation-matched errors (degrees) and RMSE.
#[pyfunction]
fn match_and_score(estimates_deg: Vec<f64>, truth_deg: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
    let s = harness::match_and_score(&estimates_deg, &truth_deg).map_err(to_py)?;
    Ok((s.matched_errors_deg, s.rmse_deg))
}

/// Runs a sweep from a TOML scenario; returns one JSON-lines report per cell.
#[pyfunction]
fn run_sweep(py: Python<'_>, config_toml: &str) -> PyResult<Vec<String>> {
    let cfg = ScenarioConfig::from_toml_str(config_toml).map_err(to_py)?;
    let reports = py.detach(|| harness::run_sweep(&cfg)).map_err(to_py)?;
    reports
        .iter()
        .map(|r| r.to_jsonl().map_err(to_py))
        .collect()
}

#[pymodule]
#[pyo3(name = "nuv_doa")]
fn nuv_doa_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySnapshotBatch>()?;
    m.add_class::<PySolverConfig>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(nuv_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(superres_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(root_music, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(match_and_score, m)?)?;
    m.add_function(wrap_pyfunction!(run_sweep, m)?)?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
