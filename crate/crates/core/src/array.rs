//! Uniform linear array model: geometry, angle grids, steering vectors and
//! dictionaries, snapshot simulation and the statistics computed from snapshots.
//!
//! Angles are radians everywhere in this module. The azimuth domain is the
//! half-open interval `[-pi/2, pi/2)`.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DoaError, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Default array size used when a configuration does not say otherwise.
pub const DEFAULT_SENSORS: usize = 16;

// Grid points closer than this to +pi/2 count as outside the domain.
const EDGE_TOL: f64 = 1e-12;

/// True when `theta` lies in the azimuth domain `[-pi/2, pi/2)`.
pub fn in_azimuth(theta: f64) -> bool {
    (-FRAC_PI_2..FRAC_PI_2).contains(&theta)
}

pub fn deg(rad: f64) -> f64 {
    rad.to_degrees()
}

pub fn rad(deg: f64) -> f64 {
    deg.to_radians()
}

/// Half-wavelength uniform linear array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct UlaGeometry {
    n_sensors: usize,
}

impl UlaGeometry {
    pub fn new(n_sensors: usize) -> Result<Self> {
        if n_sensors < 2 {
            return Err(DoaError::domain(format!(
                "array needs at least 2 sensors, got {n_sensors}"
            )));
        }
        Ok(Self { n_sensors })
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }
}

impl Default for UlaGeometry {
    fn default() -> Self {
        Self {
            n_sensors: DEFAULT_SENSORS,
        }
    }
}

impl TryFrom<usize> for UlaGeometry {
    type Error = DoaError;
    fn try_from(n: usize) -> Result<Self> {
        Self::new(n)
    }
}

impl From<UlaGeometry> for usize {
    fn from(g: UlaGeometry) -> usize {
        g.n_sensors
    }
}

/// Uniformly spaced, strictly increasing angles inside the azimuth domain.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid {
    values: Vec<f64>,
    step: f64,
    origin: f64,
}

impl AngleGrid {
    /// `count` points `origin + i * step`. Every point must lie in the azimuth domain.
    pub fn uniform(origin: f64, step: f64, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(DoaError::domain("angle grid must have at least one point"));
        }
        if !(step > 0.0) || !step.is_finite() {
            return Err(DoaError::domain(format!(
                "grid step must be positive, got {step}"
            )));
        }
        let values: Vec<f64> = (0..count).map(|i| origin + i as f64 * step).collect();
        let last = values[count - 1];
        if !in_azimuth(origin) || !in_azimuth(last) || last >= FRAC_PI_2 - EDGE_TOL {
            return Err(DoaError::domain(format!(
                "grid [{:.6}, {:.6}] rad leaves the azimuth domain",
                origin, last
            )));
        }
        Ok(Self {
            values,
            step,
            origin,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn origin(&self) -> f64 {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the grid point closest to `theta` (lower index on ties).
    pub fn nearest_index(&self, theta: f64) -> usize {
        let raw = ((theta - self.origin) / self.step).round();
        raw.clamp(0.0, (self.len() - 1) as f64) as usize
    }
}

/// Full-azimuth grid with `m_cells` equidistant cells: `values[m] = m * pi/M - pi/2`.
pub fn build_grid(m_cells: usize) -> Result<AngleGrid> {
    if m_cells < 2 {
        return Err(DoaError::domain(format!(
            "full grid needs at least 2 cells, got {m_cells}"
        )));
    }
    let step = PI / m_cells as f64;
    let values: Vec<f64> = (0..m_cells).map(|m| m as f64 * step - FRAC_PI_2).collect();
    Ok(AngleGrid {
        values,
        step,
        origin: -FRAC_PI_2,
    })
}

/// Inclusive uniform grid from `lo` to `hi`, clipped to the azimuth domain.
pub fn build_band_grid(lo: f64, hi: f64, step: f64) -> Result<AngleGrid> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(DoaError::domain(format!(
            "grid step must be positive, got {step}"
        )));
    }
    if !(lo < hi) {
        return Err(DoaError::domain(format!("empty interval [{lo}, {hi}]")));
    }
    let lo = lo.max(-FRAC_PI_2);
    let hi = hi.min(FRAC_PI_2);
    if lo >= FRAC_PI_2 - EDGE_TOL || hi < lo {
        return Err(DoaError::domain(
            "interval is empty after clipping to the azimuth",
        ));
    }
    // The small slack keeps endpoints that land on the lattice up to rounding.
    let mut count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    while count > 0 && lo + (count - 1) as f64 * step >= FRAC_PI_2 - EDGE_TOL {
        count -= 1;
    }
    if count == 0 {
        return Err(DoaError::domain(
            "interval is empty after clipping to the azimuth",
        ));
    }
    AngleGrid::uniform(lo, step, count)
}

pub(crate) fn steering_unchecked(theta: f64, n_sensors: usize) -> CVector {
    let s = theta.sin();
    CVector::from_iterator(
        n_sensors,
        (0..n_sensors).map(|n| C64::from_polar(1.0, -PI * n as f64 * s)),
    )
}

/// Array response `a(theta)` with element `n` equal to `exp(-i pi n sin theta)`.
pub fn steering_vector(theta: f64, geometry: UlaGeometry) -> Result<CVector> {
    if !in_azimuth(theta) {
        return Err(DoaError::domain(format!(
            "angle {theta} rad is outside [-pi/2, pi/2)"
        )));
    }
    Ok(steering_unchecked(theta, geometry.n_sensors()))
}

/// Steering vectors of `angles` stacked as columns.
pub fn steering_matrix(angles: &[f64], geometry: UlaGeometry) -> Result<CMatrix> {
    let n = geometry.n_sensors();
    let mut out = CMatrix::zeros(n, angles.len());
    for (k, &theta) in angles.iter().enumerate() {
        out.set_column(k, &steering_vector(theta, geometry)?);
    }
    Ok(out)
}

/// Over-complete dictionary of steering vectors over an angle grid.
#[derive(Debug, Clone)]
pub struct SteeringDictionary {
    matrix: CMatrix,
    grid: AngleGrid,
    geometry: UlaGeometry,
}

impl SteeringDictionary {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn geometry(&self) -> UlaGeometry {
        self.geometry
    }
}

pub fn build_dictionary(grid: &AngleGrid, geometry: UlaGeometry) -> SteeringDictionary {
    let n = geometry.n_sensors();
    let mut matrix = CMatrix::zeros(n, grid.len());
    for (m, &theta) in grid.values().iter().enumerate() {
        matrix.set_column(m, &steering_unchecked(theta, n));
    }
    SteeringDictionary {
        matrix,
        grid: grid.clone(),
        geometry,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceModel {
    /// Independent unit-power complex Gaussian waveform per source.
    #[default]
    Noncoherent,
    /// One shared complex Gaussian waveform, unit gain on every source.
    Coherent,
    /// Each source keeps one unit-modulus amplitude with uniform random phase
    /// for the whole batch; only the noise changes between snapshots.
    Static,
}

/// Noise variance for unit-power sources at the given per-element SNR.
pub fn noise_variance_from_snr(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// A complete description of one simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    geometry: UlaGeometry,
    true_doas: Vec<f64>,
    n_snapshots: usize,
    snr_db: f64,
    source_model: SourceModel,
    noise_variance: f64,
}

impl Scenario {
    pub fn new(
        geometry: UlaGeometry,
        true_doas: Vec<f64>,
        n_snapshots: usize,
        snr_db: f64,
        source_model: SourceModel,
    ) -> Result<Self> {
        if !snr_db.is_finite() {
            return Err(DoaError::domain(
                "snr_db must be finite; use Scenario::noiseless",
            ));
        }
        Self::validated(
            geometry,
            true_doas,
            n_snapshots,
            snr_db,
            source_model,
            noise_variance_from_snr(snr_db),
        )
    }

    /// Scenario without additive noise (`snr_db` reported as +inf).
    pub fn noiseless(
        geometry: UlaGeometry,
        true_doas: Vec<f64>,
        n_snapshots: usize,
        source_model: SourceModel,
    ) -> Result<Self> {
        Self::validated(
            geometry,
            true_doas,
            n_snapshots,
            f64::INFINITY,
            source_model,
            0.0,
        )
    }

    fn validated(
        geometry: UlaGeometry,
        true_doas: Vec<f64>,
        n_snapshots: usize,
        snr_db: f64,
        source_model: SourceModel,
        noise_variance: f64,
    ) -> Result<Self> {
        let k = true_doas.len();
        if k == 0 || k >= geometry.n_sensors() {
            return Err(DoaError::domain(format!(
                "need 1 <= K < N sources, got K={k}, N={}",
                geometry.n_sensors()
            )));
        }
        if let Some(bad) = true_doas.iter().find(|t| !in_azimuth(**t)) {
            return Err(DoaError::domain(format!(
                "DoA {bad} rad outside [-pi/2, pi/2)"
            )));
        }
        for i in 0..k {
            for j in i + 1..k {
                if true_doas[i] == true_doas[j] {
                    return Err(DoaError::domain("true DoAs must be pairwise distinct"));
                }
            }
        }
        if n_snapshots == 0 {
            return Err(DoaError::domain("need at least one snapshot"));
        }
        Ok(Self {
            geometry,
            true_doas,
            n_snapshots,
            snr_db,
            source_model,
            noise_variance,
        })
    }

    pub fn geometry(&self) -> UlaGeometry {
        self.geometry
    }
    pub fn true_doas(&self) -> &[f64] {
        &self.true_doas
    }
    pub fn n_sources(&self) -> usize {
        self.true_doas.len()
    }
    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
    }
    pub fn snr_db(&self) -> f64 {
        self.snr_db
    }
    pub fn source_model(&self) -> SourceModel {
        self.source_model
    }
    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }
}

/// `L` snapshots of an `N`-element array, one snapshot per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBatch {
    data: CMatrix,
}

impl SnapshotBatch {
    pub fn from_matrix(data: CMatrix) -> Result<Self> {
        if data.ncols() == 0 || data.nrows() == 0 {
            return Err(DoaError::domain("snapshot batch must be non-empty"));
        }
        Ok(Self { data })
    }

    pub fn from_snapshots(snapshots: &[CVector]) -> Result<Self> {
        let first = snapshots
            .first()
            .ok_or_else(|| DoaError::domain("snapshot batch must be non-empty"))?;
        if snapshots.iter().any(|s| s.len() != first.len()) {
            return Err(DoaError::domain("snapshots must share one length"));
        }
        Self::from_matrix(CMatrix::from_columns(snapshots))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.data
    }
    pub fn n_snapshots(&self) -> usize {
        self.data.ncols()
    }
    pub fn n_sensors(&self) -> usize {
        self.data.nrows()
    }
    pub fn snapshot(&self, t: usize) -> CVector {
        self.data.column(t).into_owned()
    }

    /// Batch holding the snapshots of `self` followed by those of `other`.
    pub fn concat(&self, other: &SnapshotBatch) -> Result<Self> {
        if self.n_sensors() != other.n_sensors() {
            return Err(DoaError::domain(
                "cannot concatenate batches of different array sizes",
            ));
        }
        let mut data = CMatrix::zeros(self.n_sensors(), self.n_snapshots() + other.n_snapshots());
        data.columns_mut(0, self.n_snapshots())
            .copy_from(&self.data);
        data.columns_mut(self.n_snapshots(), other.n_snapshots())
            .copy_from(&other.data);
        Ok(Self { data })
    }
}

/// Temporal mean of the snapshots together with the snapshot count.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStatistic {
    mean: CVector,
    n_snapshots: usize,
}

impl SufficientStatistic {
    pub fn new(mean: CVector, n_snapshots: usize) -> Result<Self> {
        if n_snapshots == 0 || mean.is_empty() {
            return Err(DoaError::domain(
                "sufficient statistic needs L >= 1 and N >= 1",
            ));
        }
        Ok(Self { mean, n_snapshots })
    }

    pub fn mean(&self) -> &CVector {
        &self.mean
    }
    pub fn n_snapshots(&self) -> usize {
        self.n_snapshots
    }
    pub fn n_sensors(&self) -> usize {
        self.mean.len()
    }
}

fn complex_normal(rng: &mut ChaCha8Rng, variance: f64) -> C64 {
    let sd = (variance / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    C64::new(sd * re, sd * im)
}

/// Draws `y(t) = A(theta) s(t) + v(t)` for `t = 1..L`.
///
/// Per snapshot the generator consumes the source draws first (K values, or one
/// for the coherent model) and then N noise draws, so a seed fixes the batch.
pub fn simulate_snapshots(scenario: &Scenario, seed: u64) -> SnapshotBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = scenario.geometry.n_sensors();
    let k = scenario.n_sources();
    let steering: Vec<CVector> = scenario
        .true_doas
        .iter()
        .map(|&t| steering_unchecked(t, n))
        .collect();
    let mut data = CMatrix::zeros(n, scenario.n_snapshots);
    let mut amplitudes = vec![C64::new(0.0, 0.0); k];
    for t in 0..scenario.n_snapshots {
        match scenario.source_model {
            SourceModel::Noncoherent => {
                for a in amplitudes.iter_mut() {
                    *a = complex_normal(&mut rng, 1.0);
                }
            }
            SourceModel::Coherent => {
                let shared = complex_normal(&mut rng, 1.0);
                amplitudes.iter_mut().for_each(|a| *a = shared);
            }
            SourceModel::Static if t == 0 => {
                for a in amplitudes.iter_mut() {
                    *a = C64::from_polar(1.0, rng.random_range(-PI..PI));
                }
            }
            SourceModel::Static => {}
        }
        let mut col = data.column_mut(t);
        for (a, s) in steering.iter().zip(&amplitudes) {
            col.axpy(*s, a, C64::new(1.0, 0.0));
        }
        if scenario.noise_variance > 0.0 {
            for x in col.iter_mut() {
                *x += complex_normal(&mut rng, scenario.noise_variance);
            }
        }
    }
    SnapshotBatch { data }
}

pub fn snapshot_mean(batch: &SnapshotBatch) -> Result<SufficientStatistic> {
    let l = batch.n_snapshots();
    if l == 0 {
        return Err(DoaError::domain("empty snapshot batch"));
    }
    let mut mean = CVector::zeros(batch.n_sensors());
    for col in batch.data.column_iter() {
        mean += col;
    }
    mean.unscale_mut(l as f64);
    SufficientStatistic::new(mean, l)
}

/// `(1/L) sum_t y(t) y(t)^H`, symmetrized to be exactly Hermitian.
pub fn sample_covariance(batch: &SnapshotBatch) -> Result<CMatrix> {
    let l = batch.n_snapshots();
    if l == 0 {
        return Err(DoaError::domain("empty snapshot batch"));
    }
    let y = &batch.data;
    let mut cov = y * y.adjoint();
    cov.unscale_mut(l as f64);
    Ok(hermitian_part(&cov))
}

/// `(M + M^H) / 2`.
pub(crate) fn hermitian_part(m: &CMatrix) -> CMatrix {
    let mut out = m + m.adjoint();
    out.unscale_mut(2.0);
    for i in 0..out.nrows() {
        out[(i, i)].im = 0.0;
    }
    out
}
