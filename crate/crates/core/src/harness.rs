//! Monte-Carlo harness: scenario configuration, trials, sweeps, reports and
//! calibration tables.
//!
//! Every output is a pure function of the configuration. Trial `i` uses the
//! seed `seed + i`, and all methods and SNR points of that trial share the
//! same DoA draw and the same underlying Gaussian draws.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{
    build_dictionary, build_grid, sample_covariance, simulate_snapshots, snapshot_mean, Scenario,
    SnapshotBatch, SourceModel, UlaGeometry, DEFAULT_SENSORS,
};
use crate::baselines::{
    bartlett_spectrum, default_diagonal_load, music_spectrum, mvdr_spectrum, root_music,
};
use crate::error::{DoaError, Result};
use crate::hierarchical::{
    coarse_estimate, estimate_multisource, estimate_unknown_k, ErrorStdEntry, ErrorStdTable,
    PipelineConfig,
};
use crate::nuv::{
    select_peaks, solve, spectrum, Init, PeakRule, SolverConfig, Spectrum, DEFAULT_MAX_ITERATIONS,
    DEFAULT_TOLERANCE,
};
use crate::superres::{with_workers, DEFAULT_ALPHA_DEG, DEFAULT_FINE_STEP_DEG};

pub const SCHEMA_VERSION: u32 = 1;
pub const MAX_MATCH_SOURCES: usize = 8;
/// Fewer successful calibration trials than this flag the table entry.
pub const MIN_CONFIDENT_TRIALS: usize = 30;
/// Smallest epsilon written to a calibrated table, degrees.
pub const MIN_EPSILON_DEG: f64 = 1e-6;
const DOA_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NuvDoa,
    NuvSsrFlat,
    Bartlett,
    Mvdr,
    Music,
    RootMusic,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NuvDoa,
        Method::NuvSsrFlat,
        Method::Bartlett,
        Method::Mvdr,
        Method::Music,
        Method::RootMusic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::NuvDoa => "nuv_doa",
            Method::NuvSsrFlat => "nuv_ssr_flat",
            Method::Bartlett => "bartlett",
            Method::Mvdr => "mvdr",
            Method::Music => "music",
            Method::RootMusic => "root_music",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = DoaError;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| DoaError::Config(format!("unknown method `{s}`")))
    }
}

/// How the true DoAs of a trial are drawn. Angles in degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DoaSampling {
    Fixed {
        doas_deg: Vec<f64>,
    },
    /// Independent uniform draws in `[lo, hi]`, redrawn until pairwise
    /// separated by at least `min_separation_deg`.
    UniformRange {
        lo_deg: f64,
        hi_deg: f64,
        #[serde(default)]
        min_separation_deg: f64,
    },
    /// Each source uniform in `75 <= |theta| <= 85` with a random side.
    Boundary {
        #[serde(default)]
        min_separation_deg: f64,
    },
    /// First DoA uniform in `[lo, hi - (K-1) * separation]`, the rest at
    /// fixed spacing above it.
    Spaced {
        lo_deg: f64,
        hi_deg: f64,
        separation_deg: f64,
    },
    /// Distinct points of the `cells`-cell full-azimuth grid inside `[lo, hi]`.
    GridPoints {
        cells: usize,
        lo_deg: f64,
        hi_deg: f64,
    },
}

impl Default for DoaSampling {
    fn default() -> Self {
        DoaSampling::UniformRange {
            lo_deg: -75.0,
            hi_deg: 75.0,
            min_separation_deg: 0.0,
        }
    }
}

const MAX_REJECTIONS: usize = 10_000;

/// Grid angles in degrees, exactly as [`build_grid`] places them, inside `[lo, hi]`.
fn grid_points_in(cells: usize, lo_deg: f64, hi_deg: f64) -> Result<Vec<f64>> {
    if cells < 2 {
        return Err(DoaError::Config(
            "grid_points needs at least 2 cells".into(),
        ));
    }
    Ok(build_grid(cells)?
        .values()
        .iter()
        .map(|a| a.to_degrees())
        .filter(|d| (lo_deg..=hi_deg).contains(d))
        .collect())
}

impl DoaSampling {
    fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(DoaError::Config(m));
        match self {
            DoaSampling::Fixed { doas_deg } => {
                if doas_deg.len() != k {
                    return bad(format!(
                        "fixed sampling lists {} DoAs but K={k}",
                        doas_deg.len()
                    ));
                }
            }
            DoaSampling::UniformRange {
                lo_deg,
                hi_deg,
                min_separation_deg,
            } => {
                if !(lo_deg <= hi_deg) || *lo_deg < -90.0 || *hi_deg >= 90.0 {
                    return bad(format!(
                        "uniform range [{lo_deg}, {hi_deg}] must lie in [-90, 90)"
                    ));
                }
                if *min_separation_deg < 0.0
                    || (k - 1) as f64 * min_separation_deg > hi_deg - lo_deg
                {
                    return bad("min_separation_deg cannot be met inside the range".into());
                }
            }
            DoaSampling::Boundary { min_separation_deg } => {
                if *min_separation_deg < 0.0 || (k - 1) as f64 * min_separation_deg > 20.0 {
                    return bad("min_separation_deg cannot be met in the boundary regime".into());
                }
            }
            DoaSampling::Spaced {
                lo_deg,
                hi_deg,
                separation_deg,
            } => {
                if !(*separation_deg > 0.0)
                    || *lo_deg < -90.0
                    || *hi_deg >= 90.0
                    || lo_deg + (k - 1) as f64 * separation_deg > *hi_deg
                {
                    return bad("spaced sampling does not fit in its range".into());
                }
            }
            DoaSampling::GridPoints {
                cells,
                lo_deg,
                hi_deg,
            } => {
                let inside = grid_points_in(*cells, *lo_deg, *hi_deg)?;
                if inside.len() < k {
                    return bad(format!(
                        "only {} grid points in [{lo_deg}, {hi_deg}]",
                        inside.len()
                    ));
                }
            }
        }
        Ok(())
    }

    /// Draws `k` DoAs in degrees, sorted ascending.
    pub fn sample(&self, k: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        let separated = |v: &[f64], sep: f64| {
            v.iter()
                .enumerate()
                .all(|(i, a)| v[..i].iter().all(|b| (a - b).abs() >= sep && a != b))
        };
        let mut out = match self {
            DoaSampling::Fixed { doas_deg } => doas_deg.clone(),
            DoaSampling::UniformRange {
                lo_deg,
                hi_deg,
                min_separation_deg,
            } => {
                let mut tries = 0;
                loop {
                    let v: Vec<f64> = (0..k)
                        .map(|_| {
                            if lo_deg == hi_deg {
                                *lo_deg
                            } else {
                                rng.random_range(*lo_deg..*hi_deg)
                            }
                        })
                        .collect();
                    if separated(&v, *min_separation_deg) {
                        break v;
                    }
                    tries += 1;
                    if tries > MAX_REJECTIONS {
                        return Err(DoaError::Config("could not draw separated DoAs".into()));
                    }
                }
            }
            DoaSampling::Boundary { min_separation_deg } => {
                let mut tries = 0;
                loop {
                    let v: Vec<f64> = (0..k)
                        .map(|_| {
                            let mag = rng.random_range(75.0..85.0);
                            if rng.random_bool(0.5) {
                                mag
                            } else {
                                -mag
                            }
                        })
                        .collect();
                    if separated(&v, *min_separation_deg) {
                        break v;
                    }
                    tries += 1;
                    if tries > MAX_REJECTIONS {
                        return Err(DoaError::Config("could not draw separated DoAs".into()));
                    }
                }
            }
            DoaSampling::Spaced {
                lo_deg,
                hi_deg,
                separation_deg,
            } => {
                let top = hi_deg - (k - 1) as f64 * separation_deg;
                let first = if top > *lo_deg {
                    rng.random_range(*lo_deg..top)
                } else {
                    *lo_deg
                };
                (0..k).map(|i| first + i as f64 * separation_deg).collect()
            }
            DoaSampling::GridPoints {
                cells,
                lo_deg,
                hi_deg,
            } => {
                let mut pool = grid_points_in(*cells, *lo_deg, *hi_deg)?;
                if pool.len() < k {
                    return Err(DoaError::Config("not enough grid points in range".into()));
                }
                (0..k)
                    .map(|_| pool.swap_remove(rng.random_range(0..pool.len())))
                    .collect()
            }
        };
        out.sort_by(f64::total_cmp);
        Ok(out)
    }
}

/// Per-SNR sigma2 choice, as produced by [`calibrate_sigma2`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sigma2Entry {
    pub snr_db: f64,
    pub sigma2: f64,
    /// Every candidate tried at this SNR, ascending.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub candidates: Vec<CandidateScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateScore {
    pub sigma2: f64,
    /// Absent when no trial produced a full match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_deg: Option<f64>,
    pub detection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub sigma2: f64,
    /// Overrides `sigma2` with the entry nearest in SNR.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma2_by_snr: Vec<Sigma2Entry>,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub init: Init,
}

fn default_max_iterations() -> usize {
    DEFAULT_MAX_ITERATIONS
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            sigma2_by_snr: Vec::new(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            init: Init::default(),
        }
    }
}

impl SolverSection {
    pub fn sigma2_at(&self, snr_db: f64) -> f64 {
        self.sigma2_by_snr
            .iter()
            .min_by(|a, b| {
                (a.snr_db - snr_db)
                    .abs()
                    .total_cmp(&(b.snr_db - snr_db).abs())
            })
            .map_or(self.sigma2, |e| e.sigma2)
    }

    pub fn solver_config(&self, snr_db: f64, n_snapshots: usize) -> SolverConfig {
        SolverConfig {
            sigma2: self.sigma2_at(snr_db),
            n_snapshots,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            init: self.init,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub snr_gate_db: f64,
    pub coarse_grid_cells: usize,
    pub fine_step_deg: f64,
    pub alpha_deg: f64,
    /// sigma2 for the coarse NUV pass; defaults to the solver's.
    pub coarse_sigma2: Option<f64>,
    /// Inline epsilon table; the shipped default when absent.
    pub error_table: Option<ErrorStdTable>,
    /// Hand the scenario SNR to the pipeline instead of estimating it.
    pub assume_known_snr: bool,
    /// Experimental unknown-K mode: coarse NUV peaks above this threshold.
    pub unknown_k_threshold: Option<f64>,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            snr_gate_db: crate::hierarchical::DEFAULT_SNR_GATE_DB,
            coarse_grid_cells: crate::hierarchical::DEFAULT_COARSE_GRID_CELLS,
            fine_step_deg: DEFAULT_FINE_STEP_DEG,
            alpha_deg: DEFAULT_ALPHA_DEG,
            coarse_sigma2: None,
            error_table: None,
            assume_known_snr: true,
            unknown_k_threshold: None,
        }
    }
}

/// Grid used by the flat-grid NUV method and the spectral baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub cells: usize,
    /// MVDR diagonal loading; `1e-6 * tr(R) / N` when absent.
    pub mvdr_load: Option<f64>,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            cells: crate::hierarchical::DEFAULT_COARSE_GRID_CELLS,
            mvdr_load: None,
        }
    }
}

fn default_sensors() -> usize {
    DEFAULT_SENSORS
}

fn default_one() -> usize {
    1
}

fn default_threshold() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    #[serde(default = "default_sensors")]
    pub n_sensors: usize,
    #[serde(default = "default_one")]
    pub n_sources: usize,
    pub n_snapshots: usize,
    pub snr_db: f64,
    /// Drop the additive noise; `snr_db` still drives the gate and epsilon lookup.
    #[serde(default)]
    pub noiseless: bool,
    #[serde(default)]
    pub snr_sweep: Vec<f64>,
    #[serde(default)]
    pub source_model: SourceModel,
    pub methods: Vec<Method>,
    #[serde(default = "default_one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub doa_sampling: DoaSampling,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub grid: GridSection,
    /// A trial is a detection when every matched error is below this, degrees.
    #[serde(default = "default_threshold")]
    pub detection_threshold_deg: f64,
    /// 0 = all cores, 1 = sequential.
    #[serde(default = "default_one")]
    pub workers: usize,
    /// Wall-clock timing makes outputs non-reproducible, so it is opt-in.
    #[serde(default)]
    pub record_runtime: bool,
}

impl ScenarioConfig {
    /// Single-method configuration with defaults everywhere else.
    pub fn new(method: Method, n_snapshots: usize, snr_db: f64) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            n_sensors: DEFAULT_SENSORS,
            n_sources: 1,
            n_snapshots,
            snr_db,
            noiseless: false,
            snr_sweep: Vec::new(),
            source_model: SourceModel::default(),
            methods: vec![method],
            trials: 1,
            seed: 0,
            doa_sampling: DoaSampling::default(),
            solver: SolverSection::default(),
            pipeline: PipelineSection::default(),
            grid: GridSection::default(),
            detection_threshold_deg: 1.0,
            workers: 1,
            record_runtime: false,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| DoaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| DoaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DoaError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DoaError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.n_sensors < 2 {
            return bad("n_sensors must be at least 2".into());
        }
        if self.n_sources == 0 || self.n_sources >= self.n_sensors {
            return bad(format!(
                "need 1 <= n_sources < n_sensors, got {}",
                self.n_sources
            ));
        }
        if self.n_sources > MAX_MATCH_SOURCES {
            return bad(format!(
                "scoring supports at most {MAX_MATCH_SOURCES} sources"
            ));
        }
        if self.n_snapshots == 0 || self.trials == 0 {
            return bad("n_snapshots and trials must be positive".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if !self.snr_db.is_finite() || self.snr_sweep.iter().any(|s| !s.is_finite()) {
            return bad("SNR values must be finite; use `noiseless = true`".into());
        }
        if !(self.detection_threshold_deg > 0.0) {
            return bad("detection_threshold_deg must be positive".into());
        }
        if !(self.solver.sigma2 > 0.0)
            || self.solver.sigma2_by_snr.iter().any(|e| !(e.sigma2 > 0.0))
        {
            return bad("sigma2 must be positive".into());
        }
        if self.grid.cells < 2 {
            return bad("grid.cells must be at least 2".into());
        }
        self.doa_sampling.validate(self.n_sources)?;
        for snr in self.snr_points() {
            self.solver
                .solver_config(snr, self.n_snapshots)
                .validate()?;
            if self.methods.contains(&Method::NuvDoa) {
                self.pipeline_config(snr)?.validate()?;
            }
        }
        Ok(())
    }

    /// `snr_sweep` when nonempty, else `[snr_db]`.
    pub fn snr_points(&self) -> Vec<f64> {
        if self.snr_sweep.is_empty() {
            vec![self.snr_db]
        } else {
            self.snr_sweep.clone()
        }
    }

    pub fn geometry(&self) -> Result<UlaGeometry> {
        UlaGeometry::new(self.n_sensors)
    }

    pub fn pipeline_config(&self, snr_db: f64) -> Result<PipelineConfig> {
        let p = &self.pipeline;
        let solver = self.solver.solver_config(snr_db, self.n_snapshots);
        let mut cfg = PipelineConfig::new(solver);
        cfg.snr_gate_db = p.snr_gate_db;
        cfg.coarse_grid_cells = p.coarse_grid_cells;
        cfg.fine_step = p.fine_step_deg.to_radians();
        cfg.alpha = p.alpha_deg.to_radians();
        cfg.coarse_solver = p.coarse_sigma2.map(|s| SolverConfig {
            sigma2: s,
            ..solver
        });
        if let Some(t) = &p.error_table {
            cfg.error_table = t.clone();
        }
        cfg.known_snr_db = p.assume_known_snr.then_some(snr_db);
        cfg.workers = 1;
        Ok(cfg)
    }

    pub fn trial_seed(&self, trial_index: usize) -> u64 {
        self.seed.wrapping_add(trial_index as u64)
    }

    /// DoAs (degrees) and scenario of one trial at one SNR.
    pub fn trial_scenario(&self, snr_db: f64, trial_index: usize) -> Result<(Vec<f64>, Scenario)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.trial_seed(trial_index));
        rng.set_stream(DOA_STREAM);
        let doas_deg = self.doa_sampling.sample(self.n_sources, &mut rng)?;
        let doas: Vec<f64> = doas_deg.iter().map(|d| d.to_radians()).collect();
        let geom = self.geometry()?;
        let sc = if self.noiseless {
            Scenario::noiseless(geom, doas, self.n_snapshots, self.source_model)?
        } else {
            Scenario::new(geom, doas, self.n_snapshots, snr_db, self.source_model)?
        };
        Ok((doas_deg, sc))
    }

    pub fn trial_batch(
        &self,
        snr_db: f64,
        trial_index: usize,
    ) -> Result<(Vec<f64>, SnapshotBatch)> {
        let (doas, sc) = self.trial_scenario(snr_db, trial_index)?;
        Ok((doas, simulate_snapshots(&sc, self.trial_seed(trial_index))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// `estimate - truth` per truth entry (in truth order), degrees.
    pub matched_errors_deg: Vec<f64>,
    pub rmse_deg: f64,
}

fn best_assignment(est: &[f64], truth: &[f64]) -> Vec<usize> {
    // Injective map truth index -> estimate index minimizing squared error.
    fn rec(
        est: &[f64],
        truth: &[f64],
        i: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<usize>,
        cost: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if cost >= best.0 {
            return;
        }
        if i == truth.len() {
            *best = (cost, cur.clone());
            return;
        }
        for j in 0..est.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                let d = est[j] - truth[i];
                rec(est, truth, i + 1, used, cur, cost + d * d, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    rec(
        est,
        truth,
        0,
        &mut vec![false; est.len()],
        &mut Vec::new(),
        0.0,
        &mut best,
    );
    if best.1.is_empty() && !truth.is_empty() {
        // Only reachable with non-finite inputs.
        best.1 = (0..truth.len()).collect();
    }
    best.1
}

/// Minimum-squared-error matching over all permutations; angles in degrees.
pub fn match_and_score(estimates_deg: &[f64], truth_deg: &[f64]) -> Result<Score> {
    if estimates_deg.len() != truth_deg.len() {
        return Err(DoaError::domain(format!(
            "{} estimates for {} true DoAs",
            estimates_deg.len(),
            truth_deg.len()
        )));
    }
    if truth_deg.is_empty() || truth_deg.len() > MAX_MATCH_SOURCES {
        return Err(DoaError::domain(format!(
            "matching needs 1..={MAX_MATCH_SOURCES} sources, got {}",
            truth_deg.len()
        )));
    }
    let assign = best_assignment(estimates_deg, truth_deg);
    let errors: Vec<f64> = assign
        .iter()
        .zip(truth_deg)
        .map(|(&j, t)| estimates_deg[j] - t)
        .collect();
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt();
    Ok(Score {
        matched_errors_deg: errors,
        rmse_deg: rmse,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: usize,
    pub seed: u64,
    pub method: Method,
    pub true_doas_deg: Vec<f64>,
    pub estimates_deg: Vec<f64>,
    /// Empty when the method failed or returned too few estimates.
    pub matched_errors_deg: Vec<f64>,
    pub runtime_ms: f64,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl TrialRecord {
    pub fn false_alarms(&self) -> usize {
        self.estimates_deg
            .len()
            .saturating_sub(self.true_doas_deg.len())
    }

    pub fn is_detection(&self, threshold_deg: f64) -> bool {
        !self.matched_errors_deg.is_empty()
            && self.matched_errors_deg.len() == self.true_doas_deg.len()
            && self
                .matched_errors_deg
                .iter()
                .all(|e| e.abs() < threshold_deg)
    }
}

/// Estimates in radians plus flags; method failures become flags.
pub fn run_method(
    method: Method,
    batch: &SnapshotBatch,
    config: &ScenarioConfig,
    snr_db: f64,
) -> (Vec<f64>, Vec<String>) {
    match run_method_inner(method, batch, config, snr_db) {
        Ok(out) => out,
        Err(e) => (Vec::new(), vec![format!("error: {e}")]),
    }
}

fn peaks_to_estimates(spec: &Spectrum, k: usize) -> Result<(Vec<f64>, Vec<String>)> {
    let sel = select_peaks(spec, PeakRule::FixedK(k))?;
    let mut flags = Vec::new();
    if sel.fallback_filled > 0 {
        flags.push(format!("peak_fallback={}", sel.fallback_filled));
    }
    let mut angles = sel.angles;
    angles.sort_by(f64::total_cmp);
    Ok((angles, flags))
}

/// Spectrum of a spectral method on the configured flat grid.
pub fn method_spectrum(
    method: Method,
    batch: &SnapshotBatch,
    config: &ScenarioConfig,
    snr_db: f64,
) -> Result<Spectrum> {
    let geom = config.geometry()?;
    let grid = build_grid(config.grid.cells)?;
    let k = config.n_sources;
    match method {
        Method::NuvSsrFlat => {
            let dict = build_dictionary(&grid, geom);
            let stat = snapshot_mean(batch)?;
            let sol = solve(
                &dict,
                &stat,
                &config.solver.solver_config(snr_db, batch.n_snapshots()),
            )?;
            spectrum(&sol.moments, &grid)
        }
        Method::Bartlett => bartlett_spectrum(&sample_covariance(batch)?, &grid),
        Method::Mvdr => {
            let cov = sample_covariance(batch)?;
            let load = config
                .grid
                .mvdr_load
                .unwrap_or_else(|| default_diagonal_load(&cov));
            mvdr_spectrum(&cov, &grid, load)
        }
        Method::Music => music_spectrum(&sample_covariance(batch)?, &grid, k),
        Method::NuvDoa | Method::RootMusic => Err(DoaError::Config(format!(
            "{method} has no flat-grid spectrum"
        ))),
    }
}

fn run_method_inner(
    method: Method,
    batch: &SnapshotBatch,
    config: &ScenarioConfig,
    snr_db: f64,
) -> Result<(Vec<f64>, Vec<String>)> {
    let k = config.n_sources;
    match method {
        Method::NuvDoa => {
            let pipe = config.pipeline_config(snr_db)?;
            let est = match config.pipeline.unknown_k_threshold {
                Some(eta) => estimate_unknown_k(batch, eta, &pipe)?,
                None => estimate_multisource(batch, k, &pipe)?,
            };
            let mut flags = est.trace.all_flags();
            flags.insert(
                0,
                format!(
                    "coarse={}",
                    serde_json::to_value(est.trace.coarse_method)?
                        .as_str()
                        .unwrap_or_default()
                ),
            );
            Ok((est.angles, flags))
        }
        Method::RootMusic => {
            let geom = config.geometry()?;
            Ok((root_music(&sample_covariance(batch)?, k, geom)?, Vec::new()))
        }
        _ => peaks_to_estimates(&method_spectrum(method, batch, config, snr_db)?, k),
    }
}

fn score_record(
    trial_index: usize,
    seed: u64,
    method: Method,
    truth_deg: Vec<f64>,
    estimates: Vec<f64>,
    mut flags: Vec<String>,
    runtime_ms: f64,
) -> TrialRecord {
    let estimates_deg: Vec<f64> = estimates.iter().map(|a| a.to_degrees()).collect();
    let matched_errors_deg = if estimates_deg.len() == truth_deg.len() {
        match_and_score(&estimates_deg, &truth_deg)
            .map(|s| s.matched_errors_deg)
            .unwrap_or_default()
    } else if estimates_deg.len() > truth_deg.len() {
        flags.push("extra_estimates".into());
        let assign = best_assignment(&estimates_deg, &truth_deg);
        assign
            .iter()
            .zip(&truth_deg)
            .map(|(&j, t)| estimates_deg[j] - t)
            .collect()
    } else {
        if !estimates_deg.is_empty() {
            flags.push("missing_estimates".into());
        }
        Vec::new()
    };
    TrialRecord {
        trial_index,
        seed,
        method,
        true_doas_deg: truth_deg,
        estimates_deg,
        matched_errors_deg,
        runtime_ms,
        flags,
    }
}

/// One record per configured method, all on the same data.
pub fn run_trial_methods(
    config: &ScenarioConfig,
    snr_db: f64,
    trial_index: usize,
) -> Result<Vec<TrialRecord>> {
    let (truth, batch) = config.trial_batch(snr_db, trial_index)?;
    let seed = config.trial_seed(trial_index);
    Ok(config
        .methods
        .iter()
        .map(|&m| {
            let start = Instant::now();
            let (est, flags) = run_method(m, &batch, config, snr_db);
            let runtime_ms = if config.record_runtime {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            score_record(trial_index, seed, m, truth.clone(), est, flags, runtime_ms)
        })
        .collect())
}

/// First configured method at `snr_db`.
pub fn run_trial(config: &ScenarioConfig, trial_index: usize) -> Result<TrialRecord> {
    config.validate()?;
    let one = ScenarioConfig {
        methods: vec![config.methods[0]],
        ..config.clone()
    };
    Ok(run_trial_methods(&one, config.snr_db, trial_index)?.remove(0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub trials: usize,
    /// RMS over all matched errors of fully matched trials.
    pub rmse_deg: Option<f64>,
    pub median_abs_error_deg: Option<f64>,
    pub detection_rate: f64,
    pub false_alarm_count: usize,
    pub failed_trials: usize,
    pub runtime_ms_mean: f64,
}

fn median(sorted: &[f64]) -> Option<f64> {
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    }
}

impl Aggregates {
    pub fn from_records(records: &[TrialRecord], threshold_deg: f64) -> Self {
        let full: Vec<&TrialRecord> = records
            .iter()
            .filter(|r| r.matched_errors_deg.len() == r.true_doas_deg.len())
            .collect();
        let errors: Vec<f64> = full
            .iter()
            .flat_map(|r| r.matched_errors_deg.iter().copied())
            .collect();
        let rmse = (!errors.is_empty())
            .then(|| (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt());
        let mut abs: Vec<f64> = errors.iter().map(|e| e.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let n = records.len().max(1) as f64;
        Self {
            trials: records.len(),
            rmse_deg: rmse,
            median_abs_error_deg: median(&abs),
            detection_rate: records
                .iter()
                .filter(|r| r.is_detection(threshold_deg))
                .count() as f64
                / n,
            false_alarm_count: records.iter().map(|r| r.false_alarms()).sum(),
            failed_trials: records.len() - full.len(),
            runtime_ms_mean: records.iter().map(|r| r.runtime_ms).sum::<f64>() / n,
        }
    }

    fn close_to(&self, other: &Self, tol: f64) -> bool {
        let opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= tol,
            (None, None) => true,
            _ => false,
        };
        self.trials == other.trials
            && self.false_alarm_count == other.false_alarm_count
            && self.failed_trials == other.failed_trials
            && opt(self.rmse_deg, other.rmse_deg)
            && opt(self.median_abs_error_deg, other.median_abs_error_deg)
            && (self.detection_rate - other.detection_rate).abs() <= tol
            && (self.runtime_ms_mean - other.runtime_ms_mean).abs() <= tol
    }
}

/// All trials of one (method, SNR) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub method: Method,
    pub snr_db: f64,
    pub n_snapshots: usize,
    pub n_sources: usize,
    pub detection_threshold_deg: f64,
    pub aggregates: Aggregates,
    pub records: Vec<TrialRecord>,
}

#[derive(Serialize, Deserialize)]
struct ReportHeader {
    method: Method,
    snr_db: f64,
    n_snapshots: usize,
    n_sources: usize,
    detection_threshold_deg: f64,
    aggregates: Aggregates,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine {
    Header(ReportHeader),
    Trial(TrialRecord),
}

/// Recomputed aggregates may differ from stored ones by at most this.
pub const AGGREGATE_TOLERANCE: f64 = 1e-12;

impl RunReport {
    pub fn new(
        method: Method,
        snr_db: f64,
        config: &ScenarioConfig,
        records: Vec<TrialRecord>,
    ) -> Self {
        Self {
            method,
            snr_db,
            n_snapshots: config.n_snapshots,
            n_sources: config.n_sources,
            detection_threshold_deg: config.detection_threshold_deg,
            aggregates: Aggregates::from_records(&records, config.detection_threshold_deg),
            records,
        }
    }

    /// Header line with the aggregates, then one line per trial.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&ReportLine::Header(ReportHeader {
            method: self.method,
            snr_db: self.snr_db,
            n_snapshots: self.n_snapshots,
            n_sources: self.n_sources,
            detection_threshold_deg: self.detection_threshold_deg,
            aggregates: self.aggregates.clone(),
        }))?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(&ReportLine::Trial(r.clone()))?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a report and checks its aggregates against the trial records.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = match lines.next().map(serde_json::from_str::<ReportLine>) {
            Some(Ok(ReportLine::Header(h))) => h,
            Some(Err(e)) => return Err(e.into()),
            _ => {
                return Err(DoaError::Config(
                    "report must start with a header line".into(),
                ))
            }
        };
        let mut records = Vec::new();
        for line in lines {
            match serde_json::from_str::<ReportLine>(line)? {
                ReportLine::Trial(t) => records.push(t),
                ReportLine::Header(_) => {
                    return Err(DoaError::Config("report has more than one header".into()))
                }
            }
        }
        let recomputed = Aggregates::from_records(&records, header.detection_threshold_deg);
        if !recomputed.close_to(&header.aggregates, AGGREGATE_TOLERANCE) {
            return Err(DoaError::Config(format!(
                "stored aggregates {:?} disagree with records {:?}",
                header.aggregates, recomputed
            )));
        }
        Ok(Self {
            method: header.method,
            snr_db: header.snr_db,
            n_snapshots: header.n_snapshots,
            n_sources: header.n_sources,
            detection_threshold_deg: header.detection_threshold_deg,
            aggregates: header.aggregates,
            records,
        })
    }

    pub fn file_name(&self) -> String {
        format!("{}_snr{:+}.jsonl", self.method, self.snr_db)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Flat CSV with one row per report.
pub fn aggregates_csv(reports: &[RunReport]) -> String {
    let mut out = String::from(
        "method,snr_db,L,K,trials,rmse_deg,median_abs_error_deg,detection_rate,runtime_ms_mean\n",
    );
    for r in reports {
        let a = &r.aggregates;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.snr_db,
            r.n_snapshots,
            r.n_sources,
            a.trials,
            opt_cell(a.rmse_deg),
            opt_cell(a.median_abs_error_deg),
            a.detection_rate,
            a.runtime_ms_mean
        ));
    }
    out
}

fn parallel_trials<T: Send>(
    workers: usize,
    trials: usize,
    f: impl Fn(usize) -> T + Sync + Send,
) -> Vec<T> {
    if workers == 1 {
        (0..trials).map(f).collect()
    } else {
        with_workers(workers, || (0..trials).into_par_iter().map(f).collect())
    }
}

/// One report per (method, SNR), methods outermost, in configuration order.
pub fn run_sweep(config: &ScenarioConfig) -> Result<Vec<RunReport>> {
    config.validate()?;
    let snrs = config.snr_points();
    let mut cells: BTreeMap<(usize, usize), Vec<TrialRecord>> = BTreeMap::new();
    for (si, &snr) in snrs.iter().enumerate() {
        let per_trial = parallel_trials(config.workers, config.trials, |t| {
            run_trial_methods(config, snr, t)
        });
        for recs in per_trial {
            for (mi, rec) in recs?.into_iter().enumerate() {
                cells.entry((mi, si)).or_default().push(rec);
            }
        }
    }
    Ok(cells
        .into_iter()
        .map(|((mi, si), recs)| RunReport::new(config.methods[mi], snrs[si], config, recs))
        .collect())
}

/// Writes each report plus `aggregates.csv` into `dir`.
pub fn write_sweep(dir: impl AsRef<Path>, reports: &[RunReport]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for r in reports {
        r.write(dir.join(r.file_name()))?;
    }
    fs::write(dir.join("aggregates.csv"), aggregates_csv(reports))?;
    Ok(())
}

/// Error spread of the coarse estimator per SNR point of the sweep.
///
/// Epsilon is the RMS of the matched coarse errors over the successful trials.
pub fn calibrate_epsilon(config: &ScenarioConfig) -> Result<ErrorStdTable> {
    if config.snr_sweep.is_empty() {
        return Err(DoaError::Config(
            "epsilon calibration needs a nonempty snr_sweep".into(),
        ));
    }
    config.validate()?;
    let mut entries = Vec::new();
    for &snr in &config.snr_sweep {
        let pipe = config.pipeline_config(snr)?;
        let results = parallel_trials(
            config.workers,
            config.trials,
            |t| -> Result<Option<Vec<f64>>> {
                let (truth, batch) = config.trial_batch(snr, t)?;
                Ok(match coarse_estimate(&batch, config.n_sources, &pipe) {
                    Ok(c) => {
                        let est: Vec<f64> = c.angles.iter().map(|a| a.to_degrees()).collect();
                        match_and_score(&est, &truth)
                            .ok()
                            .map(|s| s.matched_errors_deg)
                    }
                    Err(_) => None,
                })
            },
        );
        let mut errors = Vec::new();
        let mut ok = 0;
        for r in results {
            if let Some(e) = r? {
                ok += 1;
                errors.extend(e);
            }
        }
        let eps = if errors.is_empty() {
            crate::hierarchical::FALLBACK_EPSILON_DEG
        } else {
            (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt()
        };
        entries.push(ErrorStdEntry {
            snr_db: snr,
            epsilon_deg: eps.max(MIN_EPSILON_DEG),
            trials: Some(ok),
            low_confidence: ok < MIN_CONFIDENT_TRIALS,
        });
    }
    ErrorStdTable::new(entries)
}

/// Log-spaced candidates from 3 to 1e4 that include 8e2.
pub fn default_sigma2_candidates() -> Vec<f64> {
    vec![3.0, 10.0, 30.0, 100.0, 300.0, 800.0, 3000.0, 1e4]
}

/// For each SNR point, the candidate with the lowest RMSE of the first
/// configured method; ties go to the smaller sigma2.
pub fn calibrate_sigma2(config: &ScenarioConfig, candidates: &[f64]) -> Result<Vec<Sigma2Entry>> {
    if candidates.is_empty() {
        return Err(DoaError::Config(
            "sigma2 calibration needs candidates".into(),
        ));
    }
    if candidates.iter().any(|c| !(*c > 0.0)) {
        return Err(DoaError::Config(
            "sigma2 candidates must be positive".into(),
        ));
    }
    config.validate()?;
    let mut sorted = candidates.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut out = Vec::new();
    for snr in config.snr_points() {
        let mut scores = Vec::new();
        for &s2 in &sorted {
            let mut cfg = config.clone();
            cfg.methods = vec![config.methods[0]];
            cfg.snr_sweep = vec![snr];
            cfg.solver.sigma2 = s2;
            cfg.solver.sigma2_by_snr.clear();
            let report = run_sweep(&cfg)?.remove(0);
            scores.push(CandidateScore {
                sigma2: s2,
                rmse_deg: report.aggregates.rmse_deg,
                detection_rate: report.aggregates.detection_rate,
            });
        }
        let best = scores
            .iter()
            .filter_map(|c| c.rmse_deg.map(|r| (c.sigma2, r)))
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.total_cmp(&b.0)))
            .map_or(sorted[0], |(s, _)| s);
        out.push(Sigma2Entry {
            snr_db: snr,
            sigma2: best,
            candidates: scores,
        });
    }
    Ok(out)
}

/// Flat-grid spectrum of one spectral method on trial 0.
pub fn trial_spectrum(config: &ScenarioConfig, method: Method) -> Result<Spectrum> {
    config.validate()?;
    let (_, batch) = config.trial_batch(config.snr_db, 0)?;
    method_spectrum(method, &batch, config, config.snr_db)
}

/// Super-resolution spectra of every refinement window on trial 0, as
/// `(angle_deg, magnitude)` rows sorted by angle.
pub fn trial_fine_spectrum(config: &ScenarioConfig) -> Result<Vec<(f64, f64)>> {
    use crate::hierarchical::cancel_interference;
    use crate::superres::{plan_subbands, superres_scan};
    config.validate()?;
    let (_, batch) = config.trial_batch(config.snr_db, 0)?;
    let pipe = config.pipeline_config(config.snr_db)?;
    let geom = config.geometry()?;
    let stat = snapshot_mean(&batch)?;
    let coarse = coarse_estimate(&batch, config.n_sources, &pipe)?;
    let (eps, _) = pipe
        .error_table
        .epsilon_or_fallback(coarse.effective_snr_db);
    let half = ((3.0 * eps) / pipe.fine_step + 1e-9).floor().max(1.0) * pipe.fine_step;
    let mut rows = Vec::new();
    for (i, &c) in coarse.angles.iter().enumerate() {
        let resid = cancel_interference(&stat, &coarse.angles, i, geom)?.stat;
        let lo = (c - half).max(-std::f64::consts::FRAC_PI_2);
        let hi = (c + half).min(std::f64::consts::FRAC_PI_2 - pipe.fine_step);
        let plan = plan_subbands(lo, hi, pipe.fine_step, pipe.alpha, geom)?;
        let spec = superres_scan(
            &plan,
            &resid,
            &pipe.refinement_solver(batch.n_snapshots()),
            config.workers,
        )?;
        rows.extend(
            spec.grid()
                .values()
                .iter()
                .map(|a| a.to_degrees())
                .zip(spec.values().iter().copied()),
        );
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(rows)
}

/// Two-column CSV body shared by the spectrum writers.
pub fn rows_to_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("angle_deg,magnitude\n");
    for (a, v) in rows {
        out.push_str(&format!("{a},{v}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matching_examples() {
        assert_eq!(match_and_score(&[5.0], &[5.0]).unwrap().rmse_deg, 0.0);
        let s = match_and_score(&[10.0, -10.0], &[-10.0, 10.0]).unwrap();
        assert_eq!(s.rmse_deg, 0.0);
        let s = match_and_score(&[1.0, 18.0], &[0.0, 20.0]).unwrap();
        assert!((s.rmse_deg - (2.5f64).sqrt()).abs() < 1e-12);
        assert_eq!(s.matched_errors_deg, vec![1.0, -2.0]);
        assert!(match_and_score(&[1.0], &[1.0, 2.0]).is_err());
        assert!(match_and_score(&[0.0; 9], &[0.0; 9]).is_err());
    }

    fn brute_force_rmse(est: &[f64], truth: &[f64]) -> f64 {
        fn perms(n: usize) -> Vec<Vec<usize>> {
            if n == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(n - 1) {
                for i in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(i, n - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(est.len())
            .iter()
            .map(|p| {
                let sse: f64 = p
                    .iter()
                    .zip(truth)
                    .map(|(&j, t)| (est[j] - t).powi(2))
                    .sum();
                (sse / truth.len() as f64).sqrt()
            })
            .fold(f64::INFINITY, f64::min)
    }

    proptest::proptest! {
        #[test]
        fn matching_is_the_permutation_minimum(
            pairs in proptest::collection::vec((-90.0f64..90.0, -90.0f64..90.0), 1..6)
        ) {
            let (est, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let s = match_and_score(&est, &truth).unwrap();
            proptest::prop_assert!((s.rmse_deg - brute_force_rmse(&est, &truth)).abs() < 1e-9);
        }
    }

    #[test]
    fn config_defaults_round_trip_through_toml() {
        let cfg = ScenarioConfig::new(Method::RootMusic, 50, 10.0);
        let text = cfg.to_toml_string().unwrap();
        let back = ScenarioConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_bad_input() {
        let base = "schema_version = 1\nn_snapshots = 10\nsnr_db = 5.0\nmethods = [\"music\"]\n";
        assert!(ScenarioConfig::from_toml_str(base).is_ok());
        let e = ScenarioConfig::from_toml_str(
            &base.replace("schema_version = 1", "schema_version = 2"),
        )
        .unwrap_err();
        assert!(e.is_config_error());
        assert!(ScenarioConfig::from_toml_str(&format!("{base}bogus = 1\n")).is_err());
        assert!(ScenarioConfig::from_toml_str(&base.replace("\"music\"", "\"esprit\"")).is_err());
        assert!(ScenarioConfig::from_toml_str(&format!("{base}n_sources = 16\n")).is_err());
        assert!(ScenarioConfig::from_toml_str(&format!("{base}trials = 0\n")).is_err());
    }

    #[test]
    fn doa_sampling_respects_regimes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = DoaSampling::Boundary {
                min_separation_deg: 0.0,
            }
            .sample(2, &mut rng)
            .unwrap();
            assert!(v.iter().all(|d| (75.0..=85.0).contains(&d.abs())));
            let v = DoaSampling::Spaced {
                lo_deg: -60.0,
                hi_deg: 60.0,
                separation_deg: 15.0,
            }
            .sample(2, &mut rng)
            .unwrap();
            assert!((v[1] - v[0] - 15.0).abs() < 1e-12 && v[0] >= -60.0 && v[1] <= 60.0);
            let v = DoaSampling::default().sample(3, &mut rng).unwrap();
            assert!(v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|d| d.abs() <= 75.0));
        }
    }

    #[test]
    fn grid_point_sampling_lands_on_the_grid() {
        let grid: Vec<f64> = build_grid(180)
            .unwrap()
            .values()
            .iter()
            .map(|a| a.to_degrees())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = DoaSampling::GridPoints {
            cells: 180,
            lo_deg: -10.0,
            hi_deg: 10.0,
        };
        for _ in 0..100 {
            let v = s.sample(3, &mut rng).unwrap();
            assert!(v.windows(2).all(|w| w[0] < w[1]));
            assert!(v.iter().all(|d| d.abs() <= 10.0 && grid.contains(d)));
        }
        let narrow = DoaSampling::GridPoints {
            cells: 180,
            lo_deg: 0.1,
            hi_deg: 0.9,
        };
        assert!(narrow.validate(1).is_err());
    }

    #[test]
    fn trials_are_deterministic_and_share_data_across_methods() {
        let mut cfg = ScenarioConfig::new(Method::RootMusic, 20, 10.0);
        cfg.methods = vec![Method::RootMusic, Method::Music];
        cfg.grid.cells = 360;
        let a = run_trial_methods(&cfg, 10.0, 3).unwrap();
        let b = run_trial_methods(&cfg, 10.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].true_doas_deg, a[1].true_doas_deg);
        assert_eq!(a[0].seed, 3);
    }

    #[test]
    fn noiseless_root_music_trial_is_exact() {
        let mut cfg = ScenarioConfig::new(Method::RootMusic, 20, 30.0);
        cfg.noiseless = true;
        cfg.doa_sampling = DoaSampling::Fixed {
            doas_deg: vec![12.3],
        };
        let rec = run_trial(&cfg, 0).unwrap();
        assert!(rec.matched_errors_deg[0].abs() < 1e-4);
        assert!(rec.flags.is_empty());
    }

    #[test]
    fn method_failures_become_flags() {
        let mut cfg = ScenarioConfig::new(Method::Mvdr, 1, 10.0);
        cfg.noiseless = true;
        cfg.grid.mvdr_load = Some(0.0);
        cfg.grid.cells = 90;
        let rec = run_trial(&cfg, 0).unwrap();
        assert!(rec.estimates_deg.is_empty());
        assert!(rec.flags[0].starts_with("error:"), "{:?}", rec.flags);
        assert!(!rec.is_detection(1.0));
    }

    #[test]
    fn sweep_with_one_trial_is_run_trial() {
        let mut cfg = ScenarioConfig::new(Method::RootMusic, 30, 5.0);
        cfg.seed = 77;
        let report = run_sweep(&cfg).unwrap().remove(0);
        assert_eq!(report.records, vec![run_trial(&cfg, 0).unwrap()]);
    }

    #[test]
    fn sweep_order_and_report_round_trip() {
        let mut cfg = ScenarioConfig::new(Method::RootMusic, 30, 5.0);
        cfg.methods = vec![Method::RootMusic, Method::Bartlett];
        cfg.grid.cells = 360;
        cfg.snr_sweep = vec![0.0, 10.0];
        cfg.trials = 4;
        let reports = run_sweep(&cfg).unwrap();
        let keys: Vec<(Method, f64)> = reports.iter().map(|r| (r.method, r.snr_db)).collect();
        assert_eq!(
            keys,
            vec![
                (Method::RootMusic, 0.0),
                (Method::RootMusic, 10.0),
                (Method::Bartlett, 0.0),
                (Method::Bartlett, 10.0)
            ]
        );
        for r in &reports {
            let back = RunReport::from_jsonl(&r.to_jsonl().unwrap()).unwrap();
            assert_eq!(&back, r);
        }
        let csv = aggregates_csv(&reports);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("method,snr_db,L,K,trials,rmse_deg"));
    }

    #[test]
    fn tampered_report_is_rejected() {
        let mut cfg = ScenarioConfig::new(Method::RootMusic, 30, 5.0);
        cfg.trials = 3;
        let r = run_sweep(&cfg).unwrap().remove(0);
        let text = r.to_jsonl().unwrap();
        let first = r.records[0].matched_errors_deg[0];
        let tampered = text.replacen(&format!("{first}"), &format!("{}", first + 1.0), 1);
        assert!(RunReport::from_jsonl(&tampered).is_err());
    }

    #[test]
    fn aggregates_by_hand() {
        let rec = |errs: Vec<f64>, est: usize| TrialRecord {
            trial_index: 0,
            seed: 0,
            method: Method::Music,
            true_doas_deg: vec![0.0; 2],
            estimates_deg: vec![0.0; est],
            matched_errors_deg: errs,
            runtime_ms: 0.0,
            flags: vec![],
        };
        let recs = vec![
            rec(vec![0.5, -0.5], 2),
            rec(vec![3.0, 0.0], 3),
            rec(vec![], 0),
        ];
        let a = Aggregates::from_records(&recs, 1.0);
        assert_eq!(a.trials, 3);
        assert_eq!(a.failed_trials, 1);
        assert_eq!(a.false_alarm_count, 1);
        assert!((a.detection_rate - 1.0 / 3.0).abs() < 1e-15);
        assert!((a.rmse_deg.unwrap() - (9.5f64 / 4.0).sqrt()).abs() < 1e-15);
        assert_eq!(a.median_abs_error_deg, Some(0.5));
    }

    #[test]
    fn epsilon_calibration_noiseless_root_music() {
        let mut cfg = ScenarioConfig::new(Method::NuvDoa, 20, 30.0);
        cfg.noiseless = true;
        cfg.snr_sweep = vec![20.0, 30.0];
        cfg.trials = 10;
        let t = calibrate_epsilon(&cfg).unwrap();
        assert_eq!(t.entries().len(), 2);
        for e in t.entries() {
            assert!(e.epsilon_deg <= 0.1 / 12f64.sqrt());
            assert!(e.low_confidence);
        }
        cfg.snr_sweep.clear();
        assert!(calibrate_epsilon(&cfg).is_err());
    }

    #[test]
    fn sigma2_calibration_single_candidate() {
        let mut cfg = ScenarioConfig::new(Method::NuvSsrFlat, 20, 10.0);
        cfg.grid.cells = 180;
        cfg.trials = 2;
        cfg.solver.max_iterations = 50;
        let out = calibrate_sigma2(&cfg, &[5.0]).unwrap();
        assert_eq!(out[0].sigma2, 5.0);
        assert!(calibrate_sigma2(&cfg, &[]).is_err());
    }
}
