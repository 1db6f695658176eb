//! Hierarchical multi-source estimation.
//!
//! 1. A coarse pass finds all `K` directions: NUV on a coarse full-azimuth grid
//!    when the SNR is below the gate, Root-MUSIC otherwise.
//! 2. For each source, the steering contributions of the other `K - 1` coarse
//!    directions are removed from the snapshot mean by least squares.
//! 3. The residual is scanned with sub-band super-resolution inside a window of
//!    width `6 * epsilon` around the coarse estimate, where `epsilon` is the
//!    coarse estimator's error spread at the operating SNR.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::array::{
    build_dictionary, build_grid, sample_covariance, snapshot_mean, steering_matrix, CMatrix,
    SnapshotBatch, SufficientStatistic, UlaGeometry,
};
use crate::baselines::root_music;
use crate::error::{DoaError, Result};
use crate::nuv::{select_peaks, solve, PeakRule, SolverConfig};
use crate::superres::{plan_subbands, superres_scan, DEFAULT_ALPHA_DEG, DEFAULT_FINE_STEP_DEG};

pub const DEFAULT_SNR_GATE_DB: f64 = 7.0;
pub const DEFAULT_COARSE_GRID_CELLS: usize = 1800;
/// Window half-width parameter used when the SNR falls outside the error table.
pub const FALLBACK_EPSILON_DEG: f64 = 1.0;
/// Coarse angles closer than this are treated as one direction during cancellation.
const DUPLICATE_TOL: f64 = 1e-6;

static DEFAULT_TABLE_JSON: &str = include_str!("../data/epsilon_default.json");

/// One row of an [`ErrorStdTable`] as stored on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorStdEntry {
    pub snr_db: f64,
    pub epsilon_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trials: Option<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub low_confidence: bool,
}

/// Empirical error standard deviation of the coarse estimator versus SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ErrorStdEntry>", into = "Vec<ErrorStdEntry>")]
pub struct ErrorStdTable {
    entries: Vec<ErrorStdEntry>,
}

impl ErrorStdTable {
    pub fn new(mut entries: Vec<ErrorStdEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(DoaError::Config(
                "error table must have at least one entry".into(),
            ));
        }
        if let Some(bad) = entries
            .iter()
            .find(|e| !(e.epsilon_deg > 0.0) || !e.epsilon_deg.is_finite() || !e.snr_db.is_finite())
        {
            return Err(DoaError::Config(format!(
                "error table entry at {} dB has non-positive epsilon {}",
                bad.snr_db, bad.epsilon_deg
            )));
        }
        entries.sort_by(|a, b| a.snr_db.total_cmp(&b.snr_db));
        if entries.windows(2).any(|w| w[0].snr_db == w[1].snr_db) {
            return Err(DoaError::Config(
                "error table has duplicate SNR entries".into(),
            ));
        }
        Ok(Self { entries })
    }

    /// Table shipped with the crate (Root-MUSIC / coarse NUV at N=16, L=100).
    pub fn shipped_default() -> Self {
        let entries: Vec<ErrorStdEntry> =
            serde_json::from_str(DEFAULT_TABLE_JSON).expect("shipped epsilon table parses");
        Self::new(entries).expect("shipped epsilon table is valid")
    }

    pub fn entries(&self) -> &[ErrorStdEntry] {
        &self.entries
    }

    /// Epsilon in radians, linearly interpolated; `None` outside the table's range.
    pub fn lookup(&self, snr_db: f64) -> Option<f64> {
        let first = self.entries.first()?;
        let last = self.entries.last()?;
        if snr_db.is_nan() || snr_db < first.snr_db || snr_db > last.snr_db {
            return None;
        }
        let hi = self.entries.partition_point(|e| e.snr_db < snr_db);
        let eps = if self.entries[hi].snr_db == snr_db || hi == 0 {
            self.entries[hi].epsilon_deg
        } else {
            let (a, b) = (self.entries[hi - 1], self.entries[hi]);
            let t = (snr_db - a.snr_db) / (b.snr_db - a.snr_db);
            a.epsilon_deg + t * (b.epsilon_deg - a.epsilon_deg)
        };
        Some(eps.to_radians())
    }

    /// Like [`lookup`](Self::lookup) with the documented out-of-range fallback.
    pub fn epsilon_or_fallback(&self, snr_db: f64) -> (f64, bool) {
        match self.lookup(snr_db) {
            Some(e) => (e, false),
            None => (FALLBACK_EPSILON_DEG.to_radians(), true),
        }
    }
}

impl TryFrom<Vec<ErrorStdEntry>> for ErrorStdTable {
    type Error = DoaError;
    fn try_from(v: Vec<ErrorStdEntry>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ErrorStdTable> for Vec<ErrorStdEntry> {
    fn from(t: ErrorStdTable) -> Self {
        t.entries
    }
}

impl Default for ErrorStdTable {
    fn default() -> Self {
        Self::shipped_default()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub snr_gate_db: f64,
    pub coarse_grid_cells: usize,
    pub fine_step: f64,
    pub alpha: f64,
    /// Solver for the sub-band refinement. `n_snapshots` is replaced by the batch size.
    pub solver: SolverConfig,
    /// Solver for the coarse NUV pass; defaults to `solver`.
    pub coarse_solver: Option<SolverConfig>,
    pub error_table: ErrorStdTable,
    pub known_snr_db: Option<f64>,
    /// 0 = current rayon pool, 1 = sequential, n = dedicated pool.
    pub workers: usize,
}

impl PipelineConfig {
    pub fn new(solver: SolverConfig) -> Self {
        Self {
            snr_gate_db: DEFAULT_SNR_GATE_DB,
            coarse_grid_cells: DEFAULT_COARSE_GRID_CELLS,
            fine_step: DEFAULT_FINE_STEP_DEG.to_radians(),
            alpha: DEFAULT_ALPHA_DEG.to_radians(),
            solver,
            coarse_solver: None,
            error_table: ErrorStdTable::default(),
            known_snr_db: None,
            workers: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.coarse_grid_cells < 2 {
            return Err(DoaError::Config(
                "coarse grid needs at least 2 cells".into(),
            ));
        }
        let coarse_step = std::f64::consts::PI / self.coarse_grid_cells as f64;
        if !(self.fine_step > 0.0) || !(coarse_step > self.fine_step) {
            return Err(DoaError::Config(format!(
                "coarse step {:.4} deg must exceed fine step {:.4} deg",
                coarse_step.to_degrees(),
                self.fine_step.to_degrees()
            )));
        }
        if !(self.alpha >= self.fine_step) {
            return Err(DoaError::Config(
                "alpha must be at least the fine step".into(),
            ));
        }
        self.solver.validate()?;
        if let Some(c) = &self.coarse_solver {
            c.validate()?;
        }
        Ok(())
    }

    /// Refinement solver with `n_snapshots` substituted.
    pub fn refinement_solver(&self, n_snapshots: usize) -> SolverConfig {
        SolverConfig {
            n_snapshots,
            ..self.solver
        }
    }

    fn coarse_solver_for(&self, n_snapshots: usize) -> SolverConfig {
        SolverConfig {
            n_snapshots,
            ..self.coarse_solver.unwrap_or(self.solver)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoarseMethod {
    Nuv,
    RootMusic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseEstimate {
    /// Sorted ascending, radians.
    pub angles: Vec<f64>,
    pub method: CoarseMethod,
    /// Root-MUSIC was selected but failed, so the NUV pass was used instead.
    pub root_music_fallback: bool,
    /// Fewer strict peaks than sources in the coarse NUV spectrum.
    pub peak_fallback: bool,
    pub effective_snr_db: f64,
}

/// `10 log10((tr R - N lmin) / (N lmin))`, `+inf` when `lmin <= 0`.
pub fn estimate_snr_db(cov: &CMatrix) -> f64 {
    let n = cov.nrows() as f64;
    let lmin = cov
        .clone()
        .symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if !(lmin > 0.0) {
        return f64::INFINITY;
    }
    let signal = cov.trace().re - n * lmin;
    if signal <= 0.0 {
        return f64::NEG_INFINITY;
    }
    10.0 * (signal / (n * lmin)).log10()
}

/// The effective SNR used for the gate and the epsilon lookup.
pub fn effective_snr_db(batch: &SnapshotBatch, config: &PipelineConfig) -> Result<f64> {
    match config.known_snr_db {
        Some(s) => Ok(s),
        None => Ok(estimate_snr_db(&sample_covariance(batch)?)),
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k >= n {
        return Err(DoaError::domain(format!(
            "need 1 <= K < N, got K={k}, N={n}"
        )));
    }
    Ok(())
}

fn coarse_nuv(
    stat: &SufficientStatistic,
    rule: PeakRule,
    config: &PipelineConfig,
    geometry: UlaGeometry,
) -> Result<(Vec<f64>, bool)> {
    let grid = build_grid(config.coarse_grid_cells)?;
    let dict = build_dictionary(&grid, geometry);
    let sol = solve(&dict, stat, &config.coarse_solver_for(stat.n_snapshots()))?;
    let spec = crate::nuv::spectrum(&sol.moments, &grid)?;
    let sel = select_peaks(&spec, rule)?;
    let mut angles = sel.angles;
    angles.sort_by(f64::total_cmp);
    Ok((angles, sel.fallback_filled > 0))
}

pub fn coarse_estimate(
    batch: &SnapshotBatch,
    k: usize,
    config: &PipelineConfig,
) -> Result<CoarseEstimate> {
    let geometry = UlaGeometry::new(batch.n_sensors())?;
    check_k(k, geometry.n_sensors())?;
    let snr = effective_snr_db(batch, config)?;
    let stat = snapshot_mean(batch)?;
    if snr < config.snr_gate_db {
        let (angles, peak_fallback) = coarse_nuv(&stat, PeakRule::FixedK(k), config, geometry)?;
        return Ok(CoarseEstimate {
            angles,
            method: CoarseMethod::Nuv,
            root_music_fallback: false,
            peak_fallback,
            effective_snr_db: snr,
        });
    }
    let cov = sample_covariance(batch)?;
    match root_music(&cov, k, geometry) {
        Ok(angles) => Ok(CoarseEstimate {
            angles,
            method: CoarseMethod::RootMusic,
            root_music_fallback: false,
            peak_fallback: false,
            effective_snr_db: snr,
        }),
        Err(DoaError::RootDeficit { .. }) => {
            let (angles, peak_fallback) = coarse_nuv(&stat, PeakRule::FixedK(k), config, geometry)?;
            Ok(CoarseEstimate {
                angles,
                method: CoarseMethod::Nuv,
                root_music_fallback: true,
                peak_fallback,
                effective_snr_db: snr,
            })
        }
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cancellation {
    pub stat: SufficientStatistic,
    /// Neighbor angles dropped because they duplicated another coarse angle.
    pub dropped_duplicates: usize,
}

/// Removes the least-squares fit of the non-target steering vectors from `ybar`.
///
/// The residual is the orthogonal projection of `ybar` onto the complement of
/// the neighbors' span, so it is orthogonal to every neighbor steering vector.
pub fn cancel_interference(
    stat: &SufficientStatistic,
    coarse_angles: &[f64],
    target: usize,
    geometry: UlaGeometry,
) -> Result<Cancellation> {
    if target >= coarse_angles.len() {
        return Err(DoaError::domain(format!(
            "target {target} out of range for {} coarse angles",
            coarse_angles.len()
        )));
    }
    if stat.n_sensors() != geometry.n_sensors() {
        return Err(DoaError::domain("statistic and geometry disagree on N"));
    }
    let theta_t = coarse_angles[target];
    let mut neighbors: Vec<f64> = Vec::new();
    let mut dropped = 0;
    for (i, &a) in coarse_angles.iter().enumerate() {
        if i == target {
            continue;
        }
        let dup = (a - theta_t).abs() < DUPLICATE_TOL
            || neighbors.iter().any(|b| (a - b).abs() < DUPLICATE_TOL);
        if dup {
            dropped += 1;
        } else {
            neighbors.push(a);
        }
    }
    if neighbors.is_empty() {
        return Ok(Cancellation {
            stat: stat.clone(),
            dropped_duplicates: dropped,
        });
    }
    let b = steering_matrix(&neighbors, geometry)?;
    let q = b.qr().q();
    let y = stat.mean();
    let residual = y - &q * q.ad_mul(y);
    Ok(Cancellation {
        stat: SufficientStatistic::new(residual, stat.n_snapshots())?,
        dropped_duplicates: dropped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    pub angle: f64,
    /// Scanned window `[lo, hi]` after clipping, radians.
    pub window: (f64, f64),
    /// Spectrum was identically zero; `angle` is the lowest scan angle.
    pub no_detection: bool,
    /// Window was empty after clipping; `angle` is the coarse angle.
    pub empty_window: bool,
}

/// Fine scan of `[coarse - 3 eps, coarse + 3 eps]` on the lattice
/// `coarse + j * fine_step`; returns the argmax.
///
/// The half-width is at least one fine step so the scan always has a
/// neighborhood to compare against.
pub fn refine_source(
    stat: &SufficientStatistic,
    coarse_angle: f64,
    epsilon: f64,
    config: &PipelineConfig,
    geometry: UlaGeometry,
) -> Result<Refinement> {
    if !(epsilon > 0.0) {
        return Err(DoaError::domain("epsilon must be positive"));
    }
    let step = config.fine_step;
    let half_steps = ((3.0 * epsilon) / step + 1e-9).floor().max(1.0);
    let mut lo_steps = -half_steps;
    let mut hi_steps = half_steps;
    while lo_steps < 0.0 && coarse_angle + lo_steps * step < -FRAC_PI_2 {
        lo_steps += 1.0;
    }
    while hi_steps > 0.0 && coarse_angle + hi_steps * step >= FRAC_PI_2 - 1e-12 {
        hi_steps -= 1.0;
    }
    let lo = coarse_angle + lo_steps * step;
    let hi = coarse_angle + hi_steps * step;
    if !crate::array::in_azimuth(coarse_angle) {
        return Ok(Refinement {
            angle: coarse_angle,
            window: (coarse_angle, coarse_angle),
            no_detection: false,
            empty_window: true,
        });
    }
    let plan = plan_subbands(lo, hi, step, config.alpha, geometry)?;
    let solver = config.refinement_solver(stat.n_snapshots());
    let spec = superres_scan(&plan, stat, &solver, config.workers)?;
    let best = spec.argmax();
    let no_detection = spec.values()[best] == 0.0;
    Ok(Refinement {
        angle: plan.scan_grid.values()[best],
        window: (lo, hi),
        no_detection,
        empty_window: false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTrace {
    pub coarse_deg: f64,
    pub window_lo_deg: f64,
    pub window_hi_deg: f64,
    pub fine_deg: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub coarse_method: CoarseMethod,
    pub effective_snr_db: f64,
    pub epsilon_deg: f64,
    pub sources: Vec<SourceTrace>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

impl PipelineTrace {
    /// All pipeline-level and per-source flags.
    pub fn all_flags(&self) -> Vec<String> {
        let mut out = self.flags.clone();
        for (i, s) in self.sources.iter().enumerate() {
            out.extend(s.flags.iter().map(|f| format!("source{i}:{f}")));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiSourceEstimate {
    /// Sorted ascending, radians.
    pub angles: Vec<f64>,
    pub trace: PipelineTrace,
}

fn refine_all(
    stat: &SufficientStatistic,
    coarse: &CoarseEstimate,
    epsilon: f64,
    config: &PipelineConfig,
    geometry: UlaGeometry,
) -> Vec<SourceTrace> {
    let work = |i: usize| -> SourceTrace {
        let c = coarse.angles[i];
        let mut flags = Vec::new();
        let cancelled = match cancel_interference(stat, &coarse.angles, i, geometry) {
            Ok(cz) => {
                if cz.dropped_duplicates > 0 {
                    flags.push(format!(
                        "dropped_duplicate_neighbors={}",
                        cz.dropped_duplicates
                    ));
                }
                cz.stat
            }
            Err(e) => {
                flags.push(format!("cancellation_failed: {e}"));
                stat.clone()
            }
        };
        match refine_source(&cancelled, c, epsilon, config, geometry) {
            Ok(r) => {
                if r.no_detection {
                    flags.push("no_detection".into());
                }
                if r.empty_window {
                    flags.push("empty_window".into());
                }
                SourceTrace {
                    coarse_deg: c.to_degrees(),
                    window_lo_deg: r.window.0.to_degrees(),
                    window_hi_deg: r.window.1.to_degrees(),
                    fine_deg: r.angle.to_degrees(),
                    flags,
                }
            }
            Err(e) => {
                flags.push(format!("refinement_failed: {e}"));
                SourceTrace {
                    coarse_deg: c.to_degrees(),
                    window_lo_deg: c.to_degrees(),
                    window_hi_deg: c.to_degrees(),
                    fine_deg: c.to_degrees(),
                    flags,
                }
            }
        }
    };
    let k = coarse.angles.len();
    if config.workers == 1 || k == 1 {
        (0..k).map(work).collect()
    } else {
        crate::superres::with_workers(config.workers, || {
            (0..k).into_par_iter().map(work).collect()
        })
    }
}

/// Full pipeline with known `k`. Per-source failures are flagged in the
/// trace and fall back to the coarse angle; they never abort the call.
pub fn estimate_multisource(
    batch: &SnapshotBatch,
    k: usize,
    config: &PipelineConfig,
) -> Result<MultiSourceEstimate> {
    config.validate()?;
    let geometry = UlaGeometry::new(batch.n_sensors())?;
    check_k(k, geometry.n_sensors())?;
    let coarse = coarse_estimate(batch, k, config)?;
    finish(batch, coarse, config, geometry)
}

/// Experimental: number of sources unknown. The coarse pass is NUV on the
/// coarse grid with all peaks above `eta`; the rest of the pipeline is unchanged.
pub fn estimate_unknown_k(
    batch: &SnapshotBatch,
    eta: f64,
    config: &PipelineConfig,
) -> Result<MultiSourceEstimate> {
    config.validate()?;
    let geometry = UlaGeometry::new(batch.n_sensors())?;
    let stat = snapshot_mean(batch)?;
    let (mut angles, _) = coarse_nuv(&stat, PeakRule::Threshold(eta), config, geometry)?;
    angles.truncate(geometry.n_sensors() - 1);
    let coarse = CoarseEstimate {
        angles,
        method: CoarseMethod::Nuv,
        root_music_fallback: false,
        peak_fallback: false,
        effective_snr_db: effective_snr_db(batch, config)?,
    };
    let mut out = finish(batch, coarse, config, geometry)?;
    out.trace.flags.push("experimental_unknown_k".into());
    Ok(out)
}

fn finish(
    batch: &SnapshotBatch,
    coarse: CoarseEstimate,
    config: &PipelineConfig,
    geometry: UlaGeometry,
) -> Result<MultiSourceEstimate> {
    let stat = snapshot_mean(batch)?;
    let (epsilon, eps_fallback) = config
        .error_table
        .epsilon_or_fallback(coarse.effective_snr_db);
    let mut flags = Vec::new();
    if coarse.root_music_fallback {
        flags.push("root_music_fallback".to_string());
    }
    if coarse.peak_fallback {
        flags.push("coarse_peak_fallback".to_string());
    }
    if eps_fallback {
        flags.push("epsilon_out_of_table".to_string());
    }
    let sources = refine_all(&stat, &coarse, epsilon, config, geometry);
    let mut angles: Vec<f64> = sources.iter().map(|s| s.fine_deg.to_radians()).collect();
    angles.sort_by(f64::total_cmp);
    Ok(MultiSourceEstimate {
        angles,
        trace: PipelineTrace {
            coarse_method: coarse.method,
            effective_snr_db: coarse.effective_snr_db,
            epsilon_deg: epsilon.to_degrees(),
            sources,
            flags,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{
        rad, simulate_snapshots, steering_vector, CVector, Scenario, SourceModel, C64,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geom() -> UlaGeometry {
        UlaGeometry::new(16).unwrap()
    }

    fn table(eps_deg: f64) -> ErrorStdTable {
        ErrorStdTable::new(vec![
            ErrorStdEntry {
                snr_db: -20.0,
                epsilon_deg: eps_deg,
                trials: None,
                low_confidence: false,
            },
            ErrorStdEntry {
                snr_db: 60.0,
                epsilon_deg: eps_deg,
                trials: None,
                low_confidence: false,
            },
        ])
        .unwrap()
    }

    #[test]
    fn table_lookup_interpolates() {
        let t = ErrorStdTable::new(vec![
            ErrorStdEntry {
                snr_db: 10.0,
                epsilon_deg: 0.1,
                trials: None,
                low_confidence: false,
            },
            ErrorStdEntry {
                snr_db: 0.0,
                epsilon_deg: 0.5,
                trials: None,
                low_confidence: false,
            },
        ])
        .unwrap();
        assert!((t.lookup(0.0).unwrap() - rad(0.5)).abs() < 1e-15);
        assert!((t.lookup(5.0).unwrap() - rad(0.3)).abs() < 1e-15);
        assert!((t.lookup(10.0).unwrap() - rad(0.1)).abs() < 1e-15);
        assert!(t.lookup(11.0).is_none());
        let (e, fb) = t.epsilon_or_fallback(-3.0);
        assert!(fb && (e - rad(1.0)).abs() < 1e-15);
        assert!(ErrorStdTable::new(vec![]).is_err());
        assert!(ErrorStdTable::new(vec![ErrorStdEntry {
            snr_db: 0.0,
            epsilon_deg: 0.0,
            trials: None,
            low_confidence: false
        }])
        .is_err());
    }

    #[test]
    fn shipped_table_is_valid() {
        let t = ErrorStdTable::shipped_default();
        assert!(t.entries().len() >= 5);
        let json = serde_json::to_string(&t).unwrap();
        let back: ErrorStdTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn gate_picks_root_music_at_high_snr() {
        let theta = rad(17.3);
        let sc = Scenario::noiseless(geom(), vec![theta], 20, SourceModel::Noncoherent).unwrap();
        let batch = simulate_snapshots(&sc, 1);
        let mut cfg = PipelineConfig::new(SolverConfig::new(1.0, 20));
        cfg.known_snr_db = Some(40.0);
        let est = coarse_estimate(&batch, 1, &cfg).unwrap();
        assert_eq!(est.method, CoarseMethod::RootMusic);
        assert!((est.angles[0] - theta).abs() < 1e-6);
    }

    #[test]
    fn gate_picks_nuv_at_low_snr() {
        let sc = Scenario::new(geom(), vec![rad(-5.0)], 50, 0.0, SourceModel::Noncoherent).unwrap();
        let batch = simulate_snapshots(&sc, 2);
        let mut cfg = PipelineConfig::new(SolverConfig::new(1.0, 50));
        cfg.known_snr_db = Some(0.0);
        cfg.coarse_grid_cells = 360;
        let est = coarse_estimate(&batch, 1, &cfg).unwrap();
        assert_eq!(est.method, CoarseMethod::Nuv);
        assert_eq!(est.angles.len(), 1);
    }

    #[test]
    fn snr_estimate_tracks_truth() {
        let sc = Scenario::new(geom(), vec![0.3], 2000, 10.0, SourceModel::Noncoherent).unwrap();
        let batch = simulate_snapshots(&sc, 3);
        // Signal power per element is 1 and noise 0.1; the estimator sees the
        // total signal over N elements against N * lmin.
        let snr = estimate_snr_db(&sample_covariance(&batch).unwrap());
        assert!((snr - 10.0).abs() < 1.0, "{snr}");
    }

    #[test]
    fn single_source_cancellation_is_identity() {
        let stat = SufficientStatistic::new(steering_vector(0.2, geom()).unwrap(), 3).unwrap();
        let out = cancel_interference(&stat, &[0.2], 0, geom()).unwrap();
        assert_eq!(out.stat, stat);
    }

    #[test]
    fn cancellation_in_span_is_zero() {
        let a1 = steering_vector(0.1, geom()).unwrap();
        let a2 = steering_vector(-0.6, geom()).unwrap();
        let y = &a1 * C64::new(0.3, -1.0) + &a2 * C64::new(2.0, 0.5);
        let stat = SufficientStatistic::new(y.clone(), 1).unwrap();
        let out = cancel_interference(&stat, &[0.5, 0.1, -0.6], 0, geom()).unwrap();
        assert!(out.stat.mean().norm() < 1e-12 * y.norm());
    }

    #[test]
    fn cancellation_keeps_target_energy() {
        // Oblique remainder of s1 a1 after projecting out a2.
        let (t1, t2) = (rad(10.0), rad(25.0));
        let a1 = steering_vector(t1, geom()).unwrap();
        let a2 = steering_vector(t2, geom()).unwrap();
        let s1 = C64::new(0.7, 0.2);
        let y = &a1 * s1 + &a2 * C64::new(-1.1, 0.4);
        let stat = SufficientStatistic::new(y, 1).unwrap();
        let out = cancel_interference(&stat, &[t1, t2], 0, geom()).unwrap();
        let p2 = CMatrix::identity(16, 16) - (&a2 * a2.adjoint()).unscale(16.0);
        let expected = &p2 * (&a1 * s1);
        assert!((out.stat.mean() - &expected).norm() < 1e-12);
        let kept = a1.dotc(out.stat.mean()).norm();
        let before = a1.dotc(&(&a1 * s1)).norm();
        assert!(kept > 0.99 * before, "{kept} vs {before}");
    }

    #[test]
    fn cancellation_drops_duplicates() {
        let stat = SufficientStatistic::new(steering_vector(0.2, geom()).unwrap(), 1).unwrap();
        let out = cancel_interference(&stat, &[0.2, -0.4, -0.4], 0, geom()).unwrap();
        assert_eq!(out.dropped_duplicates, 1);
        assert!(cancel_interference(&stat, &[0.2], 1, geom()).is_err());
    }

    proptest::proptest! {
        #[test]
        fn cancellation_orthogonal_and_idempotent(seed in 0u64..300, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let angles: Vec<f64> = (0..k).map(|_| rng.random_range(-1.5..1.5)).collect();
            let y = CVector::from_fn(16, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
            let stat = SufficientStatistic::new(y.clone(), 1).unwrap();
            let target = rng.random_range(0..k);
            let once = cancel_interference(&stat, &angles, target, geom()).unwrap();
            for (i, &a) in angles.iter().enumerate() {
                if i == target || (a - angles[target]).abs() < 1e-6 {
                    continue;
                }
                let ip = steering_vector(a, geom()).unwrap().dotc(once.stat.mean()).norm();
                proptest::prop_assert!(ip < 1e-10 * y.norm(), "{}", ip);
            }
            let twice = cancel_interference(&once.stat, &angles, target, geom()).unwrap();
            proptest::prop_assert!((twice.stat.mean() - once.stat.mean()).norm() < 1e-12 * y.norm());
        }
    }

    #[test]
    fn refine_noiseless_on_grid() {
        let theta = rad(-33.21);
        let sc = Scenario::noiseless(geom(), vec![theta], 100, SourceModel::Noncoherent).unwrap();
        let stat = snapshot_mean(&simulate_snapshots(&sc, 6)).unwrap();
        let mut cfg = PipelineConfig::new(SolverConfig::new(1e-2, 100));
        cfg.solver.max_iterations = 3000;
        let r = refine_source(&stat, theta + rad(0.04), rad(0.1), &cfg, geom()).unwrap();
        assert!((r.window.1 - r.window.0 - rad(0.6)).abs() < 1e-9);
        assert!(
            (r.angle - theta).abs() <= cfg.fine_step + 1e-12,
            "{}",
            r.angle.to_degrees()
        );
    }

    #[test]
    fn refine_zero_observation_flags_no_detection() {
        let stat = SufficientStatistic::new(CVector::zeros(16), 10).unwrap();
        let cfg = PipelineConfig::new(SolverConfig::new(1.0, 10));
        let r = refine_source(&stat, 0.0, rad(0.02), &cfg, geom()).unwrap();
        assert!(r.no_detection);
        assert_eq!(r.angle, r.window.0);
    }

    #[test]
    fn window_width_follows_table() {
        let cfg = PipelineConfig::new(SolverConfig::new(1.0, 10));
        let eps = cfg.error_table.lookup(10.0).unwrap();
        let stat = SufficientStatistic::new(CVector::zeros(16), 10).unwrap();
        let r = refine_source(&stat, 0.0, eps, &cfg, geom()).unwrap();
        let width = r.window.1 - r.window.0;
        assert!(width <= 6.0 * eps + 1e-12 && width > 6.0 * eps - 2.0 * cfg.fine_step);
    }

    #[test]
    fn single_source_pipeline_skips_cancellation() {
        let theta = rad(41.7);
        let sc = Scenario::new(geom(), vec![theta], 100, 20.0, SourceModel::Noncoherent).unwrap();
        let batch = simulate_snapshots(&sc, 12);
        let mut cfg = PipelineConfig::new(SolverConfig::new(1.0, 100));
        cfg.known_snr_db = Some(20.0);
        cfg.error_table = table(0.05);
        let est = estimate_multisource(&batch, 1, &cfg).unwrap();
        let coarse = coarse_estimate(&batch, 1, &cfg).unwrap();
        let r = refine_source(
            &snapshot_mean(&batch).unwrap(),
            coarse.angles[0],
            rad(0.05),
            &cfg,
            geom(),
        )
        .unwrap();
        assert_eq!(est.angles, vec![r.angle]);
        assert_eq!(est.trace.sources.len(), 1);
        assert!(est.trace.flags.is_empty());
    }
}
