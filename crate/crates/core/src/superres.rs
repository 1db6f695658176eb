//! Super-resolution by spatial filtering.
//!
//! A fine scan is split into overlapping sub-bands, one per output angle. Each
//! band `[center - alpha, center + alpha]` gets its own small NUV problem over
//! the band's fine grid, and only the variance-weighted magnitude at the band
//! center is kept. Assembling the centers gives the fine spectrum.

use std::f64::consts::FRAC_PI_2;

use rayon::prelude::*;

use crate::array::{
    build_band_grid, build_dictionary, AngleGrid, SufficientStatistic, UlaGeometry,
};
use crate::error::{DoaError, Result};
use crate::nuv::{select_peaks, solve, PeakRule, PeakSelection, SolverConfig, Spectrum};

pub const DEFAULT_ALPHA_DEG: f64 = 0.5;
pub const DEFAULT_FINE_STEP_DEG: f64 = 0.01;

const EDGE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SubBand {
    pub center: f64,
    pub half_width: f64,
    pub grid: AngleGrid,
    /// Position of `center` inside `grid`.
    pub center_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubBandPlan {
    pub scan_grid: AngleGrid,
    pub alpha: f64,
    pub bands: Vec<SubBand>,
    pub geometry: UlaGeometry,
}

impl SubBandPlan {
    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }
}

/// Band around `center` on the lattice `center + j * step`, truncated at the
/// azimuth edges.
fn band_around(center: f64, alpha: f64, step: f64) -> Result<SubBand> {
    let half = (alpha / step).round() as usize;
    let below = ((center + FRAC_PI_2) / step + 1e-9).floor() as usize;
    let lower = half.min(below);
    let mut upper = half;
    while upper > 0 && center + upper as f64 * step >= FRAC_PI_2 - EDGE_TOL {
        upper -= 1;
    }
    let origin = center - lower as f64 * step;
    let grid = AngleGrid::uniform(origin, step, lower + upper + 1)?;
    Ok(SubBand {
        center,
        half_width: alpha,
        grid,
        center_index: lower,
    })
}

/// One sub-band per scan point between `scan_lo` and `scan_hi` (inclusive).
///
/// Interior bands hold `2 * round(alpha / fine_step) + 1` points.
pub fn plan_subbands(
    scan_lo: f64,
    scan_hi: f64,
    fine_step: f64,
    alpha: f64,
    geometry: UlaGeometry,
) -> Result<SubBandPlan> {
    if !(fine_step > 0.0) {
        return Err(DoaError::domain("fine step must be positive"));
    }
    if !(alpha >= fine_step * (1.0 - 1e-9)) {
        return Err(DoaError::domain(format!(
            "alpha ({:.6} deg) must be at least the fine step ({:.6} deg)",
            alpha.to_degrees(),
            fine_step.to_degrees()
        )));
    }
    let scan_grid = if scan_lo == scan_hi {
        AngleGrid::uniform(scan_lo, fine_step, 1)?
    } else {
        build_band_grid(scan_lo, scan_hi, fine_step)?
    };
    let bands = scan_grid
        .values()
        .iter()
        .map(|&c| band_around(c, alpha, fine_step))
        .collect::<Result<Vec<_>>>()?;
    Ok(SubBandPlan {
        scan_grid,
        alpha,
        bands,
        geometry,
    })
}

/// Magnitude at the band center of the band-local NUV solution.
pub fn solve_subband(
    band: &SubBand,
    stat: &SufficientStatistic,
    config: &SolverConfig,
    geometry: UlaGeometry,
) -> Result<f64> {
    let dict = build_dictionary(&band.grid, geometry);
    let sol = solve(&dict, stat, config)
        .map_err(|e| DoaError::SubBands(vec![(band.center.to_degrees(), e.to_string())]))?;
    Ok(sol.moments.mean[band.center_index].norm())
}

/// Runs `f` on a pool of `workers` threads; 0 uses the current pool, 1 runs inline.
pub(crate) fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        0 | 1 => f(),
        n => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
    }
}

/// Fine spectrum over `plan.scan_grid`, one independent solve per band.
///
/// `workers`: 0 = current rayon pool, 1 = sequential, n = dedicated pool of n threads.
/// The result does not depend on scheduling.
pub fn superres_scan(
    plan: &SubBandPlan,
    stat: &SufficientStatistic,
    config: &SolverConfig,
    workers: usize,
) -> Result<Spectrum> {
    let run = |band: &SubBand| solve_subband(band, stat, config, plan.geometry);
    let results: Vec<Result<f64>> = if workers == 1 {
        plan.bands.iter().map(run).collect()
    } else {
        with_workers(workers, || plan.bands.par_iter().map(run).collect())
    };
    let mut values = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(v) => values.push(v),
            Err(DoaError::SubBands(mut f)) => failures.append(&mut f),
            Err(e) => failures.push((f64::NAN, e.to_string())),
        }
    }
    if !failures.is_empty() {
        return Err(DoaError::SubBands(failures));
    }
    Spectrum::new(values, plan.scan_grid.clone())
}

pub fn detect_fine(spec: &Spectrum, rule: PeakRule) -> Result<PeakSelection> {
    select_peaks(spec, rule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{rad, simulate_snapshots, snapshot_mean, CVector, Scenario, SourceModel};
    use crate::nuv::Init;

    fn geom() -> UlaGeometry {
        UlaGeometry::new(16).unwrap()
    }

    #[test]
    fn interior_bands_have_101_points() {
        let plan = plan_subbands(rad(-2.0), rad(2.0), rad(0.01), rad(0.5), geom()).unwrap();
        assert_eq!(plan.len(), 401);
        assert!(plan
            .bands
            .iter()
            .all(|b| b.grid.len() == 101 && b.center_index == 50));
    }

    #[test]
    fn single_point_scan() {
        let plan = plan_subbands(0.0, 0.0, rad(0.01), rad(0.5), geom()).unwrap();
        assert_eq!(plan.len(), 1);
        let b = &plan.bands[0];
        assert_eq!(b.center_index, 50);
        assert!((b.grid.values()[50] - 0.0).abs() < 1e-12);
    }

    #[test]
    fn bands_clip_at_the_azimuth_edges() {
        let plan = plan_subbands(rad(89.9), rad(89.9), rad(0.01), rad(0.5), geom()).unwrap();
        let b = &plan.bands[0];
        assert_eq!(b.center_index, 50);
        assert!(b.grid.len() < 101);
        assert!(*b.grid.values().last().unwrap() < FRAC_PI_2);
        assert!((b.grid.values()[b.center_index] - rad(89.9)).abs() < 1e-12);

        let plan = plan_subbands(rad(-89.8), rad(-89.8), rad(0.01), rad(0.5), geom()).unwrap();
        let b = &plan.bands[0];
        assert_eq!(b.center_index, 20);
        assert_eq!(b.grid.len(), 71);
        assert!(b.grid.values()[0] >= -FRAC_PI_2);
    }

    #[test]
    fn alpha_below_step_is_rejected() {
        assert!(plan_subbands(0.0, rad(1.0), rad(0.1), rad(0.05), geom()).is_err());
    }

    fn single_source_stat(
        theta: f64,
        snr_db: Option<f64>,
        l: usize,
        seed: u64,
    ) -> SufficientStatistic {
        let sc = match snr_db {
            Some(s) => Scenario::new(geom(), vec![theta], l, s, SourceModel::Noncoherent),
            None => Scenario::noiseless(geom(), vec![theta], l, SourceModel::Noncoherent),
        }
        .unwrap();
        snapshot_mean(&simulate_snapshots(&sc, seed)).unwrap()
    }

    #[test]
    fn converged_center_recovers_the_mean_amplitude() {
        // Atoms 0.01 deg apart are nearly collinear: EM needs thousands of
        // iterations before the center atom absorbs the whole amplitude.
        let theta = rad(12.34);
        let plan = plan_subbands(theta, theta, rad(0.01), rad(0.5), geom()).unwrap();
        let mut cfg = SolverConfig::new(1e-2, 100);
        cfg.max_iterations = 5000;
        cfg.tolerance = 1e-14;
        for seed in 0..3 {
            let sc = Scenario::noiseless(geom(), vec![theta], 100, SourceModel::Static).unwrap();
            let stat = snapshot_mean(&simulate_snapshots(&sc, seed)).unwrap();
            let s_bar = stat.mean().norm() / 4.0;
            let v = solve_subband(&plan.bands[0], &stat, &cfg, geom()).unwrap();
            assert!(
                (v / s_bar - 1.0).abs() < 0.01,
                "seed {seed}: {v} vs {s_bar}"
            );
        }
    }

    #[test]
    fn noiseless_on_grid_source_is_the_scan_argmax() {
        let theta = rad(12.34);
        let plan = plan_subbands(rad(12.29), rad(12.39), rad(0.01), rad(0.5), geom()).unwrap();
        let cfg = SolverConfig::new(1.0, 100);
        for seed in 0..100 {
            let stat = single_source_stat(theta, None, 100, seed);
            let spec = superres_scan(&plan, &stat, &cfg, 1).unwrap();
            let best = plan.scan_grid.values()[spec.argmax()];
            assert!(
                (best - theta).abs() < 1e-9,
                "seed {seed}: {}",
                best.to_degrees()
            );
        }
    }

    #[test]
    fn far_bands_are_dim() {
        // One beamwidth is about 2/N rad for a half-wavelength ULA.
        let theta = rad(5.0);
        let far = theta + rad(0.5) + 2.0 / 16.0 + rad(1.0);
        let plan = plan_subbands(theta, theta, rad(0.01), rad(0.5), geom()).unwrap();
        let far_plan = plan_subbands(far, far, rad(0.01), rad(0.5), geom()).unwrap();
        let cfg = SolverConfig::new(10.0, 100);
        let mut ratios = Vec::new();
        for seed in 0..50 {
            let stat = single_source_stat(theta, Some(10.0), 100, 100 + seed);
            let on = solve_subband(&plan.bands[0], &stat, &cfg, geom()).unwrap();
            let off = solve_subband(&far_plan.bands[0], &stat, &cfg, geom()).unwrap();
            ratios.push(on / off.max(f64::MIN_POSITIVE));
        }
        ratios.sort_by(f64::total_cmp);
        assert!(
            ratios[ratios.len() / 2] > 5.0,
            "median contrast {}",
            ratios[ratios.len() / 2]
        );
    }

    #[test]
    fn zero_observation_gives_zero() {
        let stat = SufficientStatistic::new(CVector::zeros(16), 10).unwrap();
        let plan = plan_subbands(rad(-0.05), rad(0.05), rad(0.01), rad(0.5), geom()).unwrap();
        let spec = superres_scan(&plan, &stat, &SolverConfig::new(1.0, 10), 1).unwrap();
        assert!(spec.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scan_is_independent_of_worker_count() {
        let stat = single_source_stat(rad(3.0), Some(5.0), 20, 8);
        let plan = plan_subbands(rad(2.8), rad(3.2), rad(0.01), rad(0.5), geom()).unwrap();
        let cfg = SolverConfig::new(1.0, 20).with_init(Init::RandomUniform { seed: 5 });
        let serial = superres_scan(&plan, &stat, &cfg, 1).unwrap();
        let parallel = superres_scan(&plan, &stat, &cfg, 4).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn single_band_scan_equals_band_solve() {
        let stat = single_source_stat(rad(-20.0), Some(10.0), 50, 2);
        let plan = plan_subbands(rad(-20.0), rad(-20.0), rad(0.01), rad(0.5), geom()).unwrap();
        let cfg = SolverConfig::new(1.0, 50);
        let spec = superres_scan(&plan, &stat, &cfg, 1).unwrap();
        let v = solve_subband(&plan.bands[0], &stat, &cfg, geom()).unwrap();
        assert_eq!(spec.values(), &[v]);
    }

    #[test]
    fn detect_fine_delegates() {
        let grid = AngleGrid::uniform(0.0, 0.01, 5).unwrap();
        let spec = Spectrum::new(vec![0.0, 5.0, 0.0, 3.0, 0.0], grid).unwrap();
        assert_eq!(
            detect_fine(&spec, PeakRule::Threshold(4.0))
                .unwrap()
                .indices,
            vec![1]
        );
    }
}
