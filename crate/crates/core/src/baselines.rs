//! Classical covariance-based estimators: conventional (Bartlett) beamforming,
//! MVDR/Capon, MUSIC and Root-MUSIC.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{Cholesky, DVector};

use crate::array::{steering_unchecked, AngleGrid, CMatrix, CVector, UlaGeometry, C64};
use crate::error::{DoaError, Result};
use crate::nuv::Spectrum;

/// Roots this close to the unit circle count as lying on it.
const UNIT_CIRCLE_TOL: f64 = 1e-6;
/// Roots whose phases differ by less than this are one root (a split pair).
const SAME_PHASE_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct SubspaceDecomposition {
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `N x (N - K)` orthonormal basis of the noise subspace.
    pub noise_subspace: CMatrix,
}

fn check_square(cov: &CMatrix) -> Result<usize> {
    if cov.nrows() != cov.ncols() || cov.nrows() == 0 {
        return Err(DoaError::domain(format!(
            "covariance must be square, got {:?}",
            cov.shape()
        )));
    }
    Ok(cov.nrows())
}

fn quad_form(cov: &CMatrix, a: &CVector) -> f64 {
    (a.adjoint() * cov * a)[(0, 0)].re
}

pub fn bartlett_spectrum(cov: &CMatrix, grid: &AngleGrid) -> Result<Spectrum> {
    let n = check_square(cov)?;
    let norm = (n * n) as f64;
    let values = grid
        .values()
        .iter()
        .map(|&t| (quad_form(cov, &steering_unchecked(t, n)) / norm).max(0.0))
        .collect();
    Spectrum::new(values, grid.clone())
}

/// Loading applied when the caller does not choose one: `1e-6 tr(R) / N`.
pub fn default_diagonal_load(cov: &CMatrix) -> f64 {
    1e-6 * cov.trace().re / cov.nrows() as f64
}

/// `1 / (a^H (R + load I)^-1 a)`.
pub fn mvdr_spectrum(cov: &CMatrix, grid: &AngleGrid, diagonal_load: f64) -> Result<Spectrum> {
    let n = check_square(cov)?;
    if !(diagonal_load >= 0.0) {
        return Err(DoaError::domain("diagonal load must be nonnegative"));
    }
    let mut loaded = cov.clone();
    for i in 0..n {
        loaded[(i, i)] += C64::new(diagonal_load, 0.0);
    }
    let chol = Cholesky::new(loaded).ok_or(DoaError::SingularCovariance {
        load: diagonal_load,
    })?;
    let l = chol.l();
    let values = grid
        .values()
        .iter()
        .map(|&t| {
            let a = steering_unchecked(t, n);
            // a^H R^-1 a = |L^-1 a|^2
            let z = l
                .solve_lower_triangular(&a)
                .expect("Cholesky factor has a nonzero diagonal");
            1.0 / z.norm_squared()
        })
        .collect();
    Spectrum::new(values, grid.clone())
}

/// Eigen-decomposition of a Hermitian covariance, split at `k` sources.
///
/// Under tied eigenvalues the basis chosen for the noise subspace follows the
/// factorization's internal order and is not stable across inputs.
pub fn noise_subspace(cov: &CMatrix, k: usize) -> Result<SubspaceDecomposition> {
    let n = check_square(cov)?;
    if k == 0 || k >= n {
        return Err(DoaError::domain(format!(
            "need 1 <= K < N, got K={k}, N={n}"
        )));
    }
    let eig = cov.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let noise_cols: Vec<CVector> = order[k..]
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    Ok(SubspaceDecomposition {
        eigenvalues,
        noise_subspace: CMatrix::from_columns(&noise_cols),
    })
}

/// `1 / |U_n^H a|^2`.
pub fn music_spectrum(cov: &CMatrix, grid: &AngleGrid, k: usize) -> Result<Spectrum> {
    let n = check_square(cov)?;
    let sub = noise_subspace(cov, k)?;
    let un_h = sub.noise_subspace.adjoint();
    let values = grid
        .values()
        .iter()
        .map(|&t| {
            let p = (&un_h * steering_unchecked(t, n)).norm_squared();
            1.0 / p.max(f64::MIN_POSITIVE)
        })
        .collect();
    Spectrum::new(values, grid.clone())
}

/// Coefficients (ascending powers) of `z^(N-1) a(z)^H C a(z)` with
/// `C = U_n U_n^H`: the coefficient of `z^(d + N - 1)` is the sum of the
/// `d`-th diagonal of `C`.
fn root_music_polynomial(un: &CMatrix) -> Vec<C64> {
    let n = un.nrows();
    let c = un * un.adjoint();
    let mut coeffs = vec![C64::new(0.0, 0.0); 2 * n - 1];
    for row in 0..n {
        for col in 0..n {
            // element (row, col) multiplies z^(col - row)
            coeffs[col + n - 1 - row] += c[(row, col)];
        }
    }
    coeffs
}

fn eval_with_derivatives(p: &[C64], z: C64) -> (C64, C64, C64) {
    let mut v = C64::new(0.0, 0.0);
    let mut d1 = C64::new(0.0, 0.0);
    let mut d2 = C64::new(0.0, 0.0);
    for &c in p.iter().rev() {
        d2 = d2 * z + d1;
        d1 = d1 * z + v;
        v = v * z + c;
    }
    (v, d1, d2 * 2.0)
}

/// Newton polishing. A double root on the unit circle (the noiseless case) is
/// only determined to sqrt(eps) by `p` itself, so a step on `p'` is also tried
/// and kept when it does not increase `|p|`.
fn polish_root(p: &[C64], mut z: C64) -> C64 {
    for _ in 0..50 {
        let (v, d1, _) = eval_with_derivatives(p, z);
        if v.norm() == 0.0 || d1.norm() == 0.0 {
            break;
        }
        let cand = z - v / d1;
        if cand.is_finite() && eval_with_derivatives(p, cand).0.norm() < v.norm() {
            z = cand;
        } else {
            break;
        }
    }
    let mut zd = z;
    for _ in 0..50 {
        let (_, d1, d2) = eval_with_derivatives(p, zd);
        if d2.norm() == 0.0 {
            break;
        }
        let step = d1 / d2;
        zd -= step;
        if !zd.is_finite() || step.norm() <= 1e-17 * zd.norm() {
            break;
        }
    }
    if zd.is_finite()
        && eval_with_derivatives(p, zd).0.norm() <= eval_with_derivatives(p, z).0.norm()
    {
        zd
    } else {
        z
    }
}

/// All roots of the polynomial with ascending coefficients `p`.
pub(crate) fn polynomial_roots(p: &[C64]) -> Vec<C64> {
    let mut p: Vec<C64> = p.to_vec();
    while p.len() > 1 && p.last().is_some_and(|c| c.norm() == 0.0) {
        p.pop();
    }
    let degree = p.len() - 1;
    if degree == 0 {
        return Vec::new();
    }
    let lead = p[degree];
    let mut companion = CMatrix::zeros(degree, degree);
    for i in 1..degree {
        companion[(i, i - 1)] = C64::new(1.0, 0.0);
    }
    for i in 0..degree {
        companion[(i, degree - 1)] = -p[i] / lead;
    }
    let roots = companion.eigenvalues().unwrap_or_else(|| DVector::zeros(0));
    roots.iter().map(|&z| polish_root(&p, z)).collect()
}

fn angle_from_root(z: C64) -> f64 {
    let s = (-z.arg() / PI).clamp(-1.0, 1.0);
    let theta = s.asin();
    // +pi/2 aliases to -pi/2 on a half-wavelength array.
    if theta >= FRAC_PI_2 {
        -FRAC_PI_2
    } else {
        theta
    }
}

/// Gridless estimate of `k` angles, sorted ascending.
///
/// Of each conjugate-reciprocal root pair the one inside the unit circle is
/// used; roots on the circle up to `1e-6` are admissible. The `k` admissible
/// roots closest to the circle are mapped through `theta = asin(-arg(z)/pi)`.
pub fn root_music(cov: &CMatrix, k: usize, geometry: UlaGeometry) -> Result<Vec<f64>> {
    let n = check_square(cov)?;
    if n != geometry.n_sensors() {
        return Err(DoaError::domain(format!(
            "covariance is {n}x{n} but the array has {} sensors",
            geometry.n_sensors()
        )));
    }
    let sub = noise_subspace(cov, k)?;
    let roots = polynomial_roots(&root_music_polynomial(&sub.noise_subspace));
    let mut admissible: Vec<C64> = roots
        .into_iter()
        .filter(|z| z.is_finite() && z.norm() <= 1.0 + UNIT_CIRCLE_TOL)
        .collect();
    admissible.sort_by(|a, b| (1.0 - a.norm()).abs().total_cmp(&(1.0 - b.norm()).abs()));
    let mut chosen: Vec<C64> = Vec::with_capacity(k);
    for z in admissible {
        if chosen.len() == k {
            break;
        }
        let duplicate = chosen.iter().any(|c| {
            let d = (c.arg() - z.arg()).abs();
            d.min(2.0 * PI - d) < SAME_PHASE_TOL
        });
        if !duplicate {
            chosen.push(z);
        }
    }
    if chosen.len() < k {
        return Err(DoaError::RootDeficit {
            found: chosen.len(),
            needed: k,
        });
    }
    let mut angles: Vec<f64> = chosen.into_iter().map(angle_from_root).collect();
    angles.sort_by(f64::total_cmp);
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::{build_grid, rad, steering_vector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn outer_sum(angles: &[f64], n: usize) -> CMatrix {
        let mut cov = CMatrix::zeros(n, n);
        for &t in angles {
            let a = steering_unchecked(t, n);
            cov += &a * a.adjoint();
        }
        cov
    }

    fn random_psd(n: usize, seed: u64) -> CMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = CMatrix::from_fn(n, 2 * n, |_, _| {
            c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
        });
        &x * x.adjoint()
    }

    #[test]
    fn bartlett_identity_is_flat() {
        let spec = bartlett_spectrum(&CMatrix::identity(8, 8), &build_grid(90).unwrap()).unwrap();
        assert!(spec.values().iter().all(|v| (v - 1.0 / 8.0).abs() < 1e-14));
    }

    #[test]
    fn bartlett_rank_one_peaks_with_unit_value() {
        let grid = build_grid(180).unwrap();
        let cov = outer_sum(&[grid.values()[70]], 8);
        let spec = bartlett_spectrum(&cov, &grid).unwrap();
        assert_eq!(spec.argmax(), 70);
        assert!((spec.values()[70] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bartlett_matches_quadratic_form_oracle() {
        let cov = random_psd(5, 1);
        let grid = build_grid(37).unwrap();
        let spec = bartlett_spectrum(&cov, &grid).unwrap();
        for (m, &t) in grid.values().iter().enumerate() {
            let mut acc = c(0.0, 0.0);
            for i in 0..5 {
                for j in 0..5 {
                    let ai = c(0.0, -PI * i as f64 * t.sin()).exp();
                    let aj = c(0.0, -PI * j as f64 * t.sin()).exp();
                    acc += ai.conj() * cov[(i, j)] * aj;
                }
            }
            assert!((spec.values()[m] - acc.re / 25.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mvdr_cases() {
        let grid = build_grid(90).unwrap();
        let flat = mvdr_spectrum(&CMatrix::identity(6, 6), &grid, 0.0).unwrap();
        assert!(flat.values().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-13));

        let t0 = grid.values()[30];
        let cov = outer_sum(&[t0], 8) * c(100.0, 0.0) + CMatrix::identity(8, 8);
        let spec = mvdr_spectrum(&cov, &grid, 0.0).unwrap();
        assert_eq!(spec.argmax(), 30);

        let base = random_psd(6, 3);
        let s1 = mvdr_spectrum(&base, &grid, 0.1).unwrap();
        let s2 = mvdr_spectrum(&(base * c(2.0, 0.0)), &grid, 0.2).unwrap();
        for (a, b) in s1.values().iter().zip(s2.values()) {
            assert!((2.0 * a - b).abs() < 1e-12 * b.max(1.0));
        }
    }

    #[test]
    fn mvdr_singular_without_load() {
        let cov = outer_sum(&[0.3], 6);
        assert!(matches!(
            mvdr_spectrum(&cov, &build_grid(10).unwrap(), 0.0),
            Err(DoaError::SingularCovariance { .. })
        ));
        let load = default_diagonal_load(&cov);
        assert!(mvdr_spectrum(&cov, &build_grid(10).unwrap(), load).is_ok());
    }

    #[test]
    fn noise_subspace_of_diagonal() {
        let cov = CMatrix::from_diagonal(&DVector::from_vec(vec![
            c(4.0, 0.0),
            c(1.0, 0.0),
            c(1.0, 0.0),
            c(1.0, 0.0),
        ]));
        let sub = noise_subspace(&cov, 1).unwrap();
        assert_eq!(sub.eigenvalues[0], 4.0);
        assert_eq!(sub.noise_subspace.shape(), (4, 3));
        assert!(sub.noise_subspace.row(0).norm() < 1e-12);
    }

    #[test]
    fn noise_subspace_of_identity_is_orthonormal() {
        let sub = noise_subspace(&CMatrix::identity(5, 5), 1).unwrap();
        let u = &sub.noise_subspace;
        assert_eq!(u.shape(), (5, 4));
        assert!((u.adjoint() * u - CMatrix::identity(4, 4)).norm() < 1e-10);
        assert!(noise_subspace(&CMatrix::identity(5, 5), 5).is_err());
    }

    #[test]
    fn noise_subspace_eigen_residual() {
        let cov = random_psd(7, 9);
        let sub = noise_subspace(&cov, 3).unwrap();
        let u = &sub.noise_subspace;
        let lambda = CMatrix::from_diagonal(&DVector::from_iterator(
            4,
            sub.eigenvalues[3..].iter().map(|&e| c(e, 0.0)),
        ));
        assert!((&cov * u - u * lambda).norm() < 1e-9);
        assert!(sub.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn music_noiseless_peaks() {
        let grid = build_grid(180).unwrap();
        let (i1, i2) = (60, 110);
        let cov = outer_sum(&[grid.values()[i1], grid.values()[i2]], 8);
        let spec = music_spectrum(&cov, &grid, 2).unwrap();
        let mut sorted = spec.values().to_vec();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!(spec.values()[i1] > 1e6 * median);
        assert!(spec.values()[i2] > 1e6 * median);

        let flat = music_spectrum(&CMatrix::identity(8, 8), &grid, 2).unwrap();
        let first = flat.values()[0];
        assert!(flat
            .values()
            .iter()
            .all(|v| (v - first).abs() < 1e-10 * first));
    }

    #[test]
    fn music_matches_projection_oracle() {
        let cov = random_psd(6, 5);
        let grid = build_grid(45).unwrap();
        let spec = music_spectrum(&cov, &grid, 2).unwrap();
        let sub = noise_subspace(&cov, 2).unwrap();
        // I - Us Us^H equals Un Un^H.
        let proj = &sub.noise_subspace * sub.noise_subspace.adjoint();
        for (m, &t) in grid.values().iter().enumerate() {
            let a = steering_vector(t, UlaGeometry::new(6).unwrap()).unwrap();
            let v = 1.0 / (a.adjoint() * &proj * &a)[(0, 0)].re;
            assert!((spec.values()[m] - v).abs() < 1e-9 * v);
        }
    }

    #[test]
    fn polynomial_roots_of_known_cubic() {
        // (z-1)(z+2)(z-3i)
        let roots = [c(1.0, 0.0), c(-2.0, 0.0), c(0.0, 3.0)];
        let p = [
            roots[0] * roots[1] * roots[2] * c(-1.0, 0.0),
            roots[0] * roots[1] + roots[0] * roots[2] + roots[1] * roots[2],
            -(roots[0] + roots[1] + roots[2]),
            c(1.0, 0.0),
        ];
        let found = polynomial_roots(&p);
        assert_eq!(found.len(), 3);
        for r in roots {
            assert!(found.iter().any(|f| (f - r).norm() < 1e-12));
        }
    }

    #[test]
    fn root_music_noiseless_cases() {
        let g8 = UlaGeometry::new(8).unwrap();
        let est = root_music(&outer_sum(&[rad(20.0)], 8), 1, g8).unwrap();
        assert!((est[0] - rad(20.0)).abs() < 1e-6);

        let est = root_music(&outer_sum(&[0.0], 8), 1, g8).unwrap();
        assert!(est[0].abs() < 1e-6);

        let est = root_music(&outer_sum(&[rad(-30.0), rad(30.0)], 8), 2, g8).unwrap();
        assert!((est[0] - rad(-30.0)).abs() < 1e-6);
        assert!((est[1] - rad(30.0)).abs() < 1e-6);
    }

    #[test]
    fn root_music_near_endfire() {
        let g = UlaGeometry::new(16).unwrap();
        for t in [-89.9, -85.0, 85.0, 89.5, 89.9] {
            let est = root_music(&outer_sum(&[rad(t)], 16), 1, g).unwrap();
            assert!(
                (est[0] - rad(t)).abs() < 1e-6,
                "{t}: {}",
                est[0].to_degrees()
            );
        }
    }

    #[test]
    fn root_music_agrees_with_music_argmax() {
        let g = UlaGeometry::new(10).unwrap();
        let grid = build_grid(1800).unwrap();
        for t in [-41.23, 7.77, 63.05] {
            let cov = outer_sum(&[rad(t)], 10);
            let root = root_music(&cov, 1, g).unwrap()[0];
            let spec = music_spectrum(&cov, &grid, 1).unwrap();
            let peak = grid.values()[spec.argmax()];
            assert!((root - peak).abs() <= grid.step() / 2.0 + 1e-9);
        }
    }

    #[test]
    fn argmax_is_scale_invariant() {
        let grid = build_grid(120).unwrap();
        let cov = random_psd(6, 12) + outer_sum(&[0.4], 6) * c(20.0, 0.0);
        let scaled = &cov * c(37.5, 0.0);
        let load = default_diagonal_load(&cov);
        assert_eq!(
            bartlett_spectrum(&cov, &grid).unwrap().argmax(),
            bartlett_spectrum(&scaled, &grid).unwrap().argmax()
        );
        assert_eq!(
            mvdr_spectrum(&cov, &grid, load).unwrap().argmax(),
            mvdr_spectrum(&scaled, &grid, load * 37.5).unwrap().argmax()
        );
        assert_eq!(
            music_spectrum(&cov, &grid, 1).unwrap().argmax(),
            music_spectrum(&scaled, &grid, 1).unwrap().argmax()
        );
    }
}
