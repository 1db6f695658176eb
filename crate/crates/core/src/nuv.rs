//! Sparse recovery with normal-with-unknown-variance (NUV) priors.
//!
//! Every dictionary atom `x_m` gets a zero-mean complex Gaussian prior with its
//! own variance `q2[m]`. The variances are estimated by expectation
//! maximization: given the current `q2`, the Gaussian posterior of `x` given the
//! snapshot mean is available in closed form, and the update is
//! `q2[m] <- |E[x_m]|^2 + Var[x_m]`. Atoms whose variance collapses to zero
//! drop out of the support, which is what makes the estimate sparse.
//!
//! All posterior quantities are obtained through the `N x N` precision matrix
//! `W = (A diag(q2) A^H + sigma2/L I)^-1`, never through an `M x M` system.
//! The solver works for any complex dictionary, not only steering matrices.

use nalgebra::{Cholesky, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::array::{AngleGrid, CMatrix, CVector, SteeringDictionary, SufficientStatistic, C64};
use crate::error::{DoaError, Result};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_ITERATIONS: usize = 500;

/// How the variance vector is seeded before the first EM step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Init {
    /// i.i.d. uniform on `(0.5, 1.5]`.
    RandomUniform {
        seed: u64,
    },
    Constant {
        value: f64,
    },
}

impl Default for Init {
    fn default() -> Self {
        Init::RandomUniform { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    /// The single tuning parameter. Larger values enforce more sparsity.
    pub sigma2: f64,
    pub n_snapshots: usize,
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

impl SolverConfig {
    pub fn new(sigma2: f64, n_snapshots: usize) -> Self {
        Self {
            sigma2,
            n_snapshots,
            max_iterations: DEFAULT_MAX_ITERATIONS,
            tolerance: DEFAULT_TOLERANCE,
            init: Init::default(),
        }
    }

    pub fn with_init(mut self, init: Init) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return Err(DoaError::domain(format!(
                "sigma2 must be positive, got {}",
                self.sigma2
            )));
        }
        if self.n_snapshots == 0 {
            return Err(DoaError::domain("solver needs n_snapshots >= 1"));
        }
        if !(self.tolerance > 0.0) {
            return Err(DoaError::domain("tolerance must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(DoaError::domain("max_iterations must be at least 1"));
        }
        if let Init::Constant { value } = self.init {
            if !(value >= 0.0) || !value.is_finite() {
                return Err(DoaError::domain("constant initial variance must be >= 0"));
            }
        }
        Ok(())
    }

    /// Noise scale `sigma2 / L` of the snapshot mean.
    pub fn noise_scale(&self) -> f64 {
        self.sigma2 / self.n_snapshots as f64
    }
}

/// The EM iterate: one nonnegative variance per dictionary atom.
#[derive(Debug, Clone, PartialEq)]
pub struct NuvState {
    q2: DVector<f64>,
    iteration: usize,
}

impl NuvState {
    pub fn new(q2: DVector<f64>) -> Result<Self> {
        if q2.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(DoaError::domain("variances must be finite and nonnegative"));
        }
        Ok(Self { q2, iteration: 0 })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            q2: DVector::zeros(m),
            iteration: 0,
        }
    }

    pub fn initial(m: usize, init: Init) -> Self {
        let q2 = match init {
            Init::Constant { value } => DVector::from_element(m, value),
            Init::RandomUniform { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                // (0.5, 1.5]
                DVector::from_iterator(m, (0..m).map(|_| 1.5 - rng.random::<f64>()))
            }
        };
        Self { q2, iteration: 0 }
    }

    pub fn q2(&self) -> &DVector<f64> {
        &self.q2
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn len(&self) -> usize {
        self.q2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q2.is_empty()
    }
}

/// Per-atom posterior mean and variance.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    pub mean: CVector,
    pub variance: DVector<f64>,
    /// Most negative raw variance that was clamped to zero (0 if none).
    pub clamp_excursion: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub iterations: usize,
    pub final_change: f64,
    pub converged: bool,
    pub worst_clamp: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub state: NuvState,
    pub moments: PosteriorMoments,
    pub trace: SolveTrace,
}

/// The operations the EM solver needs from a dictionary `A` (`N x M`).
///
/// [`CMatrix`] implements them densely for any dictionary. [`SteeringDictionary`]
/// exploits the Vandermonde structure of ULA steering vectors: the weighted
/// Gram matrix is Toeplitz and `a^H W a` only depends on the diagonal sums of
/// `W`, so every operation is `O(NM)` instead of `O(N^2 M)`.
pub trait Dictionary: Sync {
    fn n_rows(&self) -> usize;
    fn n_atoms(&self) -> usize;
    /// `A diag(q2) A^H`.
    fn weighted_gram(&self, q2: &[f64]) -> CMatrix;
    /// `A^H v`.
    fn adjoint_apply(&self, v: &CVector) -> CVector;
    /// `Re(a_m^H W a_m)` for every atom, `W` Hermitian.
    fn quadratic_diag(&self, w: &CMatrix) -> Vec<f64>;
}

impl Dictionary for CMatrix {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_atoms(&self) -> usize {
        self.ncols()
    }

    fn weighted_gram(&self, q2: &[f64]) -> CMatrix {
        let n = self.nrows();
        let mut g = CMatrix::zeros(n, n);
        for (m, &q) in q2.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            let col = self.column(m);
            for j in 0..n {
                let cj = col[j].conj() * q;
                for i in 0..=j {
                    g[(i, j)] += col[i] * cj;
                }
            }
        }
        for j in 0..n {
            g[(j, j)].im = 0.0;
            for i in 0..j {
                g[(j, i)] = g[(i, j)].conj();
            }
        }
        g
    }

    fn adjoint_apply(&self, v: &CVector) -> CVector {
        self.ad_mul(v)
    }

    fn quadratic_diag(&self, w: &CMatrix) -> Vec<f64> {
        let wa = w * self;
        self.column_iter()
            .zip(wa.column_iter())
            .map(|(a, x)| a.dotc(&x).re)
            .collect()
    }
}

impl Dictionary for SteeringDictionary {
    fn n_rows(&self) -> usize {
        self.matrix().nrows()
    }

    fn n_atoms(&self) -> usize {
        self.matrix().ncols()
    }

    fn weighted_gram(&self, q2: &[f64]) -> CMatrix {
        // Row d of A holds z_m^d, so r_d = sum_m q_m z_m^d = (A q)_d and
        // G[i][j] = r_(i-j), with r_(-d) = conj(r_d).
        let a = self.matrix();
        let n = a.nrows();
        let mut r = vec![C64::new(0.0, 0.0); n];
        for (m, &q) in q2.iter().enumerate() {
            if q == 0.0 {
                continue;
            }
            for (rd, z) in r.iter_mut().zip(a.column(m).iter()) {
                *rd += z * q;
            }
        }
        r[0].im = 0.0;
        CMatrix::from_fn(n, n, |i, j| if i >= j { r[i - j] } else { r[j - i].conj() })
    }

    fn adjoint_apply(&self, v: &CVector) -> CVector {
        self.matrix().ad_mul(v)
    }

    fn quadratic_diag(&self, w: &CMatrix) -> Vec<f64> {
        // a^H W a = sum_(n,n') W[n][n'] z^(n'-n) = t_0 + 2 Re(sum_(d>0) t_d z^d)
        // with t_d the sum of the d-th superdiagonal of W.
        let a = self.matrix();
        let n = a.nrows();
        let mut t = vec![C64::new(0.0, 0.0); n];
        for d in 0..n {
            for i in 0..n - d {
                t[d] += w[(i, i + d)];
            }
        }
        let t0 = t[0].re;
        a.column_iter()
            .map(|col| {
                let mut acc = C64::new(0.0, 0.0);
                for d in 1..n {
                    acc += t[d] * col[d];
                }
                t0 + 2.0 * acc.re
            })
            .collect()
    }
}

fn check_dims<D: Dictionary + ?Sized>(dictionary: &D, state: &NuvState) -> Result<()> {
    if dictionary.n_atoms() != state.len() {
        return Err(DoaError::domain(format!(
            "dictionary has {} atoms but state has {} variances",
            dictionary.n_atoms(),
            state.len()
        )));
    }
    Ok(())
}

/// `W = (A diag(q2) A^H + sigma2/L I)^-1` via Cholesky, symmetrized.
pub fn precision_matrix<D: Dictionary + ?Sized>(
    dictionary: &D,
    state: &NuvState,
    config: &SolverConfig,
) -> Result<CMatrix> {
    check_dims(dictionary, state)?;
    config.validate()?;
    precision_unchecked(dictionary, state.q2.as_slice(), config.noise_scale())
}

fn precision_unchecked<D: Dictionary + ?Sized>(
    dictionary: &D,
    q2: &[f64],
    noise_scale: f64,
) -> Result<CMatrix> {
    let mut g = dictionary.weighted_gram(q2);
    for j in 0..g.nrows() {
        g[(j, j)].re += noise_scale;
    }
    let chol = Cholesky::new(g).ok_or_else(|| {
        DoaError::Factorization("Gram matrix is not Hermitian positive definite".into())
    })?;
    Ok(inverse_from_factor(chol.l_dirty()))
}

/// `(L L^H)^-1 = X^H X` with `X = L^-1`; only the lower triangle of `l` is read.
/// The result is exactly Hermitian.
fn inverse_from_factor(l: &CMatrix) -> CMatrix {
    let n = l.nrows();
    let ls = l.as_slice();
    let at = |i: usize, j: usize| ls[i + j * n];
    let mut x = vec![C64::new(0.0, 0.0); n * n];
    for j in 0..n {
        x[j + j * n] = C64::new(1.0, 0.0) / at(j, j);
        for i in j + 1..n {
            let mut acc = C64::new(0.0, 0.0);
            for k in j..i {
                acc += at(i, k) * x[k + j * n];
            }
            x[i + j * n] = -acc / at(i, i);
        }
    }
    let mut w = CMatrix::zeros(n, n);
    for j in 0..n {
        let cj = &x[j * n..(j + 1) * n];
        for i in 0..=j {
            let ci = &x[i * n..(i + 1) * n];
            let mut acc = C64::new(0.0, 0.0);
            for k in j..n {
                acc += ci[k].conj() * cj[k];
            }
            if i == j {
                acc.im = 0.0;
            }
            w[(i, j)] = acc;
            w[(j, i)] = acc.conj();
        }
    }
    w
}

/// Closed-form posterior moments under the current variances.
///
/// `mean = diag(q2) A^H W ybar`, `var = q2 - q2^2 * diag(A^H W A)` (clamped at 0).
pub fn posterior_moments<D: Dictionary + ?Sized>(
    dictionary: &D,
    state: &NuvState,
    w: &CMatrix,
    stat: &SufficientStatistic,
) -> Result<PosteriorMoments> {
    check_dims(dictionary, state)?;
    let n = dictionary.n_rows();
    if w.shape() != (n, n) || stat.n_sensors() != n {
        return Err(DoaError::domain(format!(
            "dimension mismatch: dictionary has {n} rows, W is {:?}, ybar has {}",
            w.shape(),
            stat.n_sensors()
        )));
    }
    Ok(moments_unchecked(
        dictionary,
        state.q2.as_slice(),
        w,
        stat.mean(),
    ))
}

fn moments_unchecked<D: Dictionary + ?Sized>(
    dictionary: &D,
    q2: &[f64],
    w: &CMatrix,
    ybar: &CVector,
) -> PosteriorMoments {
    let proj = dictionary.adjoint_apply(&(w * ybar));
    let quad = dictionary.quadratic_diag(w);
    let m = q2.len();
    let mut mean = CVector::zeros(m);
    let mut variance = DVector::zeros(m);
    let mut clamp_excursion = 0.0f64;
    for k in 0..m {
        let q = q2[k];
        if q == 0.0 {
            continue;
        }
        mean[k] = proj[k] * q;
        let v = q - q * q * quad[k];
        if v < 0.0 {
            clamp_excursion = clamp_excursion.min(v);
        } else {
            variance[k] = v;
        }
    }
    PosteriorMoments {
        mean,
        variance,
        clamp_excursion,
    }
}

/// One EM update `q2[m] <- |E[x_m]|^2 + Var[x_m]`.
pub fn em_step<D: Dictionary + ?Sized>(
    dictionary: &D,
    state: &NuvState,
    stat: &SufficientStatistic,
    config: &SolverConfig,
) -> Result<NuvState> {
    let w = precision_matrix(dictionary, state, config)?;
    let moments = posterior_moments(dictionary, state, &w, stat)?;
    Ok(next_state(state, &moments))
}

fn next_state(state: &NuvState, moments: &PosteriorMoments) -> NuvState {
    let q2 = DVector::from_iterator(
        state.len(),
        moments
            .mean
            .iter()
            .zip(moments.variance.iter())
            .map(|(x, v)| x.norm_sqr() + v),
    );
    NuvState {
        q2,
        iteration: state.iteration + 1,
    }
}

/// Runs EM from the configured initialization until convergence.
pub fn solve<D: Dictionary + ?Sized>(
    dictionary: &D,
    stat: &SufficientStatistic,
    config: &SolverConfig,
) -> Result<Solution> {
    solve_observed(dictionary, stat, config, |_| {})
}

/// Like [`solve`], calling `observe` on the initial state and on every iterate.
pub fn solve_observed<D: Dictionary + ?Sized>(
    dictionary: &D,
    stat: &SufficientStatistic,
    config: &SolverConfig,
    mut observe: impl FnMut(&NuvState),
) -> Result<Solution> {
    config.validate()?;
    if stat.n_sensors() != dictionary.n_rows() {
        return Err(DoaError::domain(format!(
            "ybar has {} elements, dictionary has {} rows",
            stat.n_sensors(),
            dictionary.n_rows()
        )));
    }
    let noise_scale = config.noise_scale();
    let mut state = NuvState::initial(dictionary.n_atoms(), config.init);
    observe(&state);
    let mut worst_clamp = 0.0f64;
    let mut final_change = f64::INFINITY;
    let mut converged = false;

    for _ in 0..config.max_iterations {
        let w = precision_unchecked(dictionary, state.q2.as_slice(), noise_scale)?;
        let moments = moments_unchecked(dictionary, state.q2.as_slice(), &w, stat.mean());
        worst_clamp = worst_clamp.min(moments.clamp_excursion);
        let next = next_state(&state, &moments);
        if next.q2.iter().any(|v| !v.is_finite()) {
            return Err(DoaError::Numerical {
                iteration: next.iteration,
                message: "non-finite variance".into(),
            });
        }
        final_change = next
            .q2
            .iter()
            .zip(state.q2.iter())
            .fold(0.0f64, |acc, (a, b)| acc.max((a - b).abs()));
        let scale = next.q2.amax().max(1.0);
        state = next;
        observe(&state);
        if final_change < config.tolerance * scale {
            converged = true;
            break;
        }
    }

    let w = precision_unchecked(dictionary, state.q2.as_slice(), noise_scale)?;
    let moments = moments_unchecked(dictionary, state.q2.as_slice(), &w, stat.mean());
    worst_clamp = worst_clamp.min(moments.clamp_excursion);
    let trace = SolveTrace {
        iterations: state.iteration,
        final_change,
        converged,
        worst_clamp,
    };
    Ok(Solution {
        state,
        moments,
        trace,
    })
}

/// Nonnegative per-angle magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    values: Vec<f64>,
    grid: AngleGrid,
}

impl Spectrum {
    pub fn new(values: Vec<f64>, grid: AngleGrid) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(DoaError::domain(format!(
                "spectrum has {} values for {} grid points",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(DoaError::domain("spectrum values must be nonnegative"));
        }
        Ok(Self { values, grid })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn grid(&self) -> &AngleGrid {
        &self.grid
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the largest value; lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        best
    }

    /// Two-column CSV `angle_deg,magnitude`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("angle_deg,magnitude\n");
        for (a, v) in self.grid.values().iter().zip(&self.values) {
            out.push_str(&format!("{},{}\n", a.to_degrees(), v));
        }
        out
    }
}

/// `values[m] = |mean[m]|`.
pub fn spectrum(moments: &PosteriorMoments, grid: &AngleGrid) -> Result<Spectrum> {
    Spectrum::new(
        moments.mean.iter().map(|x| x.norm()).collect(),
        grid.clone(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeakRule {
    FixedK(usize),
    Threshold(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakSelection {
    pub rule: PeakRule,
    /// Sorted by descending spectrum value, lower index first on ties.
    pub indices: Vec<usize>,
    pub angles: Vec<f64>,
    /// How many trailing entries were filled by magnitude because the spectrum
    /// had too few strict local maxima.
    pub fallback_filled: usize,
}

fn strict_local_maxima(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    (0..n)
        .filter(|&i| {
            let left = i == 0 || values[i] > values[i - 1];
            let right = i + 1 == n || values[i] > values[i + 1];
            left && right
        })
        .collect()
}

fn by_value_desc(values: &[f64], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
}

pub fn select_peaks(spec: &Spectrum, rule: PeakRule) -> Result<PeakSelection> {
    let values = spec.values();
    if values.is_empty() {
        return Err(DoaError::domain("cannot select peaks of an empty spectrum"));
    }
    let mut maxima = strict_local_maxima(values);
    by_value_desc(values, &mut maxima);
    let mut fallback_filled = 0;
    let indices = match rule {
        PeakRule::FixedK(k) => {
            if k > values.len() {
                return Err(DoaError::domain(format!(
                    "asked for {k} peaks in a spectrum of {} points",
                    values.len()
                )));
            }
            maxima.truncate(k);
            if maxima.len() < k {
                let mut rest: Vec<usize> =
                    (0..values.len()).filter(|i| !maxima.contains(i)).collect();
                by_value_desc(values, &mut rest);
                fallback_filled = k - maxima.len();
                maxima.extend(rest.into_iter().take(fallback_filled));
            }
            maxima
        }
        PeakRule::Threshold(eta) => maxima.into_iter().filter(|&i| values[i] > eta).collect(),
    };
    let angles = indices.iter().map(|&i| spec.grid().values()[i]).collect();
    Ok(PeakSelection {
        rule,
        indices,
        angles,
        fallback_filled,
    })
}
