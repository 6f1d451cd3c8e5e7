//! Sampled Fredholm determinants, a quadrature oracle, and the concentration bound.
//!
//! All integrals are against the uniform probability measure on the model window,
//! so `logdet(I + SAS*)` is approximated by `logdet(I_n + G/n)` with
//! `G_ij = â(x_i, x_j)` over uniform draws or quadrature nodes.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DppError, Result};
use crate::model::{KernelExpansion, LikelihoodModel, Point, RkhsKernel, Window};
use crate::numerics::{logdet_pd_mat, sym_eigenvalues};

/// Refinement threshold for the quadrature oracle.
pub const QUADRATURE_TOLERANCE: f64 = 1e-4;
pub const MIN_QUADRATURE_RESOLUTION: usize = 16;
/// Largest per-axis resolution tried when refining the oracle.
pub const MAX_QUADRATURE_RESOLUTION: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct FredholmDiag {
    pub n: usize,
    pub sampled_logdet: f64,
    pub oracle_logdet: Option<f64>,
    pub c_n: Option<f64>,
    /// `logdet(I + c_n A)` over the operator spectrum.
    pub bound: Option<f64>,
    pub warnings: Vec<String>,
}

/// `logdet(I + FFᵀ/n)`, equal to `logdet(I_n + FᵀF/n)`.
fn logdet_of_factor(f: &Mat<f64>) -> Result<f64> {
    let n = f.ncols() as f64;
    if f.nrows() == 0 {
        return Ok(0.0);
    }
    let mut g = f * f.transpose() * faer::Scale(1.0 / n);
    for i in 0..g.nrows() {
        g[(i, i)] += 1.0;
    }
    logdet_pd_mat(g.as_ref())
}

/// `logdet(I_n + G/n)` with `G_ij = v(x_i, x_j)` over `eval_points`.
pub fn sampled_logdet<M: KernelExpansion + ?Sized>(model: &M, eval_points: &[Point]) -> Result<f64> {
    if eval_points.is_empty() {
        return Err(DppError::input("sampled log-determinant needs at least one point"));
    }
    for x in eval_points {
        model.window().check_point(x)?;
    }
    logdet_of_factor(&model.factor_at(eval_points)?)
}

/// Cell-centre quadrature of `logdet(I + SAS*)` at a single resolution.
pub fn quadrature_logdet<M: KernelExpansion + ?Sized>(model: &M, resolution: usize) -> Result<f64> {
    if resolution < 1 {
        return Err(DppError::input("quadrature resolution must be positive"));
    }
    sampled_logdet(model, &model.window().cell_centers(resolution))
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureResult {
    /// Value at the finer resolution.
    pub value: f64,
    pub coarse_value: f64,
    pub resolution: usize,
    pub converged: bool,
}

impl QuadratureResult {
    pub fn change(&self) -> f64 {
        (self.value - self.coarse_value).abs()
    }
}

/// Quadrature oracle with one doubling check: evaluates at `resolution` and `2·resolution`.
pub fn quadrature_fredholm<M: KernelExpansion + ?Sized>(model: &M, resolution: usize) -> Result<QuadratureResult> {
    if resolution < MIN_QUADRATURE_RESOLUTION {
        return Err(DppError::input(format!(
            "quadrature resolution must be at least {MIN_QUADRATURE_RESOLUTION} per axis, got {resolution}"
        )));
    }
    let coarse_value = quadrature_logdet(model, resolution)?;
    let value = quadrature_logdet(model, 2 * resolution)?;
    Ok(QuadratureResult {
        value,
        coarse_value,
        resolution: 2 * resolution,
        converged: (value - coarse_value).abs() < QUADRATURE_TOLERANCE,
    })
}

/// Doubles the resolution from `start` until the change is below tolerance
/// or [`MAX_QUADRATURE_RESOLUTION`] is reached.
pub fn refined_quadrature<M: KernelExpansion + ?Sized>(model: &M, start: usize) -> Result<QuadratureResult> {
    let mut res = quadrature_fredholm(model, start)?;
    while !res.converged && 2 * res.resolution <= MAX_QUADRATURE_RESOLUTION {
        let value = quadrature_logdet(model, 2 * res.resolution)?;
        res = QuadratureResult {
            value,
            coarse_value: res.value,
            resolution: 2 * res.resolution,
            converged: (value - res.value).abs() < QUADRATURE_TOLERANCE,
        };
    }
    Ok(res)
}

/// `c_n = 4κ²L/(3n) + √(2κ²ℓL/n)` for a given `L = log(2κ²/(ℓδ))`.
pub fn c_n_from_log_term(n: usize, log_term: f64, ell: f64, kappa2: f64) -> f64 {
    let n = n as f64;
    4.0 * kappa2 * log_term / (3.0 * n) + (2.0 * kappa2 * ell * log_term / n).sqrt()
}

pub fn c_n_bound(n: usize, delta: f64, ell_est: f64, kappa2: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(DppError::input(format!("delta must lie in (0, 1/2), got {delta}")));
    }
    if !(ell_est > 0.0) || !(kappa2 > 0.0) || n == 0 {
        return Err(DppError::input(format!(
            "c_n needs n ≥ 1, ell > 0 and kappa2 > 0 (got n = {n}, ell = {ell_est}, kappa2 = {kappa2})"
        )));
    }
    let log_term = (2.0 * kappa2 / (ell_est * delta)).ln();
    if !(log_term > 0.0) {
        return Err(DppError::input(format!(
            "log(2κ²/(ℓδ)) must be positive, got {log_term} (ell = {ell_est}, delta = {delta})"
        )));
    }
    Ok(c_n_from_log_term(n, log_term, ell_est, kappa2))
}

/// Estimate of `λ_max` of the kernel integral operator on the window: the
/// top eigenvalue of the grid Gram matrix divided by the node count.
///
/// The Gaussian Gram matrix on a tensor grid is a Kronecker product of
/// one-dimensional Gram matrices, so its top eigenvalue is the product of
/// the per-axis top eigenvalues.
pub fn estimate_ell(kernel: &RkhsKernel, window: &Window, resolution: usize) -> Result<f64> {
    if resolution < 1 {
        return Err(DppError::input("resolution must be positive"));
    }
    let mut ell = 1.0;
    for axis in 0..window.dim() {
        let h = (window.hi()[axis] - window.lo()[axis]) / resolution as f64;
        let nodes: Vec<f64> = (0..resolution)
            .map(|i| window.lo()[axis] + (i as f64 + 0.5) * h)
            .collect();
        let g = Mat::from_fn(resolution, resolution, |i, j| {
            kernel.eval(&[nodes[i]], &[nodes[j]]) / resolution as f64
        });
        ell *= sym_eigenvalues(g.as_ref())?[0];
    }
    Ok(ell)
}

/// Spectrum of the fitted operator on the RKHS: the eigenvalues of `KC`,
/// computed as those of the congruent `B = R C Rᵀ` and clamped at zero.
pub fn operator_spectrum(model: &LikelihoodModel) -> Result<Vec<f64>> {
    Ok(sym_eigenvalues(model.b_matrix.as_mat())?
        .into_iter()
        .map(|v| v.max(0.0))
        .collect())
}

/// `logdet(I + c A) = Σ log(1 + c μ_i)`.
pub fn bound_logdet(spectrum: &[f64], c: f64) -> f64 {
    spectrum.iter().map(|&mu| (c * mu.max(0.0)).ln_1p()).sum()
}

/// Full diagnostic at one `n`: sampled value, oracle and bound.
pub fn diagnose(
    model: &LikelihoodModel,
    eval_points: &[Point],
    oracle: &QuadratureResult,
    delta: f64,
    ell: f64,
) -> Result<FredholmDiag> {
    let n = eval_points.len();
    let sampled = sampled_logdet(model, eval_points)?;
    let c_n = c_n_bound(n, delta, ell, model.kernel.kappa2())?;
    let mut warnings = Vec::new();
    if !oracle.converged {
        warnings.push(format!(
            "quadrature oracle not converged at resolution {} (change {:e})",
            oracle.resolution,
            oracle.change()
        ));
    }
    Ok(FredholmDiag {
        n,
        sampled_logdet: sampled,
        oracle_logdet: Some(oracle.value),
        c_n: Some(c_n),
        bound: Some(bound_logdet(&operator_spectrum(model)?, c_n)),
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayRow {
    pub n: usize,
    pub seed: u64,
    pub sampled: f64,
    pub abs_error: f64,
    pub c_n: f64,
    pub bound: f64,
}

impl DecayRow {
    pub fn within_bound(&self) -> bool {
        self.abs_error <= self.bound
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecayReport {
    pub oracle: QuadratureResult,
    pub ell: f64,
    pub rows: Vec<DecayRow>,
    /// `(n, mean |sampled − oracle|)` in the order of the input list.
    pub means: Vec<(usize, f64)>,
    /// Least-squares slope of `log mean` against `log n`.
    pub slope: f64,
}

impl DecayReport {
    pub fn fraction_within_bound(&self) -> f64 {
        let ok = self.rows.iter().filter(|r| r.within_bound()).count();
        ok as f64 / self.rows.len() as f64
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| format!("{},{},{:.16e}", r.n, r.seed, r.abs_error))
            .collect()
    }
}

/// Least-squares slope of `y` on `x`.
pub fn loglog_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Settings of the Monte-Carlo decay experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct DecayConfig {
    pub n_list: Vec<usize>,
    pub seeds: usize,
    pub base_seed: u64,
    pub delta: f64,
    /// Starting per-axis resolution of the quadrature oracle.
    pub oracle_resolution: usize,
}

impl DecayConfig {
    pub fn new(n_list: Vec<usize>, seeds: usize, base_seed: u64) -> Self {
        DecayConfig {
            n_list,
            seeds,
            base_seed,
            delta: 0.05,
            oracle_resolution: 64,
        }
    }
}

/// Per-`(n, seed)` generator, independent of the iteration order.
fn draw_rng(base_seed: u64, n: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(seed));
    rng.set_stream(n as u64);
    rng
}

pub fn error_decay_experiment(model: &LikelihoodModel, config: &DecayConfig) -> Result<DecayReport> {
    if config.n_list.len() < 4 {
        return Err(DppError::input("decay experiment needs at least 4 values of n"));
    }
    if config.n_list.windows(2).any(|w| w[0] >= w[1]) || config.n_list[0] == 0 {
        return Err(DppError::input("n list must be positive and strictly ascending"));
    }
    if config.seeds < 10 {
        return Err(DppError::input("decay experiment needs at least 10 seeds per n"));
    }
    let oracle = refined_quadrature(model, config.oracle_resolution)?;
    let ell = estimate_ell(&model.kernel, &model.window, oracle.resolution)?;
    let spectrum = operator_spectrum(model)?;
    let mut rows = Vec::with_capacity(config.n_list.len() * config.seeds);
    let mut means = Vec::with_capacity(config.n_list.len());
    for &n in &config.n_list {
        let c_n = c_n_bound(n, config.delta, ell, model.kernel.kappa2())?;
        let bound = bound_logdet(&spectrum, c_n);
        let mut total = 0.0;
        for seed in 0..config.seeds as u64 {
            let mut rng = draw_rng(config.base_seed, n, seed);
            let pts: Vec<Point> = (0..n).map(|_| model.window.sample_uniform(&mut rng)).collect();
            let sampled = sampled_logdet(model, &pts)?;
            let abs_error = (sampled - oracle.value).abs();
            total += abs_error;
            rows.push(DecayRow {
                n,
                seed,
                sampled,
                abs_error,
                c_n,
                bound,
            });
        }
        means.push((n, total / config.seeds as f64));
    }
    let slope = if means.iter().all(|m| m.1 > 0.0) {
        loglog_slope(&means)
    } else {
        f64::NAN
    };
    Ok(DecayReport {
        oracle,
        ell,
        rows,
        means,
        slope,
    })
}

/// `Tr(B)`, which dominates every sampled and quadrature log-determinant when `κ² = 1`.
pub fn trace_bound(model: &LikelihoodModel) -> f64 {
    model.b_matrix.trace() * model.kernel.kappa2()
}
