//! Randomized correlation-kernel estimate, effective dimension, and grid oracles.
//!
//! With whitened landmark features `ψ(x) = R⁻ᵀ k_x` and a factor `E` of the
//! likelihood core (`EᵀE = B⋆`), the likelihood operator is `A = S_ψᵀ EᵀE S_ψ`.
//! For any quadrature of the reference measure with second-moment matrix
//! `H = ∫ ψψᵀ`, push-through gives `A(A + γ)⁻¹ = S_ψᵀ Eᵀ (E H Eᵀ + γ I)⁻¹ E S_ψ`.
//! The estimator uses `p` uniform draws for `H`; the grid oracle uses
//! cell-centre nodes.

use faer::{Mat, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DppError, Result};
use crate::model::{whitened_features, CorrelationModel, KernelExpansion, LikelihoodModel, Point};
use crate::numerics::{psd_factor, psd_sqrt, sym_eig, sym_eigenvalues, symmetrize, SymMatrix, PSD_TOLERANCE};
use crate::solver::{closed_form, landmark_factor, representer_from_b};

/// Largest node count accepted by the dense grid oracle.
pub const MAX_GRID_NODES: usize = 4096;

/// `E` (r×m) with `EᵀE = B`: Cholesky when `B` is positive definite,
/// otherwise the clamped eigen factor.
pub fn core_factor(b: &SymMatrix) -> Result<Mat<f64>> {
    match b.as_mat().llt(Side::Lower) {
        Ok(llt) => Ok(llt.L().transpose().to_owned()),
        Err(_) => psd_factor(b),
    }
}

/// `Eᵀ (E H Eᵀ + γ I)⁻¹ E` through a Cholesky solve.
fn resolvent_core(e: &Mat<f64>, h: &Mat<f64>, gamma: f64) -> Result<SymMatrix> {
    let r = e.nrows();
    let mut inner = symmetrize(e * h * e.transpose());
    for i in 0..r {
        inner[(i, i)] += gamma;
    }
    let llt = inner.llt(Side::Lower).map_err(|_| DppError::Conditioning {
        max_jitter: 0.0,
        min_eigenvalue: sym_eigenvalues(inner.as_ref())
            .ok()
            .and_then(|v| v.last().copied())
            .unwrap_or(f64::NAN),
    })?;
    let z = faer::linalg::solvers::Solve::solve(&llt, e.as_ref());
    SymMatrix::from_mat(e.transpose() * z)
}

/// `ΨΨᵀ / n` for features stored as columns.
fn second_moment(psi: &Mat<f64>) -> Mat<f64> {
    let n = psi.ncols() as f64;
    symmetrize(psi * psi.transpose() * faer::Scale(1.0 / n))
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DppError::input(format!("gamma must be positive, got {gamma}")));
    }
    Ok(())
}

fn uniform_draws(model: &LikelihoodModel, p: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p).map(|_| model.window.sample_uniform(&mut rng)).collect()
}

/// Estimates `k̂` from `p` uniform draws.
///
/// `Ω = Λᵀ (Λ K_mp K_mpᵀ Λᵀ / p + γ I)⁻¹ Λ` with `C⋆ = ΛᵀΛ`, `Λ = E R⁻ᵀ`.
pub fn estimate_correlation(model: &LikelihoodModel, p: usize, gamma: f64, seed: u64) -> Result<CorrelationModel> {
    if p == 0 {
        return Err(DppError::input("p must be at least 1"));
    }
    validate_gamma(gamma)?;
    let draws = uniform_draws(model, p, seed);
    estimate_from_draws(model, &draws, gamma)
}

/// Estimator on a caller-supplied set of draws.
pub fn estimate_from_draws(model: &LikelihoodModel, draws: &[Point], gamma: f64) -> Result<CorrelationModel> {
    validate_gamma(gamma)?;
    if draws.is_empty() {
        return Err(DppError::input("need at least one draw"));
    }
    let psi = whitened_features(&model.landmarks, &model.kernel, model.jitter, draws)?;
    let e = core_factor(&model.b_matrix)?;
    let core = resolvent_core(&e, &second_moment(&psi), gamma)?;
    let chol = landmark_factor(model)?;
    let omega = representer_from_b(&core, &chol)?;
    Ok(CorrelationModel {
        kernel: model.kernel,
        window: model.window.clone(),
        gamma,
        landmarks: model.landmarks.clone(),
        omega,
        core,
        jitter: model.jitter,
        p_used: draws.len(),
    })
}

/// `Σ μ_i / (μ_i + γ)`.
pub fn d_eff(spectrum: &[f64], gamma: f64) -> Result<f64> {
    validate_gamma(gamma)?;
    let mut total = 0.0;
    for &mu in spectrum {
        if mu < -1e-10 {
            return Err(DppError::input(format!("spectrum has a negative eigenvalue {mu}")));
        }
        let mu = mu.max(0.0);
        total += mu / (mu + gamma);
    }
    Ok(total)
}

/// `⌈8κ²‖A‖ / (γε²) · L⌉` for a given log term `L`.
pub fn required_p_from_log_term(epsilon: f64, gamma: f64, a_opnorm: f64, kappa2: f64, log_term: f64) -> usize {
    let p = 8.0 * kappa2 * a_opnorm / (gamma * epsilon * epsilon) * log_term;
    p.ceil().max(1.0) as usize
}

/// Sample size for the multiplicative sandwich, with
/// `L = log(4 d_eff / (δ ‖K‖_op))`.
pub fn required_p(
    epsilon: f64,
    delta: f64,
    gamma: f64,
    a_opnorm: f64,
    kappa2: f64,
    deff: f64,
    k_opnorm: f64,
) -> Result<usize> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DppError::input(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(DppError::input(format!("delta must lie in (0, 1), got {delta}")));
    }
    validate_gamma(gamma)?;
    if !(a_opnorm >= 0.0) || !(kappa2 > 0.0) || !(deff > 0.0) || !(k_opnorm > 0.0) {
        return Err(DppError::input(format!(
            "required_p needs ‖A‖ ≥ 0, κ² > 0, d_eff > 0, ‖K‖ > 0 (got {a_opnorm}, {kappa2}, {deff}, {k_opnorm})"
        )));
    }
    let log_term = (4.0 * deff / (delta * k_opnorm)).ln();
    Ok(required_p_from_log_term(epsilon, gamma, a_opnorm, kappa2, log_term))
}

/// Discretized correlation operator `K = A_grid (A_grid + γI)⁻¹` on cell-centre nodes.
#[derive(Clone, Debug)]
pub struct GridOracle {
    pub resolution: usize,
    pub nodes: Vec<Point>,
    pub gamma: f64,
    /// `H_g = Ψ_g Ψ_gᵀ / N` over the nodes (whitened second moment).
    pub second_moment: Mat<f64>,
    /// `Eᵀ (E H_g Eᵀ + γ)⁻¹ E`.
    pub core: SymMatrix,
    /// Whitened node features `Ψ_g` (m×N).
    pub features: Mat<f64>,
}

impl GridOracle {
    pub fn build(model: &LikelihoodModel, gamma: f64, resolution: usize) -> Result<Self> {
        validate_gamma(gamma)?;
        if resolution == 0 {
            return Err(DppError::input("grid resolution must be positive"));
        }
        let nodes = model.window.cell_centers(resolution);
        if nodes.len() > MAX_GRID_NODES {
            return Err(DppError::input(format!(
                "grid oracle limited to {MAX_GRID_NODES} nodes, resolution {resolution} gives {}",
                nodes.len()
            )));
        }
        let features = whitened_features(&model.landmarks, &model.kernel, model.jitter, &nodes)?;
        let second_moment = second_moment(&features);
        let e = core_factor(&model.b_matrix)?;
        let core = resolvent_core(&e, &second_moment, gamma)?;
        Ok(GridOracle {
            resolution,
            nodes,
            gamma,
            second_moment,
            core,
            features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Dense `N×N` matrix `Ψ_gᵀ D Ψ_g / N` for a whitened core `D`.
    pub fn dense_from_core(&self, core: &SymMatrix) -> Result<SymMatrix> {
        let n = self.num_nodes() as f64;
        let out = self.features.transpose() * core.as_mat() * &self.features * faer::Scale(1.0 / n);
        SymMatrix::from_mat(out)
    }

    /// The oracle as a dense matrix.
    pub fn dense(&self) -> Result<SymMatrix> {
        self.dense_from_core(&self.core)
    }

    /// Non-zero spectrum of a core restricted to the grid: eigenvalues of `H^{1/2} D H^{1/2}`.
    pub fn reduced(&self, core: &SymMatrix) -> Result<SymMatrix> {
        let h = psd_sqrt(&SymMatrix::from_mat(self.second_moment.clone())?)?;
        core.congruence(h.as_mat())
    }

    /// Eigenvalues of the oracle, descending, certified to lie in `[0, 1)`.
    pub fn eigenvalues(&self) -> Result<Vec<f64>> {
        let values = sym_eigenvalues(self.reduced(&self.core)?.as_mat())?;
        let top = values.first().copied().unwrap_or(0.0);
        let bottom = values.last().copied().unwrap_or(0.0);
        if top >= 1.0 || bottom < -PSD_TOLERANCE * top.max(1.0) {
            return Err(DppError::Numeric(format!(
                "grid correlation spectrum [{bottom:e}, {top}] escapes [0, 1)"
            )));
        }
        Ok(values.into_iter().map(|v| v.max(0.0)).collect())
    }

    pub fn op_norm(&self) -> Result<f64> {
        Ok(self.eigenvalues()?.first().copied().unwrap_or(0.0))
    }
}

/// Dense grid oracle `A_grid (A_grid + γI)⁻¹` with `A_grid[i][j] = â(x_i, x_j)/N`.
pub fn grid_correlation_oracle(model: &LikelihoodModel, gamma: f64, grid_resolution: usize) -> Result<SymMatrix> {
    GridOracle::build(model, gamma, grid_resolution)?.dense()
}

/// Outcome of one sandwich check `K/(1+ε) ⪯ K̂ ⪯ K/(1−ε)` on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SandwichRun {
    pub seed: u64,
    pub p: usize,
    /// Smallest eigenvalue of `K̂ − K/(1+ε)`.
    pub lower_margin: f64,
    /// Smallest eigenvalue of `K/(1−ε) − K̂`.
    pub upper_margin: f64,
    /// Tolerance below zero accepted as roundoff.
    pub tolerance: f64,
}

impl SandwichRun {
    pub fn holds(&self) -> bool {
        self.lower_margin >= -self.tolerance && self.upper_margin >= -self.tolerance
    }
}

/// Quantities shared by every run of a sandwich experiment.
#[derive(Clone, Debug)]
pub struct SandwichSetup {
    pub oracle: GridOracle,
    pub epsilon: f64,
    pub delta: f64,
    pub a_opnorm: f64,
    pub deff: f64,
    pub k_opnorm: f64,
    pub p: usize,
}

impl SandwichSetup {
    /// `p = required_p(ε, δ, γ, λ_max(KC), κ², d_eff(γ), ‖K_grid‖)`.
    pub fn new(model: &LikelihoodModel, gamma: f64, epsilon: f64, delta: f64, resolution: usize) -> Result<Self> {
        let oracle = GridOracle::build(model, gamma, resolution)?;
        let spectrum: Vec<f64> = sym_eigenvalues(model.b_matrix.as_mat())?
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let a_opnorm = spectrum.first().copied().unwrap_or(0.0);
        let deff = d_eff(&spectrum, gamma)?;
        let measured = oracle.op_norm()?;
        let k_opnorm = if measured > 0.0 { measured } else { 1.0 };
        let p = required_p(epsilon, delta, gamma, a_opnorm, model.kernel.kappa2(), deff, k_opnorm)?;
        Ok(SandwichSetup {
            oracle,
            epsilon,
            delta,
            a_opnorm,
            deff,
            k_opnorm,
            p,
        })
    }

    pub fn run(&self, model: &LikelihoodModel, seed: u64) -> Result<SandwichRun> {
        let est = estimate_correlation(model, self.p, self.oracle.gamma, seed)?;
        sandwich_margins(&self.oracle, &est.core, self.epsilon, seed, self.p)
    }
}

/// Margins of the sandwich between the oracle and an estimated whitened core.
pub fn sandwich_margins(
    oracle: &GridOracle,
    estimate_core: &SymMatrix,
    epsilon: f64,
    seed: u64,
    p: usize,
) -> Result<SandwichRun> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(DppError::input(format!("epsilon must lie in (0, 1), got {epsilon}")));
    }
    let k = oracle.reduced(&oracle.core)?;
    let k_hat = oracle.reduced(estimate_core)?;
    let scale = sym_eigenvalues(k.as_mat())?
        .first()
        .copied()
        .unwrap_or(0.0)
        .max(f64::MIN_POSITIVE);
    let lower = SymMatrix::from_mat(k_hat.as_mat() - k.as_mat() * faer::Scale(1.0 / (1.0 + epsilon)))?;
    let upper = SymMatrix::from_mat(k.as_mat() * faer::Scale(1.0 / (1.0 - epsilon)) - k_hat.as_mat())?;
    let min = |m: &SymMatrix| -> Result<f64> { Ok(sym_eigenvalues(m.as_mat())?.last().copied().unwrap_or(0.0)) };
    Ok(SandwichRun {
        seed,
        p,
        lower_margin: min(&lower)?,
        upper_margin: min(&upper)?,
        tolerance: PSD_TOLERANCE * scale,
    })
}

pub fn sandwich_csv_rows(runs: &[SandwichRun]) -> Vec<String> {
    runs.iter()
        .map(|r| {
            format!(
                "{},{},{:.16e},{:.16e},{}",
                r.seed,
                r.p,
                r.lower_margin,
                r.upper_margin,
                u8::from(r.holds())
            )
        })
        .collect()
}

pub const SANDWICH_CSV_HEADER: &str = "seed,p,lower_margin,upper_margin,holds";

/// Largest principal-angle sine between the column spans of two orthonormal bases.
pub fn max_principal_sine(u: &Mat<f64>, v: &Mat<f64>) -> Result<f64> {
    let proj = u * (u.transpose() * v);
    let resid = v - proj;
    let g = SymMatrix::from_mat(resid.transpose() * &resid)?;
    let top = sym_eigenvalues(g.as_mat())?.first().copied().unwrap_or(0.0);
    Ok(top.max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionRow {
    pub lambda: f64,
    /// Top `r` eigenvalues of the grid oracle, `r = |Z|`.
    pub top_eigenvalues: Vec<f64>,
    /// Max relative gap `|λ â(x,x) − k_xᵀK⁻¹k_x| / k_xᵀK⁻¹k_x` over the evaluation grid.
    pub nystrom_diag_error: f64,
    /// Max `|λ â(x,y) − k_xᵀK⁻¹k_y| / √(n(x,x) n(y,y))` over pairs of evaluation points.
    pub nystrom_pair_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionReport {
    pub rows: Vec<ProjectionRow>,
    /// `(λ_a, λ_b, sin θ_max)` between the top-`r` eigenspaces of consecutive rows.
    pub angles: Vec<(f64, f64, f64)>,
}

/// Settings of the projection / Nyström limit check.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionConfig {
    pub gamma: f64,
    pub grid_resolution: usize,
    /// Per-axis size of the Nyström evaluation grid.
    pub eval_resolution: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            gamma: 1.0,
            grid_resolution: 32,
            eval_resolution: 10,
        }
    }
}

/// `k_xᵀ K⁻¹ k_y` with an unjittered LU solve on the landmark Gram matrix.
fn nystrom_values(model: &LikelihoodModel, points: &[Point]) -> Result<Mat<f64>> {
    let k = crate::numerics::build_gram(&model.landmarks, &model.kernel)?;
    let kzx = crate::numerics::cross_gram(&model.landmarks, points, &model.kernel)?;
    let lu = k.as_mat().partial_piv_lu();
    let sol = faer::linalg::solvers::Solve::solve(&lu, kzx.as_ref());
    Ok(kzx.transpose() * sol)
}

/// Closed-form models over `sample` at each `λ`: top grid-oracle
/// eigenvalues, eigenspace stability, and the scaled Nyström gap.
pub fn projection_limit_check(
    sample: &[Point],
    kernel: &crate::model::RkhsKernel,
    window: &crate::model::Window,
    lambdas: &[f64],
    config: &ProjectionConfig,
) -> Result<ProjectionReport> {
    let r = sample.len();
    let eval_points = window.cell_centers(config.eval_resolution);
    let mut rows = Vec::with_capacity(lambdas.len());
    let mut spaces: Vec<Mat<f64>> = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let model = closed_form(sample, kernel, lambda, window)?;
        let oracle = GridOracle::build(&model, config.gamma, config.grid_resolution)?;
        let dense = oracle.dense()?;
        let eig = sym_eig(&dense)?;
        let top: Vec<f64> = eig.values.iter().take(r).copied().collect();
        spaces.push(eig.vectors.as_ref().subcols(0, r).to_owned());

        let fac = model.factor_at(&eval_points)?;
        let fitted = fac.transpose() * &fac * faer::Scale(lambda);
        let nys = nystrom_values(&model, &eval_points)?;
        let n = eval_points.len();
        let mut diag_err = 0.0_f64;
        let mut pair_err = 0.0_f64;
        for i in 0..n {
            diag_err = diag_err.max((fitted[(i, i)] - nys[(i, i)]).abs() / nys[(i, i)]);
            for j in 0..n {
                let scale = (nys[(i, i)] * nys[(j, j)]).sqrt();
                pair_err = pair_err.max((fitted[(i, j)] - nys[(i, j)]).abs() / scale);
            }
        }
        rows.push(ProjectionRow {
            lambda,
            top_eigenvalues: top,
            nystrom_diag_error: diag_err,
            nystrom_pair_error: pair_err,
        });
    }
    let mut angles = Vec::new();
    for k in 1..rows.len() {
        angles.push((
            rows[k - 1].lambda,
            rows[k].lambda,
            max_principal_sine(&spaces[k - 1], &spaces[k])?,
        ));
    }
    Ok(ProjectionReport { rows, angles })
}
