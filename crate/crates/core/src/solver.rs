//! Likelihood-kernel estimation by regularized Picard iteration.
//!
//! Notation follows the representer parametrization: `Z` holds the
//! concatenated samples and the Fredholm points, `K = RᵀR` is the jittered
//! Gram matrix on `Z`, and the iteration runs over PSD matrices `B` with
//! `X = RᵀBR` the in-sample Gram matrix of the fitted likelihood kernel.
//!
//! The objective monitored during the iteration is
//!
//! ```text
//! g(B) = -(1/s) Σ_ℓ log det X_{C_ℓ C_ℓ} + log det(I + X_{II}/n) + λ Tr(B)
//! ```
//!
//! and one step maps `B ↦ ((I + 4λ q(B))^{1/2} - I) / (2λ)` with
//! `q(B) = B + B R Δ(X) Rᵀ B`.

use faer::linalg::matmul::triangular::{self as tri, BlockStructure};
use faer::linalg::triangular_solve;
use faer::{Accum, Mat, Par, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{DppError, Result};
use crate::model::{find_near_duplicate, BlockLayout, LikelihoodModel, Point, PointPattern, RkhsKernel, Window};
use crate::numerics::{
    build_gram, chol_psd, sym_eig, sym_eigenvalues, symmetrize, CholFactor, SymMatrix, DEFAULT_JITTER, PSD_TOLERANCE,
};

/// Attempts at drawing a Fredholm set free of near-duplicates.
const MAX_DRAW_ATTEMPTS: usize = 100;

/// Initial iterate `B_0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BInit {
    Identity,
    ScaledIdentity(f64),
}

impl BInit {
    fn build(self, m: usize) -> SymMatrix {
        match self {
            BInit::Identity => SymMatrix::identity(m),
            BInit::ScaledIdentity(c) => SymMatrix::scaled_identity(m, c),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitConfig {
    pub lambda: f64,
    /// Number of uniform points `n = |I|` approximating the Fredholm determinant.
    pub n_fredholm: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub b_init: BInit,
    /// Reuse `C_1` as the Fredholm set instead of drawing uniform points.
    pub fredholm_from_sample: bool,
    pub jitter: f64,
}

impl FitConfig {
    pub fn new(lambda: f64, n_fredholm: usize, seed: u64) -> Self {
        FitConfig {
            lambda,
            n_fredholm,
            tol: 1e-5,
            max_iter: 10_000,
            seed,
            b_init: BInit::Identity,
            fredholm_from_sample: false,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(DppError::input(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return Err(DppError::input(format!("tol must lie in (0, 1), got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(DppError::input("max_iter must be at least 1"));
        }
        if self.n_fredholm == 0 && !self.fredholm_from_sample {
            return Err(DppError::input("n_fredholm must be at least 1"));
        }
        if let BInit::ScaledIdentity(c) = self.b_init {
            if !(c > 0.0) {
                return Err(DppError::input(format!("initial scale must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-iteration diagnostics of a Picard run.
///
/// `objectives[k]` and `residuals[k]` refer to the iterate `B_k`, so both
/// sequences have `iterations + 1` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct PicardTrace {
    pub objectives: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub applied_jitter: f64,
    /// Thread count used by the dense kernels.
    pub threads: usize,
}

impl PicardTrace {
    /// Largest increase between consecutive objectives, relative to `1 + |g_0|`.
    pub fn max_relative_increase(&self) -> f64 {
        let scale = 1.0 + self.objectives.first().map_or(0.0, |g| g.abs());
        self.objectives
            .windows(2)
            .map(|w| (w[1] - w[0]) / scale)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn final_objective(&self) -> f64 {
        *self.objectives.last().expect("trace is never empty")
    }

    pub fn final_residual(&self) -> f64 {
        *self.residuals.last().expect("trace is never empty")
    }

    pub fn csv_rows(&self) -> impl Iterator<Item = String> + '_ {
        self.objectives
            .iter()
            .zip(&self.residuals)
            .enumerate()
            .map(|(k, (g, r))| format!("{k},{g:.16e},{r:.16e}"))
    }
}

fn thread_count() -> usize {
    match faer::get_global_parallelism() {
        Par::Seq => 1,
        #[allow(unreachable_patterns)]
        par => par.degree(),
    }
}

/// Quantities shared by the objective, the step and the residual at one iterate.
struct Evaluation {
    /// `W = B R`.
    w: Mat<f64>,
    /// `X = Rᵀ B R`.
    x: Mat<f64>,
    delta: Mat<f64>,
    objective: f64,
}

struct BlockInverse {
    inverse: Mat<f64>,
    logdet: f64,
}

fn invert_block(block: Mat<f64>) -> std::result::Result<BlockInverse, usize> {
    let llt = block.llt(Side::Lower).map_err(|e| match e {
        faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => index,
    })?;
    let l = llt.L();
    let logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
    let inverse = symmetrize(faer::linalg::solvers::DenseSolveCore::inverse(&llt));
    Ok(BlockInverse { inverse, logdet })
}

/// Δ(X) together with the log-determinant terms of the objective.
fn delta_and_logdets(x: &Mat<f64>, layout: &BlockLayout) -> Result<(Mat<f64>, f64)> {
    let m = x.nrows();
    let s = layout.num_samples() as f64;
    let mut delta = Mat::<f64>::zeros(m, m);
    let mut value = 0.0;
    for (l, r) in layout.samples().iter().enumerate() {
        let len = r.len();
        let block = x.as_ref().submatrix(r.start, r.start, len, len).to_owned();
        let inv = invert_block(block).map_err(|pivot| {
            DppError::Evaluation(format!(
                "sample block {l} of X is not positive definite (pivot {pivot})"
            ))
        })?;
        value -= inv.logdet / s;
        for j in 0..len {
            for i in 0..len {
                delta[(r.start + i, r.start + j)] += inv.inverse[(i, j)] / s;
            }
        }
    }
    let f = layout.fredholm();
    let n = f.len();
    let nf = n as f64;
    let mut block = x.as_ref().submatrix(f.start, f.start, n, n).to_owned();
    for i in 0..n {
        block[(i, i)] += nf;
    }
    let inv = invert_block(block).map_err(|pivot| {
        DppError::Evaluation(format!(
            "Fredholm block X_II + nI is not positive definite (pivot {pivot})"
        ))
    })?;
    // log det(I + X_II / n) = log det(X_II + n I) - n log n
    value += inv.logdet - nf * nf.ln();
    for j in 0..n {
        for i in 0..n {
            delta[(f.start + i, f.start + j)] -= inv.inverse[(i, j)];
        }
    }
    Ok((delta, value))
}

fn check_shapes(b: &SymMatrix, chol: &CholFactor, layout: &BlockLayout) -> Result<()> {
    if b.dim() != chol.dim() || b.dim() != layout.m() {
        return Err(DppError::DimensionMismatch(format!(
            "B is {0}x{0}, R is {1}x{1}, layout has m = {2}",
            b.dim(),
            chol.dim(),
            layout.m()
        )));
    }
    Ok(())
}

fn evaluate(b: &SymMatrix, chol: &CholFactor, layout: &BlockLayout, lambda: f64) -> Result<Evaluation> {
    check_shapes(b, chol, layout)?;
    let r = chol.upper();
    let w = b.as_mat() * r;
    let x = symmetrize(r.transpose() * &w);
    let (delta, logdet_terms) = delta_and_logdets(&x, layout)?;
    let objective = logdet_terms + lambda * b.trace();
    if !objective.is_finite() {
        return Err(DppError::Evaluation(format!("objective is not finite ({objective})")));
    }
    Ok(Evaluation { w, x, delta, objective })
}

/// `g(B)`: the penalized sampled negative log-likelihood in B-space.
pub fn objective_b(b: &SymMatrix, chol: &CholFactor, layout: &BlockLayout, lambda: f64) -> Result<f64> {
    Ok(evaluate(b, chol, layout, lambda)?.objective)
}

/// The same objective written for `B' = B / n` with penalty `λ' = λ n`.
///
/// It differs from [`objective_b`] at `B = n B'` by the constant
/// `(1/s) Σ_ℓ |C_ℓ| log n`, so both problems share their minimizers.
pub fn objective_scaled(b_prime: &SymMatrix, chol: &CholFactor, layout: &BlockLayout, lambda_n: f64) -> Result<f64> {
    check_shapes(b_prime, chol, layout)?;
    let r = chol.upper();
    let x = symmetrize(r.transpose() * (b_prime.as_mat() * r));
    let s = layout.num_samples() as f64;
    let mut value = 0.0;
    for (l, rg) in layout.samples().iter().enumerate() {
        let block = x.as_ref().submatrix(rg.start, rg.start, rg.len(), rg.len()).to_owned();
        let inv = invert_block(block)
            .map_err(|p| DppError::Evaluation(format!("sample block {l} not positive definite (pivot {p})")))?;
        value -= inv.logdet / s;
    }
    let f = layout.fredholm();
    let mut block = x.as_ref().submatrix(f.start, f.start, f.len(), f.len()).to_owned();
    for i in 0..f.len() {
        block[(i, i)] += 1.0;
    }
    let inv = invert_block(block)
        .map_err(|p| DppError::Evaluation(format!("I + X'_II not positive definite (pivot {p})")))?;
    Ok(value + inv.logdet + lambda_n * b_prime.trace())
}

/// `Δ(X) = (1/s) Σ_ℓ U_ℓ X_{C_ℓC_ℓ}⁻¹ U_ℓᵀ − U_I (X_II + n I)⁻¹ U_Iᵀ`.
pub fn delta(x: &SymMatrix, layout: &BlockLayout) -> Result<SymMatrix> {
    if x.dim() != layout.m() {
        return Err(DppError::DimensionMismatch(format!(
            "X is {0}x{0} but layout has m = {1}",
            x.dim(),
            layout.m()
        )));
    }
    let (d, _) = delta_and_logdets(&x.as_mat().to_owned(), layout)?;
    SymMatrix::from_mat(d)
}

/// `B q(B) Δ`-correction `W Δ Wᵀ = B R Δ Rᵀ B`.
fn correction(eval: &Evaluation) -> Mat<f64> {
    let wd = &eval.w * &eval.delta;
    symmetrize(&wd * eval.w.transpose())
}

/// Spectral form of the step: `t ↦ (√(1 + 4λt) − 1) / (2λ)`, written without cancellation.
fn step_map(lambda: f64) -> impl Fn(f64) -> f64 {
    move |t: f64| {
        let t = t.max(0.0);
        2.0 * t / (1.0 + (1.0 + 4.0 * lambda * t).sqrt())
    }
}

fn step_from(b: &SymMatrix, corr: &Mat<f64>, lambda: f64) -> Result<SymMatrix> {
    let q = SymMatrix::from_mat(b.as_mat() + corr)?;
    let eig = sym_eig(&q)?;
    eig.check_psd()?;
    Ok(eig.map(step_map(lambda)))
}

fn residual_from(b: &SymMatrix, eval: &Evaluation, corr: &Mat<f64>, r: faer::MatRef<'_, f64>, lambda: f64) -> f64 {
    // X + λ X K⁻¹ X − p(X) = Rᵀ (λ B² − B R Δ Rᵀ B) R
    let mut inner = b.as_mat() * b.as_mat();
    inner *= faer::Scale(lambda);
    inner -= corr;
    let res = r.transpose() * (&inner * r);
    res.norm_l2() / (1.0 + eval.x.norm_l2())
}

/// One regularized Picard step `B_k ↦ B_{k+1}`.
pub fn picard_step(b: &SymMatrix, chol: &CholFactor, layout: &BlockLayout, lambda: f64) -> Result<SymMatrix> {
    let eval = evaluate(b, chol, layout, lambda)?;
    step_from(b, &correction(&eval), lambda)
}

/// `‖X + λ X K⁻¹ X − p(X)‖_F / (1 + ‖X‖_F)` with `X = RᵀBR`.
pub fn stationarity_residual(b: &SymMatrix, chol: &CholFactor, layout: &BlockLayout, lambda: f64) -> Result<f64> {
    let eval = evaluate(b, chol, layout, lambda)?;
    let corr = correction(&eval);
    Ok(residual_from(b, &eval, &corr, chol.upper(), lambda))
}

/// Iterate held in eigen-form `B = V diag(f) Vᵀ`.
///
/// With `P = Vᵀ R` every quantity of a step is a product of `P` with small
/// diagonal factors: `X = Pᵀ F P`, `W Δ Wᵀ = V F (P Δ Pᵀ) F Vᵀ`, and
/// `q(B) = V (F + F M F) Vᵀ` with `M = P Δ Pᵀ`, so the next iterate follows
/// from the eigendecomposition `F + F M F = U Λ Uᵀ` as `V' = V U`, `f' = h(Λ)`.
///
/// The residual matrix `Pᵀ(λF² + F − F − FMF)P` equals `A − P'ᵀ Λ P'` with
/// `A = Pᵀ(F + λF²)P` and `P' = Uᵀ P`, and `P'ᵀ Λ P'` is the `A` of the next
/// iterate, so the residual of iterate `k` is available once `k + 1` is evaluated.
struct SpectralIterate {
    vectors: Mat<f64>,
    values: Vec<f64>,
}

struct SpectralEvaluation {
    objective: f64,
    /// `‖X‖_F`.
    x_norm: f64,
    /// Lower triangle of `Pᵀ (F + λF²) P`.
    a: Mat<f64>,
    /// Lower triangle of `F + F M F`.
    core: Mat<f64>,
}

/// Lower triangle of `Hᵀ diag(d) H`; the strict upper triangle is zero.
fn weighted_gram_lower(h: faer::MatRef<'_, f64>, d: &[f64]) -> Mat<f64> {
    let scaled = Mat::from_fn(h.nrows(), h.ncols(), |i, j| d[i].sqrt() * h[(i, j)]);
    let mut out = Mat::<f64>::zeros(h.ncols(), h.ncols());
    tri::matmul(
        out.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Replace,
        scaled.transpose(),
        BlockStructure::Rectangular,
        scaled.as_ref(),
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
    out
}

/// Frobenius norm of the symmetric matrix whose lower triangle is `a - b`.
fn lower_frobenius_diff(a: &Mat<f64>, b: Option<&Mat<f64>>) -> f64 {
    let mut sum = 0.0;
    for j in 0..a.ncols() {
        let ca = a.col(j);
        for i in j..a.nrows() {
            let v = match b {
                Some(b) => ca[i] - b[(i, j)],
                None => ca[i],
            };
            sum += if i == j { v * v } else { 2.0 * v * v };
        }
    }
    sum.sqrt()
}

fn mirror_lower(a: &mut Mat<f64>) {
    for j in 0..a.ncols() {
        for i in 0..j {
            a[(i, j)] = a[(j, i)];
        }
    }
}

/// Adds `alpha · Hᵀ H` with `H = L⁻¹ Pᵀ_{:,block}` to the lower triangle of `acc`
/// and returns `log det(L Lᵀ)`.
fn accumulate_block(
    acc: &mut Mat<f64>,
    p: faer::MatRef<'_, f64>,
    mut block: Mat<f64>,
    start: usize,
    alpha: f64,
) -> std::result::Result<f64, usize> {
    let len = block.nrows();
    let llt = block.as_mut().llt(Side::Lower).map_err(|e| match e {
        faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => index,
    })?;
    let l = llt.L();
    let logdet = 2.0 * (0..len).map(|i| l[(i, i)].ln()).sum::<f64>();
    let mut h = p.subcols(start, len).transpose().to_owned();
    triangular_solve::solve_lower_triangular_in_place(l, h.as_mut(), Par::Seq);
    tri::matmul(
        acc.as_mut(),
        BlockStructure::TriangularLower,
        Accum::Add,
        h.transpose(),
        BlockStructure::Rectangular,
        h.as_ref(),
        BlockStructure::Rectangular,
        alpha,
        Par::Seq,
    );
    Ok(logdet)
}

impl SpectralIterate {
    fn from_b(b: &SymMatrix) -> Result<Self> {
        let eig = sym_eig(b)?;
        eig.check_psd()?;
        Ok(SpectralIterate {
            vectors: eig.vectors,
            values: eig.values.iter().map(|v| v.max(0.0)).collect(),
        })
    }

    fn to_b(&self) -> SymMatrix {
        let mut b = weighted_gram_lower(self.vectors.transpose(), &self.values);
        mirror_lower(&mut b);
        SymMatrix::from_mat(b).expect("finite iterate")
    }

    fn evaluate(&self, r: faer::MatRef<'_, f64>, layout: &BlockLayout, lambda: f64) -> Result<SpectralEvaluation> {
        let f = &self.values;
        let m = f.len();
        let mut p = Mat::<f64>::zeros(m, m);
        tri::matmul(
            p.as_mut(),
            BlockStructure::Rectangular,
            Accum::Replace,
            self.vectors.transpose(),
            BlockStructure::Rectangular,
            r,
            BlockStructure::TriangularUpper,
            1.0,
            Par::Seq,
        );
        let x = weighted_gram_lower(p.as_ref(), f);
        let weights: Vec<f64> = f.iter().map(|&v| v + lambda * v * v).collect();
        let a = weighted_gram_lower(p.as_ref(), &weights);

        let s = layout.num_samples() as f64;
        let mut mm = Mat::<f64>::zeros(m, m);
        let mut logdet_terms = 0.0;
        for (l, rg) in layout.samples().iter().enumerate() {
            let block = x.as_ref().submatrix(rg.start, rg.start, rg.len(), rg.len()).to_owned();
            let logdet = accumulate_block(&mut mm, p.as_ref(), block, rg.start, 1.0 / s).map_err(|pivot| {
                DppError::Evaluation(format!(
                    "sample block {l} of X is not positive definite (pivot {pivot})"
                ))
            })?;
            logdet_terms -= logdet / s;
        }
        let fr = layout.fredholm();
        let n = fr.len();
        let nf = n as f64;
        let mut block = x.as_ref().submatrix(fr.start, fr.start, n, n).to_owned();
        for i in 0..n {
            block[(i, i)] += nf;
        }
        let logdet = accumulate_block(&mut mm, p.as_ref(), block, fr.start, -1.0).map_err(|pivot| {
            DppError::Evaluation(format!(
                "Fredholm block X_II + nI is not positive definite (pivot {pivot})"
            ))
        })?;
        logdet_terms += logdet - nf * nf.ln();

        let objective = logdet_terms + lambda * f.iter().sum::<f64>();
        if !objective.is_finite() {
            return Err(DppError::Evaluation(format!("objective is not finite ({objective})")));
        }
        // core = F + F M F, lower triangle only
        let mut core = mm;
        for j in 0..m {
            for i in j..m {
                core[(i, j)] *= f[i] * f[j];
            }
            core[(j, j)] += f[j];
        }
        Ok(SpectralEvaluation {
            objective,
            x_norm: lower_frobenius_diff(&x, None),
            a,
            core,
        })
    }

    fn step(&self, core: &Mat<f64>, lambda: f64) -> Result<Self> {
        let evd = core
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| DppError::Numeric(format!("eigendecomposition did not converge: {e:?}")))?;
        let s = evd.S().column_vector();
        let values: Vec<f64> = (0..s.nrows()).map(|i| s[i]).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DppError::Numeric(
                "non-finite eigenvalue in the Picard step".to_string(),
            ));
        }
        // ascending order: the first value is the smallest
        let tolerance = PSD_TOLERANCE * values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if values[0] < -tolerance {
            return Err(DppError::NotPsd {
                eigenvalue: values[0],
                tolerance,
            });
        }
        let map = step_map(lambda);
        Ok(SpectralIterate {
            vectors: &self.vectors * evd.U(),
            values: values.into_iter().map(map).collect(),
        })
    }
}

fn lagged_residual(current: &SpectralEvaluation, next: &SpectralEvaluation) -> f64 {
    lower_frobenius_diff(&current.a, Some(&next.a)) / (1.0 + current.x_norm)
}

/// Runs the iteration from `b0` until the relative objective change drops below `tol`.
pub fn run_picard(
    chol: &CholFactor,
    layout: &BlockLayout,
    lambda: f64,
    b0: SymMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(SymMatrix, PicardTrace)> {
    check_shapes(&b0, chol, layout)?;
    let r = chol.upper();
    let mut iterate = SpectralIterate::from_b(&b0)?;
    let mut eval = iterate.evaluate(r, layout, lambda)?;
    let mut trace = PicardTrace {
        objectives: vec![eval.objective],
        residuals: Vec::new(),
        iterations: 0,
        converged: false,
        applied_jitter: chol.jitter(),
        threads: thread_count(),
    };
    while trace.iterations < max_iter {
        let next = iterate.step(&eval.core, lambda)?;
        let next_eval = next.evaluate(r, layout, lambda)?;
        let g_prev = eval.objective;
        let g_next = next_eval.objective;
        trace.residuals.push(lagged_residual(&eval, &next_eval));
        trace.objectives.push(g_next);
        trace.iterations += 1;
        iterate = next;
        eval = next_eval;
        if (g_prev - g_next).abs() / (1.0 + g_prev.abs()) < tol {
            trace.converged = true;
            break;
        }
    }
    let b = iterate.to_b();
    trace.residuals.push(stationarity_residual(&b, chol, layout, lambda)?);
    Ok((b, trace))
}

/// `C = R⁻¹ B R⁻ᵀ`.
pub fn representer_from_b(b: &SymMatrix, chol: &CholFactor) -> Result<SymMatrix> {
    let t = chol.solve_upper(b.as_mat());
    let c = chol.solve_upper(t.transpose());
    SymMatrix::from_mat(c)
}

/// `B = R C Rᵀ`.
pub fn b_from_representer(c: &SymMatrix, chol: &CholFactor) -> Result<SymMatrix> {
    c.congruence(chol.lower())
}

/// Appended landmark list and layout for a pattern.
fn assemble_landmarks(
    pattern: &PointPattern,
    config: &FitConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Point>, BlockLayout)> {
    let sizes = pattern.sample_sizes();
    let data: Vec<Point> = pattern.samples().iter().flatten().cloned().collect();
    if config.fredholm_from_sample {
        let layout = BlockLayout::fredholm_from_first_sample(&sizes)?;
        return Ok((data, layout));
    }
    let layout = BlockLayout::appended(&sizes, config.n_fredholm)?;
    let window: &Window = pattern.window();
    for _ in 0..MAX_DRAW_ATTEMPTS {
        let mut z = data.clone();
        z.extend((0..config.n_fredholm).map(|_| window.sample_uniform(rng)));
        if find_near_duplicate(&z).is_none() {
            return Ok((z, layout));
        }
    }
    Err(DppError::input(format!(
        "could not draw {} distinct Fredholm points in {MAX_DRAW_ATTEMPTS} attempts",
        config.n_fredholm
    )))
}

/// Fits the likelihood kernel to a point pattern.
///
/// Draws the Fredholm set (seeded), factors the jittered Gram matrix on
/// `Z = C_1 ‖ … ‖ C_s ‖ I`, iterates from `B_0` and returns `C⋆ = R⁻¹ B⋆ R⁻ᵀ`.
pub fn fit(pattern: &PointPattern, kernel: &RkhsKernel, config: &FitConfig) -> Result<(LikelihoodModel, PicardTrace)> {
    config.validate()?;
    if let Some(l) = pattern.samples().iter().position(Vec::is_empty) {
        return Err(DppError::input(format!(
            "sample {l} is empty; every sample needs at least one point"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (landmarks, layout) = assemble_landmarks(pattern, config, &mut rng)?;
    let k = build_gram(&landmarks, kernel)?;
    let chol = chol_psd(&k, config.jitter)?;
    let m = layout.m();

    let mut b0 = config.b_init.build(m);
    if let Err(DppError::Evaluation(_)) = objective_b(&b0, &chol, &layout, config.lambda) {
        b0 = BInit::ScaledIdentity(10.0).build(m);
    }
    let (b, trace) = run_picard(&chol, &layout, config.lambda, b0, config.tol, config.max_iter)?;
    let c = representer_from_b(&b, &chol)?;
    let model = LikelihoodModel {
        kernel: *kernel,
        window: pattern.window().clone(),
        lambda: config.lambda,
        landmarks,
        c_matrix: c,
        b_matrix: b,
        layout,
        jitter: chol.jitter(),
    };
    Ok((model, trace))
}

/// Closed-form `B⋆` for one sample reused as the Fredholm set.
///
/// With `K = RᵀR` and `m = |C|`, the optimum is the spectral function
/// `B⋆ = g(R Rᵀ)` with `g(ς) = (2m/λ) / (√(m² + 4mς/λ) + m)`, which equals
/// `R C⋆ Rᵀ` for `C⋆ = ½ K⁻² ((m² I + 4mK/λ)^{1/2} − m I)`.
pub fn closed_form_b(chol: &CholFactor, lambda: f64) -> Result<SymMatrix> {
    if !(lambda > 0.0) {
        return Err(DppError::input(format!("lambda must be positive, got {lambda}")));
    }
    let m = chol.dim() as f64;
    let rrt = SymMatrix::from_mat(chol.upper() * chol.lower())?;
    let eig = sym_eig(&rrt)?;
    if let Some(&min) = eig.values.last() {
        if !(min > 0.0) {
            return Err(DppError::Conditioning {
                max_jitter: chol.jitter(),
                min_eigenvalue: min,
            });
        }
    }
    Ok(eig.map(|s| (2.0 * m / lambda) / ((m * m + 4.0 * m * s / lambda).sqrt() + m)))
}

/// Exact penalized solution when a single sample also serves as the Fredholm set.
pub fn closed_form(sample: &[Point], kernel: &RkhsKernel, lambda: f64, window: &Window) -> Result<LikelihoodModel> {
    if sample.is_empty() {
        return Err(DppError::input("closed form needs a non-empty sample"));
    }
    let pattern = PointPattern::new(window.clone(), vec![sample.to_vec()])?;
    let k = build_gram(sample, kernel)?;
    let chol = chol_psd(&k, DEFAULT_JITTER)?;
    let b = closed_form_b(&chol, lambda)?;
    let c = representer_from_b(&b, &chol)?;
    Ok(LikelihoodModel {
        kernel: *kernel,
        window: pattern.window().clone(),
        lambda,
        landmarks: sample.to_vec(),
        c_matrix: c,
        b_matrix: b,
        layout: BlockLayout::fredholm_from_first_sample(&[sample.len()])?,
        jitter: chol.jitter(),
    })
}

/// Lower bound on the objective over all PSD `B`:
/// `(1/s) Σ_ℓ |C_ℓ| (1 + log(sλ / λ_max(K)))`.
pub fn objective_lower_bound(chol: &CholFactor, layout: &BlockLayout, lambda: f64) -> Result<f64> {
    let k = chol.reconstruct();
    let lmax = sym_eigenvalues(k.as_ref())?[0];
    let s = layout.num_samples() as f64;
    let a = s * lambda / lmax;
    let total: usize = layout.samples().iter().map(|r| r.len()).sum();
    Ok(total as f64 * (1.0 + a.ln()) / s)
}

/// Factor of the jittered Gram matrix of a fitted model's landmarks.
pub fn landmark_factor(model: &LikelihoodModel) -> Result<CholFactor> {
    let k = build_gram(&model.landmarks, &model.kernel)?;
    chol_psd(&k, model.jitter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn identity_factor(m: usize) -> CholFactor {
        chol_psd(&SymMatrix::identity(m), 0.0).unwrap()
    }

    fn random_points(n: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
        (0..n).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect()
    }

    #[test]
    fn objective_identity_case() {
        let layout = BlockLayout::appended(&[1], 1).unwrap();
        let chol = identity_factor(2);
        for lambda in [0.1, 1.0, 3.0] {
            let g = objective_b(&SymMatrix::identity(2), &chol, &layout, lambda).unwrap();
            assert!((g - (2f64.ln() + 2.0 * lambda)).abs() < 1e-14);
        }
    }

    #[test]
    fn objective_scaled_identity_matches_grid_search() {
        // g(γI) = −log γ + log(1 + γ) + 2λγ
        let layout = BlockLayout::appended(&[1], 1).unwrap();
        let chol = identity_factor(2);
        let lambda = 0.05;
        let g = |gamma: f64| objective_b(&SymMatrix::scaled_identity(2, gamma), &chol, &layout, lambda).unwrap();
        let formula = |gamma: f64| -gamma.ln() + (1.0 + gamma).ln() + 2.0 * lambda * gamma;
        for gamma in [0.1, 0.5, 2.0, 7.0] {
            assert!((g(gamma) - formula(gamma)).abs() < 1e-13);
        }
        // 1-d grid search oracle for the minimizer
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        let mut gamma = 0.01;
        while gamma < 50.0 {
            let v = formula(gamma);
            if v < best {
                best = v;
                arg = gamma;
            }
            gamma += 1e-4;
        }
        // stationary point of the formula: 1/γ − 1/(1+γ) = 2λ
        let exact = (-1.0 + (1.0 + 2.0 / lambda).sqrt()) / 2.0;
        assert!((arg - exact).abs() < 2e-4);
        assert!((g(exact) - best).abs() < 1e-7);
    }

    #[test]
    fn objective_matches_x_space_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts = random_points(6, &mut rng);
        let kernel = RkhsKernel::gaussian(0.4).unwrap();
        let k = build_gram(&pts, &kernel).unwrap();
        let chol = chol_psd(&k, 1e-10).unwrap();
        let layout = BlockLayout::appended(&[2, 1], 3).unwrap();
        let a = Mat::<f64>::from_fn(6, 6, |_, _| rng.random_range(-1.0..1.0));
        let b = SymMatrix::from_mat(a.transpose() * &a + Mat::<f64>::identity(6, 6)).unwrap();
        let lambda = 0.3;
        // g(X) with X = RᵀBR and an explicit K⁻¹
        let x = chol.lower() * b.as_mat() * chol.upper();
        let kinv = chol.solve(Mat::<f64>::identity(6, 6).as_ref());
        let ld = |m: Mat<f64>| crate::numerics::logdet_pd_mat(m.as_ref()).unwrap();
        let sub = |r: std::ops::Range<usize>| x.as_ref().submatrix(r.start, r.start, r.len(), r.len()).to_owned();
        let mut expected = -(ld(sub(0..2)) + ld(sub(2..3))) / 2.0;
        let mut fb = sub(3..6);
        for i in 0..3 {
            for j in 0..3 {
                fb[(i, j)] /= 3.0;
            }
            fb[(i, i)] += 1.0;
        }
        expected += ld(fb);
        let xk = &x * &kinv;
        expected += lambda * (0..6).map(|i| xk[(i, i)]).sum::<f64>();
        let got = objective_b(&b, &chol, &layout, lambda).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected.abs().max(1.0));
    }

    #[test]
    fn objective_rejects_singular_sample_block() {
        let layout = BlockLayout::appended(&[1], 1).unwrap();
        let b = SymMatrix::from_diagonal(&[0.0, 1.0]).unwrap();
        assert!(matches!(
            objective_b(&b, &identity_factor(2), &layout, 0.1),
            Err(DppError::Evaluation(_))
        ));
    }

    #[test]
    fn scaled_formulation_differs_by_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = random_points(7, &mut rng);
        let kernel = RkhsKernel::gaussian(0.3).unwrap();
        let chol = chol_psd(&build_gram(&pts, &kernel).unwrap(), 1e-10).unwrap();
        let layout = BlockLayout::appended(&[2, 2], 3).unwrap();
        let n = 3.0;
        let lambda = 0.2;
        let constant = (2.0 + 2.0) / 2.0 * f64::ln(n);
        for scale in [0.5, 1.0, 4.0] {
            let b = SymMatrix::scaled_identity(7, scale);
            let lhs = objective_b(&b, &chol, &layout, lambda).unwrap();
            let rhs = objective_scaled(&b.scale(1.0 / n), &chol, &layout, lambda * n).unwrap();
            assert!((rhs - lhs - constant).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_identity_cases() {
        let d = delta(&SymMatrix::identity(2), &BlockLayout::appended(&[1], 1).unwrap()).unwrap();
        assert!((d.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((d.get(1, 1) + 0.5).abs() < 1e-15);
        assert_eq!(d.get(0, 1), 0.0);

        let d = delta(&SymMatrix::identity(3), &BlockLayout::appended(&[1, 1], 1).unwrap()).unwrap();
        assert!((d.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((d.get(1, 1) - 0.5).abs() < 1e-15);
        assert!((d.get(2, 2) + 0.5).abs() < 1e-15);
    }

    #[test]
    fn delta_matches_dense_selector_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let a = Mat::<f64>::from_fn(5, 5, |_, _| rng.random_range(-1.0..1.0));
        let x = SymMatrix::from_mat(a.transpose() * &a + Mat::<f64>::identity(5, 5)).unwrap();
        let layout = BlockLayout::appended(&[2, 1], 2).unwrap();
        let got = delta(&x, &layout).unwrap();

        let selector = |idx: &[usize]| Mat::<f64>::from_fn(5, idx.len(), |i, j| if idx[j] == i { 1.0 } else { 0.0 });
        let inv = |m: Mat<f64>| {
            let llt = m.llt(Side::Lower).unwrap();
            faer::linalg::solvers::DenseSolveCore::inverse(&llt)
        };
        let mut expected = Mat::<f64>::zeros(5, 5);
        for idx in [&[0usize, 1][..], &[2][..]] {
            let u = selector(idx);
            let sub = u.transpose() * x.as_mat() * &u;
            expected += (&u * inv(sub) * u.transpose()) * faer::Scale(0.5);
        }
        let u = selector(&[3, 4]);
        let sub = u.transpose() * x.as_mat() * &u + Mat::<f64>::identity(2, 2) * faer::Scale(2.0);
        expected -= &u * inv(sub) * u.transpose();
        assert!((got.as_mat() - &expected).norm_max() < 1e-12);
    }

    #[test]
    fn step_diagonal_case() {
        let layout = BlockLayout::appended(&[1], 1).unwrap();
        let next = picard_step(&SymMatrix::identity(2), &identity_factor(2), &layout, 1.0).unwrap();
        assert!((next.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((next.get(1, 1) - (3f64.sqrt() - 1.0) / 2.0).abs() < 1e-14);
        assert!(next.get(0, 1).abs() < 1e-15);
    }

    #[test]
    fn closed_form_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = random_points(8, &mut rng);
        let kernel = RkhsKernel::gaussian(0.2).unwrap();
        let chol = chol_psd(&build_gram(&pts, &kernel).unwrap(), 1e-10).unwrap();
        let layout = BlockLayout::fredholm_from_first_sample(&[8]).unwrap();
        let lambda = 0.1;
        let b = closed_form_b(&chol, lambda).unwrap();
        let next = picard_step(&b, &chol, &layout, lambda).unwrap();
        assert!((next.as_mat() - b.as_mat()).norm_l2() <= 1e-8 * b.frobenius_norm());
        assert!(stationarity_residual(&b, &chol, &layout, lambda).unwrap() < 1e-8);
        let doubled = b.scale(2.0);
        assert!(stationarity_residual(&doubled, &chol, &layout, lambda).unwrap() > 1e-3);
    }

    #[test]
    fn closed_form_scalar_values() {
        let w = Window::unit(2);
        let kernel = RkhsKernel::gaussian(0.1).unwrap();
        let z = vec![vec![0.5, 0.5]];
        let m = closed_form(&z, &kernel, 4.0 / 3.0, &w).unwrap();
        assert!((m.c_matrix.get(0, 0) - 0.5).abs() < 1e-9);
        let lambda = 1e6;
        let m = closed_form(&z, &kernel, lambda, &w).unwrap();
        assert!((lambda * m.c_matrix.get(0, 0) - 1.0).abs() < 2e-6);
    }

    #[test]
    fn closed_form_satisfies_quadratic_condition() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let pts = random_points(4, &mut rng);
        let kernel = RkhsKernel::gaussian(0.3).unwrap();
        let lambda = 0.5;
        let model = closed_form(&pts, &kernel, lambda, &Window::unit(2)).unwrap();
        let chol = landmark_factor(&model).unwrap();
        let k = chol.reconstruct();
        let x = &k * model.c_matrix.as_mat() * &k;
        let m = 4.0;
        let res = &x * &x + &x * faer::Scale(m) - &k * faer::Scale(m / lambda);
        assert!(res.norm_l2() / (x.norm_l2() * x.norm_l2()) < 1e-8);
    }

    #[test]
    fn step_output_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let pts = random_points(9, &mut rng);
        let kernel = RkhsKernel::gaussian(0.15).unwrap();
        let chol = chol_psd(&build_gram(&pts, &kernel).unwrap(), 1e-10).unwrap();
        let layout = BlockLayout::appended(&[3, 2], 4).unwrap();
        let a = Mat::<f64>::from_fn(9, 9, |_, _| rng.random_range(-1.0..1.0));
        let b = SymMatrix::from_mat(a.transpose() * &a + Mat::<f64>::identity(9, 9) * faer::Scale(0.1)).unwrap();
        let next = picard_step(&b, &chol, &layout, 0.01).unwrap();
        let eig = sym_eig(&next).unwrap();
        assert!(*eig.values.last().unwrap() >= -1e-10);
        let g0 = objective_b(&b, &chol, &layout, 0.01).unwrap();
        let g1 = objective_b(&next, &chol, &layout, 0.01).unwrap();
        assert!(g1 <= g0 + 1e-8 * (1.0 + g0.abs()));
    }

    #[test]
    fn fit_is_deterministic_and_rejects_empty_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Window::unit(2);
        let pattern = PointPattern::new(w.clone(), vec![random_points(8, &mut rng)]).unwrap();
        let kernel = RkhsKernel::gaussian(0.2).unwrap();
        let mut cfg = FitConfig::new(0.1, 20, 99);
        cfg.max_iter = 50;
        let (a, ta) = fit(&pattern, &kernel, &cfg).unwrap();
        let (b, tb) = fit(&pattern, &kernel, &cfg).unwrap();
        assert_eq!(a.c_matrix, b.c_matrix);
        assert_eq!(ta, tb);
        assert_eq!(a.m(), 28);

        let empty = PointPattern::new(w, vec![vec![]]).unwrap();
        assert!(matches!(fit(&empty, &kernel, &cfg), Err(DppError::Input(_))));
    }

    #[test]
    fn spectral_run_matches_dense_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = random_points(10, &mut rng);
        let kernel = RkhsKernel::gaussian(0.2).unwrap();
        let chol = chol_psd(&build_gram(&pts, &kernel).unwrap(), 1e-10).unwrap();
        let layout = BlockLayout::appended(&[3, 3], 4).unwrap();
        let lambda = 0.05;
        let mut b = SymMatrix::identity(10);
        let mut objectives = vec![objective_b(&b, &chol, &layout, lambda).unwrap()];
        let mut residuals = vec![stationarity_residual(&b, &chol, &layout, lambda).unwrap()];
        for _ in 0..5 {
            b = picard_step(&b, &chol, &layout, lambda).unwrap();
            objectives.push(objective_b(&b, &chol, &layout, lambda).unwrap());
            residuals.push(stationarity_residual(&b, &chol, &layout, lambda).unwrap());
        }
        let (bs, trace) = run_picard(&chol, &layout, lambda, SymMatrix::identity(10), 1e-300, 5).unwrap();
        assert!((bs.as_mat() - b.as_mat()).norm_l2() <= 1e-9 * b.frobenius_norm());
        for k in 0..=5 {
            assert!((trace.objectives[k] - objectives[k]).abs() <= 1e-9 * (1.0 + objectives[k].abs()));
            assert!((trace.residuals[k] - residuals[k]).abs() <= 1e-8 * (1.0 + residuals[k]));
        }
    }

    #[test]
    fn trace_lower_bound_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = Window::unit(2);
        let pattern = PointPattern::new(w, vec![random_points(5, &mut rng), random_points(4, &mut rng)]).unwrap();
        let kernel = RkhsKernel::gaussian(0.1).unwrap();
        let mut cfg = FitConfig::new(0.01, 30, 1);
        cfg.max_iter = 200;
        let (model, trace) = fit(&pattern, &kernel, &cfg).unwrap();
        let chol = landmark_factor(&model).unwrap();
        let bound = objective_lower_bound(&chol, &model.layout, cfg.lambda).unwrap();
        assert!(trace.objectives.iter().all(|g| *g >= bound));
        assert!(trace.max_relative_increase() <= 1e-8);
    }
}
