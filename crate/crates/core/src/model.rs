//! Windows, point patterns, the RKHS kernel, and the two fitted kernel models.
//!
//! Both fitted models are kernel expansions over an ordered landmark list `Z`:
//! `v(x, y) = k_xᵀ M k_y` with `(k_x)_i = k(z_i, x)`. The coefficient matrix `M`
//! is the representer matrix `C⋆` for the likelihood kernel and `Ω` for the
//! correlation kernel.
//!
//! Gaussian Gram matrices on dense landmark sets are numerically singular, so
//! `M` itself can have enormous entries. The fitted models are therefore
//! evaluated through whitened features `ψ(x) = R⁻ᵀ k_x` (with `K = RᵀR`) and
//! the core matrix `R M Rᵀ`, which stays well scaled.

use std::ops::Range;

use rand::Rng;

use crate::error::{DppError, Result};
use faer::Mat;

use crate::numerics::{build_gram, chol_psd, cross_gram, psd_factor, SymMatrix};

pub type Point = Vec<f64>;

/// Two points closer than this in the sup-norm are treated as duplicates.
pub const DUPLICATE_TOLERANCE: f64 = 1e-12;

/// Axis-aligned box carrying the uniform reference measure.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl Window {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(DppError::input(format!(
                "window bounds must be non-empty and of equal length (got {} and {})",
                lo.len(),
                hi.len()
            )));
        }
        for (j, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !a.is_finite() || !b.is_finite() || b <= a {
                return Err(DppError::input(format!(
                    "window axis {j}: need finite lo < hi, got [{a}, {b}]"
                )));
            }
        }
        Ok(Window { lo, hi })
    }

    /// The unit cube `[0, 1]^d`.
    pub fn unit(d: usize) -> Self {
        Window {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }
    }

    /// Parses a flattened `lo_0,..,lo_{d-1},hi_0,..,hi_{d-1}` list.
    pub fn parse(spec: &str) -> Result<Self> {
        let vals = spec
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|_| DppError::input(format!("bad window coordinate '{t}'")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if vals.is_empty() || vals.len() % 2 != 0 {
            return Err(DppError::input(format!(
                "window needs an even number of coordinates, got {}",
                vals.len()
            )));
        }
        let d = vals.len() / 2;
        Window::new(vals[..d].to_vec(), vals[d..].to_vec())
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    pub fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(DppError::input(format!(
                "point has dimension {}, window has dimension {}",
                x.len(),
                self.dim()
            )));
        }
        if !self.contains(x) {
            return Err(DppError::input(format!("point {x:?} lies outside the window")));
        }
        Ok(())
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| a + (b - a) * rng.random::<f64>())
            .collect()
    }

    /// Cell centres of a regular grid with `resolution` cells per axis.
    ///
    /// The first coordinate varies fastest.
    pub fn cell_centers(&self, resolution: usize) -> Vec<Point> {
        let d = self.dim();
        let total = resolution.pow(d as u32);
        (0..total)
            .map(|mut idx| {
                (0..d)
                    .map(|j| {
                        let k = idx % resolution;
                        idx /= resolution;
                        let h = (self.hi[j] - self.lo[j]) / resolution as f64;
                        self.lo[j] + (k as f64 + 0.5) * h
                    })
                    .collect()
            })
            .collect()
    }

    /// `lo_0,..,hi_{d-1}` in the format accepted by [`Window::parse`].
    pub fn to_flat_string(&self) -> String {
        self.lo
            .iter()
            .chain(&self.hi)
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    Gaussian,
}

/// Reproducing kernel of the hypothesis space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RkhsKernel {
    pub family: KernelFamily,
    pub sigma: f64,
}

impl RkhsKernel {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(DppError::input(format!("bandwidth must be positive, got {sigma}")));
        }
        Ok(RkhsKernel {
            family: KernelFamily::Gaussian,
            sigma,
        })
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self.family {
            KernelFamily::Gaussian => {
                let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                (-d2 / (2.0 * self.sigma * self.sigma)).exp()
            }
        }
    }

    /// `κ² = sup_x k(x, x)`.
    pub fn kappa2(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 1.0,
        }
    }
}

/// Returns the first pair of points closer than [`DUPLICATE_TOLERANCE`] in the sup-norm.
pub fn find_near_duplicate(points: &[Point]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    for (pos, &i) in order.iter().enumerate() {
        for &j in &order[pos + 1..] {
            if points[j][0] - points[i][0] >= DUPLICATE_TOLERANCE {
                break;
            }
            let close = points[i]
                .iter()
                .zip(&points[j])
                .all(|(a, b)| (a - b).abs() < DUPLICATE_TOLERANCE);
            if close {
                return Some((i.min(j), i.max(j)));
            }
        }
    }
    None
}

/// `s` observed samples `C_1..C_s` inside a common window.
#[derive(Clone, Debug, PartialEq)]
pub struct PointPattern {
    window: Window,
    samples: Vec<Vec<Point>>,
}

impl PointPattern {
    /// Validates dimensions, window membership and pairwise distinctness.
    ///
    /// Empty samples are accepted here; fitting rejects them.
    pub fn new(window: Window, samples: Vec<Vec<Point>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(DppError::input("a point pattern needs at least one sample"));
        }
        for (l, sample) in samples.iter().enumerate() {
            for (i, p) in sample.iter().enumerate() {
                window
                    .check_point(p)
                    .map_err(|e| DppError::input(format!("sample {l}, point {i}: {e}")))?;
            }
        }
        let all: Vec<Point> = samples.iter().flatten().cloned().collect();
        if let Some((a, b)) = find_near_duplicate(&all) {
            return Err(DppError::input(format!(
                "points {a} and {b} (in concatenated sample order) coincide within {DUPLICATE_TOLERANCE:e}"
            )));
        }
        Ok(PointPattern { window, samples })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn samples(&self) -> &[Vec<Point>] {
        &self.samples
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn total_points(&self) -> usize {
        self.samples.iter().map(Vec::len).sum()
    }

    pub fn sample_sizes(&self) -> Vec<usize> {
        self.samples.iter().map(Vec::len).collect()
    }
}

/// Index blocks of the samples `C_ℓ` and of the Fredholm set `I` inside `Z`.
///
/// Sample blocks are disjoint. The Fredholm block is either appended after
/// them or, in the single-sample closed-form configuration, equal to `C_1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockLayout {
    samples: Vec<Range<usize>>,
    fredholm: Range<usize>,
    m: usize,
}

impl BlockLayout {
    pub fn new(samples: Vec<Range<usize>>, fredholm: Range<usize>, m: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(DppError::input("layout needs at least one sample block"));
        }
        for (l, r) in samples.iter().enumerate() {
            if r.is_empty() || r.end > m {
                return Err(DppError::input(format!(
                    "sample block {l} ({r:?}) is empty or exceeds m = {m}"
                )));
            }
        }
        let mut sorted = samples.clone();
        sorted.sort_by_key(|r| r.start);
        if sorted.windows(2).any(|w| w[0].end > w[1].start) {
            return Err(DppError::input("sample blocks overlap"));
        }
        if fredholm.is_empty() || fredholm.end > m {
            return Err(DppError::input(format!(
                "Fredholm block {fredholm:?} is empty or exceeds m = {m}"
            )));
        }
        Ok(BlockLayout { samples, fredholm, m })
    }

    /// `Z = C_1 ‖ … ‖ C_s ‖ I`.
    pub fn appended(sample_sizes: &[usize], n_fredholm: usize) -> Result<Self> {
        let (samples, end) = consecutive(sample_sizes);
        Self::new(samples, end..end + n_fredholm, end + n_fredholm)
    }

    /// `Z = C_1 ‖ … ‖ C_s` with `I := C_1`.
    pub fn fredholm_from_first_sample(sample_sizes: &[usize]) -> Result<Self> {
        let (samples, end) = consecutive(sample_sizes);
        let first = samples.first().cloned().unwrap_or(0..0);
        Self::new(samples, first, end)
    }

    pub fn samples(&self) -> &[Range<usize>] {
        &self.samples
    }

    pub fn fredholm(&self) -> Range<usize> {
        self.fredholm.clone()
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    /// `n = |I|`.
    pub fn n_fredholm(&self) -> usize {
        self.fredholm.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// True when `I` reuses a sample block instead of fresh uniform draws.
    pub fn fredholm_from_sample(&self) -> bool {
        self.samples
            .iter()
            .any(|r| r.start < self.fredholm.end && self.fredholm.start < r.end)
    }
}

fn consecutive(sizes: &[usize]) -> (Vec<Range<usize>>, usize) {
    let mut start = 0;
    let ranges = sizes
        .iter()
        .map(|&len| {
            let r = start..start + len;
            start += len;
            r
        })
        .collect();
    (ranges, start)
}

/// A kernel `v(x, y) = Σ_ij M_ij k(z_i, x) k(z_j, y)` over ordered landmarks.
pub trait KernelExpansion {
    fn kernel(&self) -> &RkhsKernel;
    fn window(&self) -> &Window;
    fn landmarks(&self) -> &[Point];
    fn coefficients(&self) -> &SymMatrix;

    /// `(k(z_1, x), …, k(z_m, x))`.
    fn features(&self, x: &[f64]) -> Vec<f64> {
        let k = self.kernel();
        self.landmarks().iter().map(|z| k.eval(z, x)).collect()
    }

    /// `F` (r×n) with `v(x_i, x_j) = (FᵀF)_ij` over `points`.
    fn factor_at(&self, points: &[Point]) -> Result<Mat<f64>> {
        let e = psd_factor(self.coefficients())?;
        Ok(&e * cross_gram(self.landmarks(), points, self.kernel())?)
    }

    /// Evaluates the kernel; both points must lie in the window.
    fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.window().check_point(x)?;
        self.window().check_point(y)?;
        let f = self.factor_at(&[x.to_vec(), y.to_vec()])?;
        Ok((0..f.nrows()).map(|i| f[(i, 0)] * f[(i, 1)]).sum())
    }
}

/// `ψ(x_j) = R⁻ᵀ k_{x_j}` as columns, with `K_ZZ + jitter·I = RᵀR`.
pub fn whitened_features(landmarks: &[Point], kernel: &RkhsKernel, jitter: f64, points: &[Point]) -> Result<Mat<f64>> {
    let chol = chol_psd(&build_gram(landmarks, kernel)?, jitter)?;
    Ok(chol.solve_upper_transpose(cross_gram(landmarks, points, kernel)?.as_ref()))
}

/// `R M Rᵀ` for the landmark factor `K_ZZ + jitter·I = RᵀR`.
fn whiten_core(landmarks: &[Point], kernel: &RkhsKernel, jitter: f64, m: &SymMatrix) -> Result<SymMatrix> {
    if landmarks.len() != m.dim() {
        return Err(DppError::DimensionMismatch(format!(
            "{} landmarks but a {}x{} coefficient matrix",
            landmarks.len(),
            m.dim(),
            m.dim()
        )));
    }
    let chol = chol_psd(&build_gram(landmarks, kernel)?, jitter)?;
    m.congruence(chol.lower())
}

/// Output of Algorithm-1 style fitting: the likelihood kernel estimate `â`.
#[derive(Clone, Debug, PartialEq)]
pub struct LikelihoodModel {
    pub kernel: RkhsKernel,
    pub window: Window,
    pub lambda: f64,
    /// `Z = C_1 ‖ … ‖ C_s ‖ I`, in fitting order.
    pub landmarks: Vec<Point>,
    /// Representer matrix `C⋆`.
    pub c_matrix: SymMatrix,
    /// `B⋆ = R C⋆ Rᵀ`, the whitened core used for evaluation.
    pub b_matrix: SymMatrix,
    pub layout: BlockLayout,
    /// Jitter that was added to the Gram matrix before its Cholesky factorization.
    pub jitter: f64,
}

impl LikelihoodModel {
    /// Builds a model from `C⋆`, deriving the whitened core `B⋆ = R C⋆ Rᵀ`.
    pub fn from_representer(
        kernel: RkhsKernel,
        window: Window,
        lambda: f64,
        landmarks: Vec<Point>,
        c_matrix: SymMatrix,
        layout: BlockLayout,
        jitter: f64,
    ) -> Result<Self> {
        let b_matrix = whiten_core(&landmarks, &kernel, jitter, &c_matrix)?;
        Ok(LikelihoodModel {
            kernel,
            window,
            lambda,
            landmarks,
            c_matrix,
            b_matrix,
            layout,
            jitter,
        })
    }

    pub fn m(&self) -> usize {
        self.landmarks.len()
    }

    pub fn n_fredholm(&self) -> usize {
        self.layout.n_fredholm()
    }
}

impl KernelExpansion for LikelihoodModel {
    fn kernel(&self) -> &RkhsKernel {
        &self.kernel
    }
    fn window(&self) -> &Window {
        &self.window
    }
    fn landmarks(&self) -> &[Point] {
        &self.landmarks
    }
    fn coefficients(&self) -> &SymMatrix {
        &self.c_matrix
    }
    fn factor_at(&self, points: &[Point]) -> Result<Mat<f64>> {
        let psi = whitened_features(&self.landmarks, &self.kernel, self.jitter, points)?;
        Ok(psd_factor(&self.b_matrix)? * psi)
    }
}

/// Output of the randomized resolvent estimate: the correlation kernel `k̂`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationModel {
    pub kernel: RkhsKernel,
    pub window: Window,
    pub gamma: f64,
    pub landmarks: Vec<Point>,
    pub omega: SymMatrix,
    /// `R Ω Rᵀ`, the whitened core used for evaluation.
    pub core: SymMatrix,
    pub jitter: f64,
    pub p_used: usize,
}

impl CorrelationModel {
    /// Builds a model from `Ω`, deriving the whitened core `R Ω Rᵀ`.
    pub fn from_coefficients(
        kernel: RkhsKernel,
        window: Window,
        gamma: f64,
        landmarks: Vec<Point>,
        omega: SymMatrix,
        jitter: f64,
        p_used: usize,
    ) -> Result<Self> {
        let core = whiten_core(&landmarks, &kernel, jitter, &omega)?;
        Ok(CorrelationModel {
            kernel,
            window,
            gamma,
            landmarks,
            omega,
            core,
            jitter,
            p_used,
        })
    }
}

impl KernelExpansion for CorrelationModel {
    fn kernel(&self) -> &RkhsKernel {
        &self.kernel
    }
    fn window(&self) -> &Window {
        &self.window
    }
    fn landmarks(&self) -> &[Point] {
        &self.landmarks
    }
    fn coefficients(&self) -> &SymMatrix {
        &self.omega
    }
    fn factor_at(&self, points: &[Point]) -> Result<Mat<f64>> {
        let psi = whitened_features(&self.landmarks, &self.kernel, self.jitter, points)?;
        Ok(psd_factor(&self.core)? * psi)
    }
}

/// A bare kernel expansion, used for ad-hoc operators in diagnostics and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub kernel: RkhsKernel,
    pub window: Window,
    pub landmarks: Vec<Point>,
    pub coefficients: SymMatrix,
}

impl Expansion {
    pub fn new(kernel: RkhsKernel, window: Window, landmarks: Vec<Point>, coefficients: SymMatrix) -> Result<Self> {
        if landmarks.len() != coefficients.dim() {
            return Err(DppError::DimensionMismatch(format!(
                "{} landmarks but a {}x{} coefficient matrix",
                landmarks.len(),
                coefficients.dim(),
                coefficients.dim()
            )));
        }
        for z in &landmarks {
            window.check_point(z)?;
        }
        Ok(Expansion {
            kernel,
            window,
            landmarks,
            coefficients,
        })
    }
}

impl KernelExpansion for Expansion {
    fn kernel(&self) -> &RkhsKernel {
        &self.kernel
    }
    fn window(&self) -> &Window {
        &self.window
    }
    fn landmarks(&self) -> &[Point] {
        &self.landmarks
    }
    fn coefficients(&self) -> &SymMatrix {
        &self.coefficients
    }
}

/// `â(x, y)`.
pub fn eval_likelihood_kernel(model: &LikelihoodModel, x: &[f64], y: &[f64]) -> Result<f64> {
    model.eval(x, y)
}

/// `k̂(x, y)`.
pub fn eval_correlation_kernel(model: &CorrelationModel, x: &[f64], y: &[f64]) -> Result<f64> {
    model.eval(x, y)
}

/// Diagonal `v(x, x)` at each point, as squared column norms of the factor.
pub fn eval_diagonal<M: KernelExpansion + ?Sized>(model: &M, points: &[Point]) -> Result<Vec<f64>> {
    for x in points {
        model.window().check_point(x)?;
    }
    let f = model.factor_at(points)?;
    Ok((0..f.ncols())
        .map(|j| (0..f.nrows()).map(|i| f[(i, j)] * f[(i, j)]).sum())
        .collect())
}

/// `v(x, x)` on the cell-centre grid of a two-dimensional window.
///
/// Rows are ordered with the first coordinate varying fastest:
/// `(x_0, y_0), (x_1, y_0), …, (x_{r-1}, y_{r-1})`.
pub fn intensity_grid<M: KernelExpansion + ?Sized>(model: &M, resolution: usize) -> Result<Vec<(Point, f64)>> {
    if resolution < 2 {
        return Err(DppError::input(format!(
            "grid resolution must be ≥ 2, got {resolution}"
        )));
    }
    if model.window().dim() != 2 {
        return Err(DppError::input(format!(
            "grid output needs a 2-d window, model has d = {}",
            model.window().dim()
        )));
    }
    let nodes = model.window().cell_centers(resolution);
    let values = eval_diagonal(model, &nodes)?;
    Ok(nodes.into_iter().zip(values).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_landmark(c: f64) -> LikelihoodModel {
        LikelihoodModel {
            kernel: RkhsKernel::gaussian(0.2).unwrap(),
            window: Window::unit(2),
            lambda: 0.1,
            landmarks: vec![vec![0.4, 0.6]],
            c_matrix: SymMatrix::from_diagonal(&[c]).unwrap(),
            b_matrix: SymMatrix::from_diagonal(&[c]).unwrap(),
            layout: BlockLayout::fredholm_from_first_sample(&[1]).unwrap(),
            jitter: 0.0,
        }
    }

    fn random_model(m: usize, seed: u64) -> LikelihoodModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Window::unit(2);
        let landmarks: Vec<Point> = (0..m).map(|_| w.sample_uniform(&mut rng)).collect();
        let a = faer::Mat::<f64>::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let c = SymMatrix::from_mat(a.transpose() * &a).unwrap();
        LikelihoodModel::from_representer(
            RkhsKernel::gaussian(0.15).unwrap(),
            w,
            0.1,
            landmarks,
            c,
            BlockLayout::fredholm_from_first_sample(&[m]).unwrap(),
            1e-10,
        )
        .unwrap()
    }

    #[test]
    fn window_validation_and_parse() {
        assert!(Window::new(vec![0.0], vec![0.0]).is_err());
        assert!(Window::new(vec![0.0, 0.0], vec![1.0]).is_err());
        let w = Window::parse("0,0,2,0.5").unwrap();
        assert_eq!(w.dim(), 2);
        assert_eq!(w.volume(), 1.0);
        assert!(Window::parse("0,1,2").is_err());
        assert_eq!(Window::parse(&w.to_flat_string()).unwrap(), w);
    }

    #[test]
    fn cell_centers_first_axis_fastest() {
        let c = Window::unit(2).cell_centers(2);
        assert_eq!(
            c,
            vec![vec![0.25, 0.25], vec![0.75, 0.25], vec![0.25, 0.75], vec![0.75, 0.75]]
        );
    }

    #[test]
    fn single_landmark_value() {
        let m = one_landmark(2.5);
        let z = m.landmarks[0].clone();
        assert!((eval_likelihood_kernel(&m, &z, &z).unwrap() - 2.5).abs() < 1e-14);
    }

    #[test]
    fn outside_window_is_input_error() {
        let m = one_landmark(1.0);
        assert!(matches!(
            eval_likelihood_kernel(&m, &[1.5, 0.5], &[0.5, 0.5]),
            Err(DppError::Input(_))
        ));
    }

    #[test]
    fn symmetric_over_random_pairs() {
        let m = random_model(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let x = m.window.sample_uniform(&mut rng);
            let y = m.window.sample_uniform(&mut rng);
            let a = m.eval(&x, &y).unwrap();
            let b = m.eval(&y, &x).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn matches_double_sum() {
        let m = random_model(2, 8);
        let x = vec![0.3, 0.1];
        let y = vec![0.9, 0.45];
        let k = m.kernel;
        let mut expected = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expected += m.c_matrix.get(i, j) * k.eval(&m.landmarks[i], &x) * k.eval(&m.landmarks[j], &y);
            }
        }
        assert!((m.eval(&x, &y).unwrap() - expected).abs() < 1e-10 * (1.0 + expected.abs()));
    }

    #[test]
    fn correlation_model_matches_double_sum() {
        let base = random_model(3, 12);
        let corr = CorrelationModel::from_coefficients(
            base.kernel,
            base.window.clone(),
            1.0,
            base.landmarks.clone(),
            base.c_matrix.clone(),
            base.jitter,
            10,
        )
        .unwrap();
        let z = corr.landmarks[0].clone();
        let x = vec![0.2, 0.8];
        let k = corr.kernel;
        let mut expected = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                expected += corr.omega.get(i, j) * k.eval(&corr.landmarks[i], &z) * k.eval(&corr.landmarks[j], &x);
            }
        }
        let tol = 1e-10 * (1.0 + expected.abs());
        assert!((eval_correlation_kernel(&corr, &z, &x).unwrap() - expected).abs() < tol);
        assert!((eval_correlation_kernel(&corr, &x, &z).unwrap() - expected).abs() < tol);
    }

    #[test]
    fn landmark_permutation_invariance() {
        let m = random_model(5, 21);
        let perm = [3usize, 0, 4, 1, 2];
        let p = LikelihoodModel::from_representer(
            m.kernel,
            m.window.clone(),
            m.lambda,
            perm.iter().map(|&i| m.landmarks[i].clone()).collect(),
            SymMatrix::from_fn(5, |i, j| m.c_matrix.get(perm[i], perm[j])).unwrap(),
            m.layout.clone(),
            m.jitter,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let x = m.window.sample_uniform(&mut rng);
            let y = m.window.sample_uniform(&mut rng);
            let a = m.eval(&x, &y).unwrap();
            let b = p.eval(&x, &y).unwrap();
            assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn grid_nonnegative_for_psd() {
        let m = random_model(8, 30);
        let grid = intensity_grid(&m, 25).unwrap();
        assert_eq!(grid.len(), 625);
        assert!(grid.iter().all(|(_, v)| *v >= -1e-10));
    }

    #[test]
    fn grid_single_landmark_closed_form() {
        let kappa = 3.0;
        let m = one_landmark(kappa);
        let z = m.landmarks[0].clone();
        for (x, v) in intensity_grid(&m, 10).unwrap() {
            let k = m.kernel.eval(&z, &x);
            assert!((v - kappa * k * k).abs() < 1e-14);
        }
    }

    #[test]
    fn grid_rejects_bad_input() {
        let m = one_landmark(1.0);
        assert!(intensity_grid(&m, 1).is_err());
    }

    #[test]
    fn duplicates_rejected() {
        let w = Window::unit(2);
        let err = PointPattern::new(w.clone(), vec![vec![vec![0.1, 0.2]], vec![vec![0.1, 0.2 + 1e-14]]]);
        assert!(err.is_err());
        assert!(PointPattern::new(w, vec![vec![vec![0.1, 0.2], vec![0.1, 0.3]]]).is_ok());
    }

    #[test]
    fn layout_shapes() {
        let l = BlockLayout::appended(&[2, 3], 4).unwrap();
        assert_eq!(l.m(), 9);
        assert_eq!(l.fredholm(), 5..9);
        assert!(!l.fredholm_from_sample());
        let l = BlockLayout::fredholm_from_first_sample(&[4]).unwrap();
        assert_eq!(l.fredholm(), 0..4);
        assert!(l.fredholm_from_sample());
        assert!(BlockLayout::appended(&[0], 3).is_err());
        assert!(BlockLayout::new(vec![0..3, 2..4], 4..5, 5).is_err());
    }
}
