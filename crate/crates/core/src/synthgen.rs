//! Ground-truth samples from the Gaussian-kernel DPP by grid-spectral sampling.
//!
//! The correlation kernel `k(x, y) = ρ exp(−‖x − y‖²/α²)` is discretized on
//! the cell centres of a tensor grid as `K_grid = k(x_i, x_j)/N`. A draw keeps
//! each eigenvector independently with probability equal to its eigenvalue,
//! samples one grid node per kept eigenvector from the resulting projection
//! DPP, then jitters every node uniformly within its cell.

use std::path::Path;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DppError, Result};
use crate::format::write_pattern;
use crate::model::{Point, Window};
use crate::numerics::{sym_eig, EigDecomp, SymMatrix};

/// Largest grid accepted by the sampler.
pub const MAX_GRID_NODES: usize = 8192;
/// Eigenvalues above `1 + VALIDITY_SLACK` reject the discretization.
pub const VALIDITY_SLACK: f64 = 1e-8;
/// Top eigenvalues above this trigger a resolution warning.
pub const NEAR_PROJECTION_WARNING: f64 = 0.999;
pub const DEFAULT_RESOLUTION: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthDpp {
    pub rho: f64,
    pub alpha: f64,
    pub window: Window,
    pub grid_resolution: usize,
}

impl GroundTruthDpp {
    pub fn new(rho: f64, alpha: f64, window: Window, grid_resolution: usize) -> Result<Self> {
        if !(rho > 0.0) || !(alpha > 0.0) || !rho.is_finite() || !alpha.is_finite() {
            return Err(DppError::input(format!(
                "rho and alpha must be positive, got {rho}, {alpha}"
            )));
        }
        if grid_resolution == 0 {
            return Err(DppError::input("grid resolution must be positive"));
        }
        let validity = validate_kernel(rho, alpha, window.dim());
        if !validity.valid {
            return Err(DppError::input(format!(
                "rho = {rho} exceeds the validity bound {} for alpha = {alpha}",
                validity.bound
            )));
        }
        Ok(GroundTruthDpp {
            rho,
            alpha,
            window,
            grid_resolution,
        })
    }

    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.rho * (-d2 / (self.alpha * self.alpha)).exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelValidity {
    pub valid: bool,
    /// `(√π α)^{−d}`.
    pub bound: f64,
    /// `bound − ρ`.
    pub margin: f64,
}

pub fn validate_kernel(rho: f64, alpha: f64, d: usize) -> KernelValidity {
    let bound = (std::f64::consts::PI.sqrt() * alpha).powi(-(d as i32));
    KernelValidity {
        valid: rho > 0.0 && alpha > 0.0 && rho < bound,
        bound,
        margin: bound - rho,
    }
}

/// Spectrum of the grid kernel matrix.
#[derive(Clone, Debug)]
enum GridSpectrum {
    /// One decomposition per axis; the full matrix is a multiple of their
    /// Kronecker product, with the first axis varying fastest.
    Kronecker(Vec<EigDecomp>),
    Dense(EigDecomp),
}

/// Reusable sampler over a fixed grid kernel matrix.
#[derive(Clone, Debug)]
pub struct GridDppSampler {
    window: Window,
    resolution: usize,
    nodes: Vec<Point>,
    spectrum: GridSpectrum,
    /// Eigenvalues in flattened order, clamped to `[0, 1]`.
    eigenvalues: Vec<f64>,
    warnings: Vec<String>,
}

fn flatten_index(mut k: usize, r: usize, d: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(d);
    for _ in 0..d {
        out.push(k % r);
        k /= r;
    }
    out
}

impl GridDppSampler {
    /// Sampler for the ground-truth Gaussian correlation kernel.
    pub fn new(gt: &GroundTruthDpp) -> Result<Self> {
        let d = gt.window.dim();
        let r = gt.grid_resolution;
        let n = checked_nodes(r, d)?;
        let mut axes = Vec::with_capacity(d);
        for a in 0..d {
            let h = (gt.window.hi()[a] - gt.window.lo()[a]) / r as f64;
            let t: Vec<f64> = (0..r).map(|i| gt.window.lo()[a] + (i as f64 + 0.5) * h).collect();
            let e = SymMatrix::from_fn(r, |i, j| {
                let diff = t[i] - t[j];
                (-diff * diff / (gt.alpha * gt.alpha)).exp()
            })?;
            axes.push(sym_eig(&e)?);
        }
        let scale = gt.rho / n as f64;
        let raw: Vec<f64> = (0..n)
            .map(|k| {
                flatten_index(k, r, d)
                    .iter()
                    .enumerate()
                    .map(|(a, &i)| axes[a].values[i])
                    .product::<f64>()
                    * scale
            })
            .collect();
        Self::finish(gt.window.clone(), r, GridSpectrum::Kronecker(axes), raw)
    }

    /// Sampler for an arbitrary PSD kernel matrix over `window.cell_centers(resolution)`.
    pub fn from_kernel_matrix(window: Window, resolution: usize, kernel_matrix: &SymMatrix) -> Result<Self> {
        let n = checked_nodes(resolution, window.dim())?;
        if kernel_matrix.dim() != n {
            return Err(DppError::DimensionMismatch(format!(
                "kernel matrix is {0}x{0}, grid has {n} nodes",
                kernel_matrix.dim()
            )));
        }
        let eig = sym_eig(kernel_matrix)?;
        eig.check_psd()?;
        let raw = eig.values.clone();
        Self::finish(window, resolution, GridSpectrum::Dense(eig), raw)
    }

    fn finish(window: Window, resolution: usize, spectrum: GridSpectrum, raw: Vec<f64>) -> Result<Self> {
        let top = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top > 1.0 + VALIDITY_SLACK {
            return Err(DppError::input(format!(
                "grid kernel has eigenvalue {top} > 1; the discretization is too coarse or the kernel is invalid"
            )));
        }
        let mut warnings = Vec::new();
        if top > NEAR_PROJECTION_WARNING {
            warnings.push(format!(
                "top grid eigenvalue {top} exceeds {NEAR_PROJECTION_WARNING}; consider a finer resolution"
            ));
        }
        let nodes = window.cell_centers(resolution);
        Ok(GridDppSampler {
            window,
            resolution,
            nodes,
            spectrum,
            eigenvalues: raw.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
            warnings,
        })
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn top_eigenvalue(&self) -> f64 {
        self.eigenvalues.iter().copied().fold(0.0, f64::max)
    }

    /// `Tr(K_grid)`, the expected cardinality.
    pub fn expected_count(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// `Σ λ_i (1 − λ_i)`, the cardinality variance.
    pub fn count_variance(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l * (1.0 - l)).sum()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn nodes(&self) -> &[Point] {
        &self.nodes
    }

    /// Eigenvector `k` (flattened order) as a length-`N` vector.
    fn eigenvector(&self, k: usize) -> Vec<f64> {
        match &self.spectrum {
            GridSpectrum::Dense(eig) => eig.vectors.col(k).iter().copied().collect(),
            GridSpectrum::Kronecker(axes) => {
                let d = axes.len();
                let r = self.resolution;
                let idx = flatten_index(k, r, d);
                (0..self.nodes.len())
                    .map(|node| {
                        flatten_index(node, r, d)
                            .iter()
                            .enumerate()
                            .map(|(a, &i)| axes[a].vectors[(i, idx[a])])
                            .product()
                    })
                    .collect()
            }
        }
    }

    /// Independent Bernoulli selection of eigenvectors.
    pub fn bernoulli_phase<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        self.eigenvalues
            .iter()
            .enumerate()
            .filter_map(|(k, &l)| (rng.random::<f64>() < l).then_some(k))
            .collect()
    }

    /// Grid nodes drawn from the projection DPP spanned by the selected eigenvectors.
    pub fn projection_phase<R: Rng + ?Sized>(&self, selected: &[usize], rng: &mut R) -> Vec<usize> {
        let n = self.nodes.len();
        let k = selected.len();
        let mut v = Mat::<f64>::zeros(n, k);
        for (j, &e) in selected.iter().enumerate() {
            for (i, x) in self.eigenvector(e).into_iter().enumerate() {
                v[(i, j)] = x;
            }
        }
        let mut d: Vec<f64> = (0..n).map(|i| (0..k).map(|j| v[(i, j)] * v[(i, j)]).sum()).collect();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
        let mut chosen = Vec::with_capacity(k);
        for _ in 0..k {
            let total: f64 = d.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            // pick the last positive weight if roundoff ran past the end
            if d[pick] <= 0.0 {
                pick = d.iter().rposition(|&w| w > 0.0).unwrap_or(pick);
            }
            let mut c: Vec<f64> = (0..n).map(|j| (0..k).map(|l| v[(j, l)] * v[(pick, l)]).sum()).collect();
            for e in &basis {
                let w = e[pick];
                for j in 0..n {
                    c[j] -= w * e[j];
                }
            }
            let norm = c[pick].max(f64::MIN_POSITIVE).sqrt();
            for x in c.iter_mut() {
                *x /= norm;
            }
            for j in 0..n {
                d[j] = (d[j] - c[j] * c[j]).max(0.0);
            }
            d[pick] = 0.0;
            basis.push(c);
            chosen.push(pick);
        }
        chosen
    }

    /// Uniform point within the cell of `node`.
    fn jitter<R: Rng + ?Sized>(&self, node: usize, rng: &mut R) -> Point {
        let r = self.resolution as f64;
        self.nodes[node]
            .iter()
            .enumerate()
            .map(|(a, &c)| {
                let h = (self.window.hi()[a] - self.window.lo()[a]) / r;
                let x = c + (rng.random::<f64>() - 0.5) * h;
                x.clamp(self.window.lo()[a], self.window.hi()[a])
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Point> {
        let selected = self.bernoulli_phase(rng);
        self.sample_projection(&selected, rng)
    }

    /// Draw with a forced eigenvector selection (projection DPP of rank `selected.len()`).
    pub fn sample_projection<R: Rng + ?Sized>(&self, selected: &[usize], rng: &mut R) -> Vec<Point> {
        self.projection_phase(selected, rng)
            .into_iter()
            .map(|node| self.jitter(node, rng))
            .collect()
    }

    /// Indices of the `r` largest eigenvalues.
    pub fn top_indices(&self, r: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| self.eigenvalues[b].total_cmp(&self.eigenvalues[a]));
        idx.truncate(r);
        idx
    }
}

fn checked_nodes(resolution: usize, d: usize) -> Result<usize> {
    let n = resolution
        .checked_pow(d as u32)
        .filter(|&n| n <= MAX_GRID_NODES)
        .ok_or_else(|| DppError::input(format!("grid {resolution}^{d} exceeds the {MAX_GRID_NODES}-node limit")))?;
    if n == 0 {
        return Err(DppError::input("grid resolution must be positive"));
    }
    Ok(n)
}

/// `s` independent samples with a single seeded generator.
pub fn sample_dpp_many(gt: &GroundTruthDpp, samples: usize, seed: u64) -> Result<Vec<Vec<Point>>> {
    let sampler = GridDppSampler::new(gt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..samples).map(|_| sampler.sample(&mut rng)).collect())
}

pub fn sample_dpp(gt: &GroundTruthDpp, seed: u64) -> Result<Vec<Point>> {
    Ok(sample_dpp_many(gt, 1, seed)?.remove(0))
}

pub fn export_pattern(
    window: &Window,
    samples: &[Vec<Point>],
    path: impl AsRef<Path>,
    comments: &[String],
) -> Result<()> {
    write_pattern(path, window, samples, comments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::load_pattern;

    fn gt(rho: f64, res: usize) -> GroundTruthDpp {
        GroundTruthDpp::new(rho, 0.05, Window::unit(2), res).unwrap()
    }

    #[test]
    fn validity_examples() {
        let v = validate_kernel(100.0, 0.05, 2);
        assert!(v.valid);
        assert!((v.bound - 127.32395447351627).abs() < 1e-9);
        assert!(validate_kernel(50.0, 0.05, 2).valid);
        assert!(!validate_kernel(200.0, 0.05, 2).valid);
        assert!(GroundTruthDpp::new(200.0, 0.05, Window::unit(2), 32).is_err());
    }

    #[test]
    fn kronecker_spectrum_matches_dense() {
        let g = GroundTruthDpp::new(30.0, 0.1, Window::unit(2), 7).unwrap();
        let s = GridDppSampler::new(&g).unwrap();
        let nodes = Window::unit(2).cell_centers(7);
        let n = nodes.len();
        let k = SymMatrix::from_fn(n, |i, j| g.kernel(&nodes[i], &nodes[j]) / n as f64).unwrap();
        let d = GridDppSampler::from_kernel_matrix(Window::unit(2), 7, &k).unwrap();
        let mut a = s.eigenvalues().to_vec();
        let mut b = d.eigenvalues().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // eigenvectors: K v = λ v for a few Kronecker vectors
        for e in [0usize, 5, 17, 48] {
            let v = s.eigenvector(e);
            for i in 0..n {
                let kv: f64 = (0..n).map(|j| k.get(i, j) * v[j]).sum();
                assert!((kv - s.eigenvalues()[e] * v[i]).abs() < 1e-12);
            }
        }
        assert!((s.expected_count() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        // a coarse grid concentrates the mass of a narrow kernel on few nodes
        let g = GroundTruthDpp::new(120.0, 0.05, Window::unit(2), 4).unwrap();
        assert!(GridDppSampler::new(&g).is_err());
    }

    #[test]
    fn projection_draw_has_exact_cardinality() {
        let s = GridDppSampler::new(&gt(50.0, 24)).unwrap();
        let top = s.top_indices(12);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nodes = s.projection_phase(&top, &mut rng);
            assert_eq!(nodes.len(), 12);
            let mut sorted = nodes.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 12, "a node was selected twice");
            let pts = s.sample_projection(&top, &mut rng);
            assert!(pts.iter().all(|p| Window::unit(2).contains(p)));
        }
    }

    #[test]
    fn top_eigenvector_selection_frequency() {
        let s = GridDppSampler::new(&gt(50.0, 16)).unwrap();
        let top = s.top_indices(1)[0];
        let p = s.eigenvalues()[top];
        let runs = 2000;
        let hits = (0..runs)
            .filter(|&seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                s.bernoulli_phase(&mut rng).contains(&top)
            })
            .count() as f64;
        let sd = (runs as f64 * p * (1.0 - p)).sqrt();
        assert!((hits - runs as f64 * p).abs() <= 3.0 * sd.max(1.0));
    }

    #[test]
    fn samples_are_deterministic_and_round_trip() {
        let g = gt(20.0, 16);
        let a = sample_dpp_many(&g, 2, 5).unwrap();
        let b = sample_dpp_many(&g, 2, 5).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        export_pattern(&g.window, &a, &path, &["seed 5".into()]).unwrap();
        let back = load_pattern(&path, None).unwrap();
        assert_eq!(back.samples(), &a[..]);
    }

    #[test]
    fn three_point_export_and_empty_sample() {
        let w = Window::unit(2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.5, 0.6]];
        export_pattern(&w, &[pts], &path, &[]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 4);
        export_pattern(&w, &[vec![]], &path, &[]).unwrap();
        let back = load_pattern(&path, None).unwrap();
        assert_eq!(back.num_samples(), 1);
        assert_eq!(back.sample_sizes(), vec![0]);
    }
}
