use dpplearn::model::{Point, Window};
use dpplearn::synthgen::{GridDppSampler, GroundTruthDpp};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn pairs_in(points: &[Point], lo: f64, hi: f64) -> usize {
    let mut count = 0;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d = ((points[i][0] - points[j][0]).powi(2) + (points[i][1] - points[j][1]).powi(2)).sqrt();
            if d >= lo && d < hi {
                count += 1;
            }
        }
    }
    count
}

#[test]
fn pair_correlation_shows_repulsion() {
    let gt = GroundTruthDpp::new(50.0, 0.05, Window::unit(2), 64).unwrap();
    let sampler = GridDppSampler::new(&gt).unwrap();
    let w = Window::unit(2);
    let (mut near_dpp, mut far_dpp, mut near_uni, mut far_uni) = (0, 0, 0, 0);
    for seed in 0..200u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dpp = sampler.sample(&mut rng);
        let uniform: Vec<Point> = (0..dpp.len()).map(|_| w.sample_uniform(&mut rng)).collect();
        near_dpp += pairs_in(&dpp, 0.005, 0.015);
        far_dpp += pairs_in(&dpp, 0.49, 0.51);
        near_uni += pairs_in(&uniform, 0.005, 0.015);
        far_uni += pairs_in(&uniform, 0.49, 0.51);
    }
    let g_near = near_dpp as f64 / near_uni as f64;
    let g_far = far_dpp as f64 / far_uni as f64;
    assert!(g_near < g_far, "g(0.01) = {g_near}, g(0.5) = {g_far}");
    assert!(
        g_near < 0.5 && (g_far - 1.0).abs() < 0.2,
        "g(0.01) = {g_near}, g(0.5) = {g_far}"
    );
}

#[test]
fn cardinality_variance_matches_spectrum() {
    let gt = GroundTruthDpp::new(50.0, 0.05, Window::unit(2), 32).unwrap();
    let sampler = GridDppSampler::new(&gt).unwrap();
    assert!(sampler.count_variance() < sampler.expected_count());
    assert!((sampler.expected_count() - 50.0).abs() < 1e-9);
}
