mod common;

use common::{batch_moments, max_relative_error};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swagppm::swag::SwagMoments;
use swagppm::{Layout, ParameterVector};

fn random_moments(seed: u64, p: usize, snapshots: usize, max_rank: usize) -> (SwagMoments, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::contiguous([("theta", vec![p])]);
    let mut m = SwagMoments::new(layout.clone(), max_rank).unwrap();
    let mut seen = Vec::new();
    for _ in 0..snapshots {
        let v: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        m.absorb(&ParameterVector::new(layout.clone(), v.clone()).unwrap()).unwrap();
        seen.push(v);
    }
    (m, seen)
}

/// `½(Σ_diag + D̂D̂ᵀ/(K−1))` assembled from the moments' public parts.
fn target_covariance(m: &SwagMoments) -> Vec<Vec<f64>> {
    let p = m.mean().len();
    let var: Vec<f64> = m.diag_variance().iter().map(|v| v.max(0.0)).collect();
    let cols: Vec<&[f64]> = m.deviation_columns().collect();
    let k = cols.len() as f64;
    (0..p)
        .map(|i| {
            (0..p)
                .map(|j| {
                    let low: f64 = cols.iter().map(|c| c[i] * c[j]).sum::<f64>() / (k - 1.0);
                    0.5 * (if i == j { var[i] } else { 0.0 } + low)
                })
                .collect()
        })
        .collect()
}

#[test]
fn running_moments_match_batch_recomputation() {
    for seed in 0..50 {
        let (m, seen) = random_moments(seed, 7, 3 + seed as usize % 20, 5);
        let (mean, sq_mean, var) = batch_moments(&seen);
        assert!(max_relative_error(m.mean(), &mean) < 1e-12);
        assert!(max_relative_error(m.sq_mean(), &sq_mean) < 1e-12);
        assert!(max_relative_error(&m.diag_variance(), &var) < 1e-12);
    }
}

#[test]
fn covariance_quadratic_form_is_nonnegative() {
    let (m, _) = random_moments(3, 5, 12, 4);
    let cov = target_covariance(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let q: f64 = (0..5).map(|i| (0..5).map(|j| z[i] * cov[i][j] * z[j]).sum::<f64>()).sum();
        assert!(q >= -1e-10);
    }
}

#[test]
fn sample_covariance_converges_to_target() {
    let (m, _) = random_moments(11, 4, 10, 4);
    let cov = target_covariance(&m);
    let n = 1000;
    let draws = m.sample_posterior(n, 5).unwrap();
    let mean: Vec<f64> = (0..4).map(|j| draws.iter().map(|d| d.values()[j]).sum::<f64>() / n as f64).collect();
    for i in 0..4 {
        for j in 0..4 {
            let c = draws
                .iter()
                .map(|d| (d.values()[i] - mean[i]) * (d.values()[j] - mean[j]))
                .sum::<f64>()
                / (n as f64 - 1.0);
            let se = ((cov[i][i] * cov[j][j] + cov[i][j].powi(2)) / n as f64).sqrt();
            assert!((c - cov[i][j]).abs() < 5.0 * se, "entry ({i},{j}): {c} vs {}", cov[i][j]);
        }
    }
}

#[test]
fn posterior_mean_converges_to_swa_mean() {
    let (m, _) = random_moments(12, 5, 8, 6);
    let cov = target_covariance(&m);
    let n = 10_000;
    let draws = m.sample_posterior(n, 17).unwrap();
    for (j, row) in cov.iter().enumerate() {
        let avg = draws.iter().map(|d| d.values()[j]).sum::<f64>() / n as f64;
        let se = (row[j] / n as f64).sqrt();
        assert!((avg - m.mean()[j]).abs() < 4.0 * se);
    }
}

#[test]
fn draws_are_deterministic_per_seed_and_count() {
    let (m, _) = random_moments(1, 3, 6, 3);
    assert_eq!(m.sample_posterior(500, 2).unwrap().len(), 500);
    assert_eq!(m.sample_posterior(20, 2).unwrap(), m.sample_posterior(20, 2).unwrap());
    assert_eq!(m.sample_posterior(5, 2).unwrap()[..], m.sample_posterior(20, 2).unwrap()[..5]);
}
