//! Cross-checks against independent implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sentinel_core::gate::{paired_t_test, student_t_sf, Alternative};
use sentinel_core::replay::{compose_batch_with, MixConfig};
use sentinel_core::vqa::{latency_report, ComponentTimings};
use statrs::distribution::{ContinuousCDF, StudentsT};

#[test]
fn t_tail_matches_statrs_on_a_grid() {
    for df in [1.0, 2.0, 3.0, 4.5, 9.0, 30.0, 120.0, 1000.0] {
        let dist = StudentsT::new(0.0, 1.0, df).unwrap();
        for i in -40..=40 {
            let t = i as f64 * 0.25;
            let ours = student_t_sf(t, df);
            let theirs = 1.0 - dist.cdf(t);
            assert!((ours - theirs).abs() < 1e-9, "t={t} df={df}: {ours} vs {theirs}");
        }
    }
}

#[test]
fn paired_test_matches_statrs_on_random_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let n = rng.random_range(2..60);
        let deltas: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.2)).collect();
        let r = paired_t_test(&deltas, Alternative::Greater).unwrap();
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let sd = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        let t = mean / (sd / (n as f64).sqrt());
        let p = 1.0 - StudentsT::new(0.0, 1.0, n as f64 - 1.0).unwrap().cdf(t);
        assert!((r.t_statistic.unwrap() - t).abs() < 1e-9);
        assert!((r.p_value - p).abs() < 1e-9);
    }
}

/// Pearson chi-square over how often each pool index is drawn; the statistic
/// must sit within 3 sigma of its mean (df, variance 2 df).
fn chi_square_ok(counts: &[u64]) -> (f64, f64, bool) {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let df = (counts.len() - 1) as f64;
    (chi2, df, (chi2 - df).abs() <= 3.0 * (2.0 * df).sqrt())
}

#[test]
fn batch_sampling_is_uniform_within_each_pool() {
    let mix = MixConfig::default();
    let (n_corr, n_replay) = (50, 400);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut c_counts = vec![0u64; n_corr];
    let mut r_counts = vec![0u64; n_replay];
    for _ in 0..10_000 {
        let b = compose_batch_with(n_replay, n_corr, &mix, &mut rng).unwrap();
        assert_eq!((b.corrections.len(), b.replay.len()), (10, 22));
        for i in b.corrections {
            c_counts[i] += 1;
        }
        for i in b.replay {
            r_counts[i] += 1;
        }
    }
    for counts in [&c_counts, &r_counts] {
        let (chi2, df, ok) = chi_square_ok(counts);
        assert!(ok, "chi2 {chi2} df {df}");
    }
}

#[test]
fn nearest_rank_matches_sort_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [1usize, 2, 7, 10, 99, 100, 101, 1000] {
        let samples: Vec<ComponentTimings> = (0..n)
            .map(|_| ComponentTimings { generate: rng.random_range(50.0..400.0), ..Default::default() })
            .collect();
        let r = latency_report(&samples).unwrap();
        let mut sorted: Vec<f64> = samples.iter().map(|s| s.total()).collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Smallest value with at least pct% of samples at or below it.
        let oracle = |pct: f64| {
            *sorted.iter().find(|&&v| sorted.iter().filter(|&&w| w <= v).count() as f64 >= pct / 100.0 * n as f64).unwrap()
        };
        let p = r.percentiles;
        assert_eq!([p.p50, p.p90, p.p95, p.p99], [oracle(50.0), oracle(90.0), oracle(95.0), oracle(99.0)]);
        assert!(p.p50 <= p.p90 && p.p90 <= p.p95 && p.p95 <= p.p99);
    }
}
