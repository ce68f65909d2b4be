//! Statistical and structural checks of the Brownian grid sampler: marginal
//! normality (Kolmogorov-Smirnov), bridge-refinement conditional moments,
//! stream disjointness, and the prefix property that gives difference
//! studies common noise across horizons.

use flowlab::paths::BrownianGrid;
use statrs::distribution::{ContinuousCDF, Normal};

/// One-sample KS statistic against the standard normal.
fn ks_statistic(sorted: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal.cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

#[test]
fn standardized_increments_pass_kolmogorov_smirnov() {
    // 100k increments across 100 independent streams; alpha = 0.01 critical
    // value for the one-sample KS test is 1.63 / sqrt(n). Seeded, so this is
    // a regression test, not a flaky gate.
    let mut draws = Vec::with_capacity(100_000);
    for stream in 0..100u64 {
        let grid = BrownianGrid::sample(2024, stream, 0.0, 1.0, 1000, 1).unwrap();
        let scale = 1.0 / grid.h.sqrt();
        for k in 0..grid.steps {
            draws.push(grid.increment(k)[0] * scale);
        }
    }
    draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let d = ks_statistic(&draws);
    let critical = 1.63 / (draws.len() as f64).sqrt();
    assert!(d < critical, "KS statistic {d} exceeds the one percent critical value {critical}");
}

#[test]
fn refinement_preserves_coarse_increments_exactly() {
    let coarse = BrownianGrid::sample(7, 3, 0.5, 2.5, 20, 2) .unwrap();
    let fine = coarse.refine(8);
    assert_eq!(fine.steps, 160);
    assert!((fine.h - coarse.h / 8.0).abs() < 1e-15);
    for k in 0..coarse.steps {
        for c in 0..2 {
            let sum: f64 = (0..8).map(|j| fine.increment(8 * k + j)[c]).sum();
            assert!(
                (sum - coarse.increment(k)[c]).abs() < 1e-12,
                "block {k} component {c} not preserved"
            );
        }
    }
}

#[test]
fn bridge_halves_have_the_conditional_moments() {
    // Conditional on the parent increment over h, each half-increment is
    // N(parent/2, h/4). Check mean and variance of (first half - parent/2)
    // over many blocks: mean 0, variance h/4, within 4 standard errors.
    let n_blocks = 50_000usize;
    let coarse = BrownianGrid::sample(11, 0, 0.0, n_blocks as f64 * 0.1, n_blocks, 1).unwrap();
    let fine = coarse.refine(2);
    let h = coarse.h;
    let mut devs = Vec::with_capacity(n_blocks);
    for k in 0..n_blocks {
        devs.push(fine.increment(2 * k)[0] - coarse.increment(k)[0] / 2.0);
    }
    let mean = devs.iter().sum::<f64>() / n_blocks as f64;
    let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n_blocks - 1) as f64;
    let target_var = h / 4.0;
    let se_mean = (target_var / n_blocks as f64).sqrt();
    let se_var = target_var * (2.0 / n_blocks as f64).sqrt();
    assert!(mean.abs() < 4.0 * se_mean, "bridge mean {mean} vs se {se_mean}");
    assert!((var - target_var).abs() < 4.0 * se_var, "bridge var {var} vs {target_var}");
}

#[test]
fn grids_are_deterministic_and_streams_are_disjoint() {
    let a = BrownianGrid::sample(5, 0, 0.0, 1.0, 64, 1).unwrap();
    let b = BrownianGrid::sample(5, 0, 0.0, 1.0, 64, 1).unwrap();
    let c = BrownianGrid::sample(5, 1, 0.0, 1.0, 64, 1).unwrap();
    let d = BrownianGrid::sample(6, 0, 0.0, 1.0, 64, 1).unwrap();
    for k in 0..64 {
        assert_eq!(a.increment(k)[0].to_bits(), b.increment(k)[0].to_bits());
    }
    // Different stream or seed: correlation of 64 draws cannot be 1.
    assert!((0..64).any(|k| a.increment(k)[0] != c.increment(k)[0]));
    assert!((0..64).any(|k| a.increment(k)[0] != d.increment(k)[0]));
}

#[test]
fn a_shorter_horizon_is_an_exact_prefix() {
    // Same seed, stream, and step: the grid on [0, 1] is the first half of
    // the grid on [0, 2]. Difference experiments rely on this to compare
    // horizons under common noise.
    let short = BrownianGrid::sample(9, 4, 0.0, 1.0, 128, 2).unwrap();
    let long = BrownianGrid::sample(9, 4, 0.0, 2.0, 256, 2).unwrap();
    for k in 0..128 {
        for c in 0..2 {
            assert_eq!(short.increment(k)[c].to_bits(), long.increment(k)[c].to_bits());
        }
    }
}

#[test]
fn cumulative_path_starts_at_zero_and_sums_increments() {
    let grid = BrownianGrid::sample(3, 2, 0.0, 1.0, 32, 2).unwrap();
    for c in 0..2 {
        let w = grid.cumulative(c);
        assert_eq!(w.len(), 33);
        assert_eq!(w[0], 0.0);
        let total: f64 = (0..32).map(|k| grid.increment(k)[c]).sum();
        assert!((w[32] - total).abs() < 1e-12);
    }
}

#[test]
fn node_times_are_affine_in_the_index() {
    let grid = BrownianGrid::sample(1, 0, 0.25, 1.25, 16, 1).unwrap();
    assert!((grid.node_time(0) - 0.25).abs() < 1e-15);
    assert!((grid.node_time(16) - 1.25).abs() < 1e-12);
    assert!((grid.node_time(8) - 0.75).abs() < 1e-12);
}
