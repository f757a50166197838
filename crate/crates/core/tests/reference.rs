//! Production routines against the brute-force reference implementations.

use aod_core::diagnostics::{autocorrelation, compute_rhat, nearest_rank};
use aod_core::forward::ForwardModel;
use aod_core::lattice::{build_adjacency, BlockGrid};
use aod_core::model::edge_sum_of_squares;
use aod_core::validation::{compare_fields, Field};
use aod_core::{Surrogate, SurrogateParams};
use aod_oracles::{
    brute_force_rhat, counting_percentile, naive_acf, naive_edge_sum, naive_rms_and_correlation, surrogate_radiance,
    SplitMix64,
};
use proptest::prelude::*;

fn series(seed: u64, n: usize) -> Vec<f64> {
    let mut g = SplitMix64(seed);
    let mut x = 0.0;
    (0..n)
        .map(|_| {
            x = 0.6 * x + g.uniform() - 0.5;
            x
        })
        .collect()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn rhat_matches_pairwise_formula() {
    for seed in 0..20 {
        let chains: Vec<Vec<f64>> = (0..4).map(|k| series(seed * 10 + k, 30 + seed as usize)).collect();
        let views: Vec<&[f64]> = chains.iter().map(|c| c.as_slice()).collect();
        let fast = compute_rhat(&views).unwrap();
        let slow = brute_force_rhat(&chains);
        assert!(close(fast, slow, 1e-10), "{fast} vs {slow}");
    }
}

#[test]
fn autocorrelation_matches_direct_sums() {
    let xs = series(3, 200);
    let acf = autocorrelation(&xs, 25).unwrap();
    for (lag, v) in acf.iter().enumerate() {
        assert!((v.unwrap() - naive_acf(&xs, lag)).abs() <= 1e-12);
    }
}

#[test]
fn percentiles_match_counting_definition() {
    for n in [1usize, 2, 7, 20, 101] {
        let xs = series(n as u64, n);
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        for q in [1.0, 5.0, 25.0, 50.0, 75.0, 95.0, 99.0, 100.0] {
            assert_eq!(nearest_rank(&sorted, q), counting_percentile(&xs, q), "n {n} q {q}");
        }
    }
}

#[test]
fn field_comparison_matches_direct_formula() {
    let mut g = SplitMix64(17);
    let n = 12 * 9;
    let a: Vec<Option<f64>> = (0..n).map(|_| (g.uniform() > 0.2).then(|| g.uniform())).collect();
    let b: Vec<Option<f64>> = (0..n).map(|_| (g.uniform() > 0.2).then(|| g.uniform())).collect();
    let report = compare_fields(&Field::new(12, 9, a.clone()).unwrap(), &Field::new(12, 9, b.clone()).unwrap()).unwrap();
    let pairs: Vec<(f64, f64)> = a.iter().zip(&b).filter_map(|(x, y)| Some(((*x)?, (*y)?))).collect();
    let (rms, r) = naive_rms_and_correlation(&pairs);
    assert_eq!(report.pairs, pairs);
    assert!(close(report.rms, rms, 1e-12));
    assert!((report.correlation.unwrap() - r).abs() <= 1e-10);
}

#[test]
fn surrogate_matches_reference_formula() {
    let params = SurrogateParams::misr_like(36, 4).unwrap();
    let fm = Surrogate::new(params.clone()).unwrap();
    let mut g = SplitMix64(5);
    for _ in 0..50 {
        let tau = 3.0 * g.uniform();
        let raw: Vec<f64> = (0..4).map(|_| g.uniform() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        let theta: Vec<f64> = raw.iter().map(|v| v / s).collect();
        let out = fm.eval(tau, &theta).unwrap();
        for (c, &v) in out.iter().enumerate() {
            let e = &params.extinction[c * 4..(c + 1) * 4];
            let p = &params.path[c * 4..(c + 1) * 4];
            let want = surrogate_radiance(params.surface[c], e, p, tau, &theta);
            assert!(close(v, want, 1e-13), "channel {c}: {v} vs {want}");
        }
    }
}

proptest! {
    #[test]
    fn edge_sum_matches_full_grid_scan(
        rows in 1usize..8,
        cols in 1usize..8,
        seed in any::<u64>(),
    ) {
        let mut g = SplitMix64(seed);
        let clear: Vec<bool> = (0..rows * cols).map(|_| g.uniform() > 0.3).collect();
        let values: Vec<f64> = (0..rows * cols).map(|_| g.uniform()).collect();
        let grid = BlockGrid::new(rows, cols, 1.1, clear.clone()).unwrap();
        let adj = build_adjacency(&grid);
        let tau: Vec<f64> = (0..adj.n_pixels()).map(|p| values[adj.cell(p)]).collect();
        let fast = edge_sum_of_squares(&tau, &adj);
        let slow = naive_edge_sum(rows, cols, &clear, &values);
        prop_assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
        let degree_total: usize = (0..adj.n_pixels()).map(|p| adj.degree(p)).sum();
        prop_assert_eq!(degree_total % 2, 0);
    }
}
