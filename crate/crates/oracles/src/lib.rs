//! Brute-force reference computations for tests.
//!
//! Nothing here depends on the production crate. Every routine favors the
//! most direct formulation over speed.

use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("quadrature grid of {0} points exceeds the limit of {MAX_GRID_POINTS}")]
    GridTooLarge(u128),
    #[error("invalid oracle input: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Largest joint grid `posterior_by_quadrature` will enumerate.
pub const MAX_GRID_POINTS: u128 = 10_000_000;

/// Midpoint nodes of `n` equal cells on `[lo, hi]`.
pub fn midpoints(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// How the two-component mixing fraction is handled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThetaHandling {
    /// `theta_1` fixed at the given value.
    Fixed(f64),
    /// `theta_1` integrated on `nodes` midpoints of (0, 1) under a
    /// `Beta(alpha_1, alpha_2)` prior.
    Integrated { nodes: usize, alpha: (f64, f64) },
}

/// Tiny-block quadrature problem.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureSpec {
    /// `(lo, hi, nodes)` of the midpoint grid for each pixel's `tau`.
    pub tau_grids: Vec<(f64, f64, usize)>,
    pub theta: ThetaHandling,
    /// Unordered neighbor pairs.
    pub edges: Vec<(usize, usize)>,
    pub kappa: f64,
}

/// Posterior mean and standard deviation of one pixel's `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

fn ln_beta_density(x: f64, a: f64, b: f64) -> f64 {
    use statrs::function::beta::ln_beta;
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - ln_beta(a, b)
}

/// Posterior moments of each `tau_p` on a tiny block by enumerating the
/// joint `tau` grid.
///
/// The unnormalized posterior is
/// `exp(sum_p log_lik(p, tau_p, theta_p1)) * Beta(theta_p1) *
/// exp(-kappa/2 sum_edges (tau_p - tau_q)^2)`, with `theta` integrated out
/// per pixel first.
pub fn posterior_by_quadrature(
    spec: &QuadratureSpec,
    log_lik: &dyn Fn(usize, f64, f64) -> f64,
) -> Result<Vec<Moments>> {
    let n = spec.tau_grids.len();
    if n == 0 || n > 4 {
        return Err(OracleError::Invalid(format!("quadrature supports 1 to 4 pixels, got {n}")));
    }
    let total: u128 = spec.tau_grids.iter().map(|g| g.2 as u128).product();
    if total > MAX_GRID_POINTS {
        return Err(OracleError::GridTooLarge(total));
    }
    if spec.edges.iter().any(|&(p, q)| p >= n || q >= n || p == q) {
        return Err(OracleError::Invalid("edge references a missing pixel".into()));
    }
    let grids: Vec<Vec<f64>> = spec.tau_grids.iter().map(|&(lo, hi, k)| midpoints(lo, hi, k)).collect();

    // Per-pixel log marginal likelihood on its tau grid.
    let mut marg: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (p, grid) in grids.iter().enumerate() {
        let values = grid
            .iter()
            .map(|&t| match spec.theta {
                ThetaHandling::Fixed(th) => log_lik(p, t, th),
                ThetaHandling::Integrated { nodes, alpha } => {
                    let h = 1.0 / nodes as f64;
                    let terms: Vec<f64> = midpoints(0.0, 1.0, nodes)
                        .into_iter()
                        .map(|th| log_lik(p, t, th) + ln_beta_density(th, alpha.0, alpha.1) + h.ln())
                        .collect();
                    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    max + terms.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
                }
            })
            .collect();
        marg.push(values);
    }

    let log_weight = |idx: &[usize]| -> f64 {
        let mut lw = 0.0;
        for p in 0..n {
            lw += marg[p][idx[p]];
        }
        for &(p, q) in &spec.edges {
            let d = grids[p][idx[p]] - grids[q][idx[q]];
            lw -= 0.5 * spec.kappa * d * d;
        }
        lw
    };
    let advance = |idx: &mut Vec<usize>| -> bool {
        for p in 0..n {
            idx[p] += 1;
            if idx[p] < grids[p].len() {
                return true;
            }
            idx[p] = 0;
        }
        false
    };

    let mut idx = vec![0usize; n];
    let mut max = f64::NEG_INFINITY;
    loop {
        max = max.max(log_weight(&idx));
        if !advance(&mut idx) {
            break;
        }
    }
    let mut z = 0.0;
    let mut s1 = vec![0.0; n];
    let mut s2 = vec![0.0; n];
    idx.fill(0);
    loop {
        let w = (log_weight(&idx) - max).exp();
        z += w;
        for p in 0..n {
            let t = grids[p][idx[p]];
            s1[p] += w * t;
            s2[p] += w * t * t;
        }
        if !advance(&mut idx) {
            break;
        }
    }
    Ok((0..n)
        .map(|p| {
            let mean = s1[p] / z;
            let var = (s2[p] / z - mean * mean).max(0.0);
            Moments { mean, sd: var.sqrt() }
        })
        .collect())
}

/// Result of a chi-square goodness-of-fit test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GofResult {
    pub statistic: f64,
    pub bins: usize,
    pub p_value: f64,
}

/// Chi-square goodness-of-fit of `samples` against an (unnormalized) log
/// density on `[lo, hi]`.
///
/// Bin edges are equal-probability quantiles of the density, found by
/// trapezoid integration on a fine grid, so they do not depend on the data. Adjacent bins are
/// merged until each expects at least 5 samples. Samples outside the range
/// fall into the end bins.
pub fn gof_test(samples: &[f64], log_density: &dyn Fn(f64) -> f64, range: (f64, f64), bins: usize) -> Result<GofResult> {
    let (lo, hi) = range;
    if samples.len() < 1000 {
        return Err(OracleError::Invalid(format!("need at least 1000 samples, got {}", samples.len())));
    }
    if !(lo < hi) || bins < 2 {
        return Err(OracleError::Invalid("need lo < hi and at least two bins".into()));
    }
    // Cumulative mass on a fine grid.
    let panels = 200_000;
    let h = (hi - lo) / panels as f64;
    let xs: Vec<f64> = (0..=panels).map(|i| lo + i as f64 * h).collect();
    let logs: Vec<f64> = xs.iter().map(|&x| log_density(x)).collect();
    let max = logs.iter().cloned().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(OracleError::Invalid("density vanishes on the range".into()));
    }
    let f: Vec<f64> = logs.iter().map(|v| if v.is_finite() { (v - max).exp() } else { 0.0 }).collect();
    let mut cdf = vec![0.0; panels + 1];
    for i in 0..panels {
        cdf[i + 1] = cdf[i] + 0.5 * h * (f[i] + f[i + 1]);
    }
    let total = cdf[panels];
    for v in cdf.iter_mut() {
        *v /= total;
    }
    let mut edges = Vec::with_capacity(bins - 1);
    for k in 1..bins {
        let target = k as f64 / bins as f64;
        let i = cdf.partition_point(|&c| c < target).clamp(1, panels);
        let (c0, c1) = (cdf[i - 1], cdf[i]);
        let frac = if c1 > c0 { (target - c0) / (c1 - c0) } else { 0.0 };
        edges.push(xs[i - 1] + frac * h);
    }
    let n = samples.len() as f64;
    let mut expected = vec![n / bins as f64; bins];
    let mut observed = vec![0.0; bins];
    for &x in samples {
        observed[edges.partition_point(|&e| e <= x)] += 1.0;
    }
    // Merge forward until each merged bin expects at least 5.
    let mut merged_e = Vec::new();
    let mut merged_o = Vec::new();
    let (mut acc_e, mut acc_o) = (0.0, 0.0);
    for (e, o) in expected.drain(..).zip(observed) {
        acc_e += e;
        acc_o += o;
        if acc_e >= 5.0 {
            merged_e.push(acc_e);
            merged_o.push(acc_o);
            acc_e = 0.0;
            acc_o = 0.0;
        }
    }
    if acc_e > 0.0 {
        match merged_e.last_mut() {
            Some(last) => {
                *last += acc_e;
                *merged_o.last_mut().unwrap() += acc_o;
            }
            None => {
                merged_e.push(acc_e);
                merged_o.push(acc_o);
            }
        }
    }
    let k = merged_e.len();
    if k < 2 {
        return Err(OracleError::Invalid("fewer than two bins after merging".into()));
    }
    let statistic: f64 = merged_e.iter().zip(&merged_o).map(|(e, o)| (o - e) * (o - e) / e).sum();
    let dist = ChiSquared::new((k - 1) as f64).map_err(|e| OracleError::Invalid(e.to_string()))?;
    Ok(GofResult {
        statistic,
        bins: k,
        p_value: dist.sf(statistic),
    })
}

/// Mean and `n - 1` variance by two passes.
pub fn two_pass_moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Unbiased variance from all pairwise differences,
/// `sum_{i<j} (x_i - x_j)^2 / (n (n - 1))`.
pub fn pairwise_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            s += (xs[i] - xs[j]).powi(2);
        }
    }
    s / (n * (n - 1)) as f64
}

/// Potential scale reduction with variances from pairwise differences.
pub fn brute_force_rhat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len() as f64;
    let w = chains.iter().map(|c| pairwise_variance(c)).sum::<f64>() / m as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let b_over_n = pairwise_variance(&means);
    (((n - 1.0) / n * w + b_over_n) / w).sqrt()
}

/// Biased autocorrelation at one lag, by direct summation.
pub fn naive_acf(xs: &[f64], lag: usize) -> f64 {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let mut num = 0.0;
    for i in 0..n - lag {
        num += (xs[i] - mean) * (xs[i + lag] - mean);
    }
    let mut den = 0.0;
    for x in xs {
        den += (x - mean) * (x - mean);
    }
    num / den
}

/// Nearest-rank percentile by counting: the smallest sample value `v` with
/// at least `q/100 N` samples `<= v`.
pub fn counting_percentile(xs: &[f64], q: f64) -> f64 {
    let need = (q / 100.0 * xs.len() as f64).max(1.0);
    let mut best = f64::INFINITY;
    for &v in xs {
        let at_or_below = xs.iter().filter(|&&y| y <= v).count() as f64;
        if at_or_below >= need && v < best {
            best = v;
        }
    }
    best
}

/// RMS difference and Pearson correlation of paired values.
pub fn naive_rms_and_correlation(pairs: &[(f64, f64)]) -> (f64, f64) {
    let n = pairs.len() as f64;
    let rms = (pairs.iter().map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n).sqrt();
    let (sa, sb, saa, sbb, sab) = pairs.iter().fold((0.0, 0.0, 0.0, 0.0, 0.0), |acc, &(a, b)| {
        (acc.0 + a, acc.1 + b, acc.2 + a * a, acc.3 + b * b, acc.4 + a * b)
    });
    let cov = sab / n - sa / n * sb / n;
    let va = saa / n - (sa / n).powi(2);
    let vb = sbb / n - (sb / n).powi(2);
    (rms, cov / (va * vb).sqrt())
}

/// Sum over the rook-adjacent pairs of clear cells of `(x_p - x_q)^2`,
/// computed from a row-major full grid with a mask.
pub fn naive_edge_sum(rows: usize, cols: usize, clear: &[bool], values: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if !clear[i] {
                continue;
            }
            if c + 1 < cols && clear[i + 1] {
                s += (values[i] - values[i + 1]).powi(2);
            }
            if r + 1 < rows && clear[i + cols] {
                s += (values[i] - values[i + cols]).powi(2);
            }
        }
    }
    s
}

/// Exponential-saturation radiance of one channel,
/// `S e^{-tau k} + A (1 - e^{-tau k})` with `k = sum theta_m E_m` and
/// `A = sum theta_m P_m`.
pub fn surrogate_radiance(surface: f64, extinction: &[f64], path: &[f64], tau: f64, theta: &[f64]) -> f64 {
    let k: f64 = theta.iter().zip(extinction).map(|(t, e)| t * e).sum();
    let a: f64 = theta.iter().zip(path).map(|(t, p)| t * p).sum();
    let e = (-tau * k).exp();
    surface * e + a * (1.0 - e)
}

/// Minimal deterministic generator for oracle self-tests.
#[derive(Debug, Clone)]
pub struct SplitMix64(pub u64);

impl SplitMix64 {
    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform on (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{Continuous, Gamma, Normal};

    fn gamma_samples(shape: f64, rate: f64, n: usize, seed: u64) -> Vec<f64> {
        let g = Gamma::new(shape, rate).unwrap();
        let mut rng = SplitMix64(seed);
        (0..n).map(|_| g.inverse_cdf(rng.uniform())).collect()
    }

    #[test]
    fn gof_is_calibrated() {
        let (shape, rate) = (7.5, 0.3);
        let log_pdf = move |x: f64| if x > 0.0 { (shape - 1.0) * x.ln() - rate * x } else { f64::NEG_INFINITY };
        let mut rejections = 0;
        for rep in 0..200 {
            let s = gamma_samples(shape, rate, 2000, 1000 + rep);
            if gof_test(&s, &log_pdf, (0.0, 150.0), 40).unwrap().p_value < 0.01 {
                rejections += 1;
            }
        }
        // Binomial(200, 0.01): P(X > 7) is about 1e-3.
        assert!(rejections <= 7, "{rejections} rejections");
    }

    #[test]
    fn gof_has_power_against_a_shift() {
        let log_pdf = |x: f64| -0.5 * x * x;
        let normal = Normal::new(0.15, 1.0).unwrap();
        let mut rng = SplitMix64(5);
        let s: Vec<f64> = (0..5000).map(|_| normal.inverse_cdf(rng.uniform())).collect();
        assert!(gof_test(&s, &log_pdf, (-10.0, 10.0), 30).unwrap().p_value < 0.01);
        let constant = vec![0.3; 2000];
        assert!(gof_test(&constant, &log_pdf, (-10.0, 10.0), 30).unwrap().p_value < 1e-12);
        assert!(gof_test(&constant[..10], &log_pdf, (-10.0, 10.0), 30).is_err());
    }

    #[test]
    fn quadrature_flat_likelihood_recovers_prior() {
        // No edges, flat likelihood: uniform on [0, 3].
        let spec = QuadratureSpec {
            tau_grids: vec![(0.0, 3.0, 3000)],
            theta: ThetaHandling::Fixed(0.5),
            edges: vec![],
            kappa: 1.0,
        };
        let m = posterior_by_quadrature(&spec, &|_, _, _| 0.0).unwrap();
        assert!((m[0].mean - 1.5).abs() < 1e-9);
        assert!((m[0].sd - 3.0 / 12f64.sqrt()).abs() < 1e-6);

        // Two pixels joined by an edge, flat likelihood: symmetric around 1.5,
        // and the difference has prior variance 1/kappa when far from the walls.
        let spec = QuadratureSpec {
            tau_grids: vec![(0.0, 3.0, 600), (0.0, 3.0, 600)],
            theta: ThetaHandling::Integrated { nodes: 20, alpha: (2.0, 2.0) },
            edges: vec![(0, 1)],
            kappa: 50.0,
        };
        let m = posterior_by_quadrature(&spec, &|_, _, _| 0.0).unwrap();
        assert!((m[0].mean - 1.5).abs() < 1e-9 && (m[1].mean - 1.5).abs() < 1e-9);
    }

    #[test]
    fn quadrature_inverts_a_tight_single_pixel() {
        let (s, e, p) = (0.02, 1.0, 0.10);
        let truth = 0.8;
        let obs = surrogate_radiance(s, &[e], &[p], truth, &[1.0]);
        let sigma = 1e-5;
        let spec = QuadratureSpec {
            tau_grids: vec![(0.7, 0.9, 20_000)],
            theta: ThetaHandling::Fixed(1.0),
            edges: vec![],
            kappa: 1.0,
        };
        let ll = |_: usize, t: f64, _: f64| {
            let r = obs - surrogate_radiance(s, &[e], &[p], t, &[1.0]);
            -r * r / (2.0 * sigma * sigma)
        };
        let m = posterior_by_quadrature(&spec, &ll).unwrap();
        // Analytic inverse: tau = -ln((A - L)/(A - S)) / k.
        let inverse = -((p - obs) / (p - s)).ln() / e;
        assert!((m[0].mean - inverse).abs() < 1e-5);
    }

    #[test]
    fn quadrature_rejects_large_grids() {
        let spec = QuadratureSpec {
            tau_grids: vec![(0.0, 1.0, 100); 4],
            theta: ThetaHandling::Fixed(0.5),
            edges: vec![],
            kappa: 1.0,
        };
        assert_eq!(posterior_by_quadrature(&spec, &|_, _, _| 0.0), Err(OracleError::GridTooLarge(100_000_000)));
    }

    #[test]
    fn naive_helpers() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let (_, v) = two_pass_moments(&xs);
        assert!((v - pairwise_variance(&xs)).abs() < 1e-12);
        let r = brute_force_rhat(&[vec![0.0, 1.0, 0.0, 1.0], vec![10.0, 11.0, 10.0, 11.0]]);
        assert!((r - 150.75f64.sqrt()).abs() < 1e-12);
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(counting_percentile(&v, 5.0), 5.0);
        assert_eq!(counting_percentile(&v, 50.0), 50.0);
        assert_eq!(naive_edge_sum(1, 2, &[true, true], &[0.0, 1.0]), 1.0);
        let g = Gamma::new(2.0, 1.0).unwrap();
        assert!(g.pdf(1.0) > 0.0);
    }
}
