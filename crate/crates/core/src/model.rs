//! State types and log-densities of the hierarchical model.
//!
//! All densities are evaluated over the clear pixels of a block, indexed as
//! in [`crate::lattice::Adjacency`]. Mixing fields are stored flat,
//! pixel-major (`theta[p * M + m]`).

use std::f64::consts::PI;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::forward::{check_simplex, ForwardModel, TauSupport};
use crate::lattice::{Adjacency, BlockGrid};

/// Tolerance on the simplex constraint of a sampled state.
pub const STATE_SIMPLEX_TOLERANCE: f64 = 1e-10;

/// AOD and mixing vector of every clear pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct AerosolState {
    pub tau: Vec<f64>,
    pub theta: Vec<f64>,
    components: usize,
}

impl AerosolState {
    pub fn new(tau: Vec<f64>, theta: Vec<f64>, components: usize) -> Result<Self> {
        if components == 0 || theta.len() != tau.len() * components {
            return Err(Error::config(format!(
                "mixing field has {} values for {} pixels and {components} components",
                theta.len(),
                tau.len()
            )));
        }
        Ok(Self { tau, theta, components })
    }

    /// Every pixel at `tau` with the uniform mixing vector.
    pub fn uniform(n_pixels: usize, components: usize, tau: f64) -> Self {
        Self {
            tau: vec![tau; n_pixels],
            theta: vec![1.0 / components as f64; n_pixels * components],
            components,
        }
    }

    pub fn n_pixels(&self) -> usize {
        self.tau.len()
    }

    pub fn components(&self) -> usize {
        self.components
    }

    #[inline]
    pub fn theta(&self, p: usize) -> &[f64] {
        &self.theta[p * self.components..(p + 1) * self.components]
    }

    #[inline]
    pub fn theta_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.theta[p * self.components..(p + 1) * self.components]
    }

    /// Checks support bounds and simplex constraints of every pixel.
    pub fn validate(&self, support: TauSupport) -> Result<()> {
        for (p, &t) in self.tau.iter().enumerate() {
            if !support.contains(t) {
                return Err(Error::domain(format!("pixel {p}: tau {t} outside support")));
            }
            check_simplex(self.theta(p), self.components, STATE_SIMPLEX_TOLERANCE)
                .map_err(|e| Error::domain(format!("pixel {p}: {e}")))?;
        }
        Ok(())
    }
}

/// Hyperparameters: GMRF precision, Dirichlet parameter, channel noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub kappa: f64,
    pub alpha: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl HyperState {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.kappa) {
            return Err(Error::domain(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.alpha.is_empty() || !self.alpha.iter().all(|&a| ok(a)) {
            return Err(Error::domain("alpha must be nonempty and positive"));
        }
        if self.sigma2.is_empty() || !self.sigma2.iter().all(|&s| ok(s)) {
            return Err(Error::domain("sigma2 must be nonempty and positive"));
        }
        Ok(())
    }
}

/// Observed radiances of the clear pixels of a block, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceBlock {
    grid: BlockGrid,
    channels: usize,
    radiances: Vec<f64>,
}

impl RadianceBlock {
    pub fn new(grid: BlockGrid, channels: usize, radiances: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::config("a block needs at least one channel"));
        }
        let n = grid.n_clear();
        if radiances.len() != n * channels {
            return Err(Error::config(format!(
                "block has {} radiances, expected {} clear pixels x {channels} channels",
                radiances.len(),
                n
            )));
        }
        if let Some(v) = radiances.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::domain(format!("radiances must be finite and positive, found {v}")));
        }
        Ok(Self {
            grid,
            channels,
            radiances,
        })
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_pixels(&self) -> usize {
        self.radiances.len() / self.channels
    }

    pub fn radiances(&self) -> &[f64] {
        &self.radiances
    }

    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.radiances[p * self.channels..(p + 1) * self.channels]
    }

    /// Mean radiance of each channel over the clear pixels.
    pub fn channel_means(&self) -> Vec<f64> {
        let n = self.n_pixels();
        let mut means = vec![0.0; self.channels];
        for p in 0..n {
            for (m, v) in means.iter_mut().zip(self.pixel(p)) {
                *m += v;
            }
        }
        for m in &mut means {
            *m /= n as f64;
        }
        means
    }
}

/// Operational noise level per channel: `sigma_c = 0.05 * min(0.04, mean_c)`.
/// Returns standard deviations.
pub fn sigma_init(block: &RadianceBlock) -> Result<Vec<f64>> {
    if block.n_pixels() == 0 {
        return Err(Error::Degenerate("block has no clear pixels".into()));
    }
    Ok(block.channel_means().into_iter().map(|m| 0.05 * m.min(0.04)).collect())
}

/// Weighted least-squares misfit of one pixel:
/// `sum_c (L_c - L_rt_c)^2 / (2 sigma2_c)`.
pub fn chi_square_pixel(
    observed: &[f64],
    tau: f64,
    theta: &[f64],
    sigma2: &[f64],
    fm: &dyn ForwardModel,
) -> Result<f64> {
    let fitted = fm.eval(tau, theta)?;
    Ok(chi_square_from_fit(observed, &fitted, sigma2))
}

#[inline]
pub(crate) fn chi_square_from_fit(observed: &[f64], fitted: &[f64], sigma2: &[f64]) -> f64 {
    let mut chi = 0.0;
    for c in 0..observed.len() {
        let r = observed[c] - fitted[c];
        chi += r * r / (2.0 * sigma2[c]);
    }
    chi
}

/// Which form of the Gaussian log-likelihood to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LikelihoodForm {
    /// `-sum_p chi2_p`; enough for Metropolis ratios in `tau` and `theta`.
    Kernel,
    /// Kernel plus `-(P/2) sum_c ln(2 pi sigma2_c)`; needed whenever
    /// `sigma2` varies (conditional of `sigma2`, joint log-posterior).
    Normalized,
}

/// Log-likelihood of a block at `state`.
pub fn log_likelihood(
    block: &RadianceBlock,
    state: &AerosolState,
    sigma2: &[f64],
    fm: &dyn ForwardModel,
    form: LikelihoodForm,
) -> Result<f64> {
    if state.n_pixels() != block.n_pixels() {
        return Err(Error::config("state and block have different pixel counts"));
    }
    let mut fitted = vec![0.0; block.channels()];
    let mut total = 0.0;
    for p in 0..block.n_pixels() {
        fm.eval_into(state.tau[p], state.theta(p), &mut fitted)?;
        total -= chi_square_from_fit(block.pixel(p), &fitted, sigma2);
    }
    if form == LikelihoodForm::Normalized {
        total += normalizing_term(block.n_pixels(), sigma2);
    }
    Ok(total)
}

/// `-(P/2) sum_c ln(2 pi sigma2_c)`.
pub fn normalizing_term(n_pixels: usize, sigma2: &[f64]) -> f64 {
    -0.5 * n_pixels as f64 * sigma2.iter().map(|s| (2.0 * PI * s).ln()).sum::<f64>()
}

/// Sum over unordered neighbor pairs of squared AOD differences.
pub fn edge_sum_of_squares(tau: &[f64], adj: &Adjacency) -> f64 {
    adj.edges().map(|(p, q)| (tau[p] - tau[q]).powi(2)).sum()
}

/// Intrinsic GMRF log-prior
/// `((P - 1)/2) ln kappa - (kappa/2) sum_{p~q} (tau_p - tau_q)^2`.
pub fn log_gmrf_prior(tau: &[f64], kappa: f64, adj: &Adjacency) -> f64 {
    gmrf_from_summary(edge_sum_of_squares(tau, adj), kappa, tau.len())
}

pub(crate) fn gmrf_from_summary(t_kappa: f64, kappa: f64, n_pixels: usize) -> f64 {
    0.5 * (n_pixels as f64 - 1.0) * kappa.ln() - 0.5 * kappa * t_kappa
}

/// Sum over pixels of the Dirichlet(alpha) log-density of each mixing vector.
///
/// A component exactly equal to zero gives `-inf` whenever its `alpha_m`
/// differs from one; this is a sentinel, not an error.
pub fn log_dirichlet_prior(theta: &[f64], alpha: &[f64]) -> f64 {
    let m = alpha.len();
    let n = theta.len() / m;
    let mut t_alpha = vec![0.0; m];
    for p in 0..n {
        for (j, &a) in alpha.iter().enumerate() {
            let x = theta[p * m + j];
            if a != 1.0 {
                if x <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                t_alpha[j] += x.ln();
            }
        }
    }
    dirichlet_from_summary(&t_alpha, alpha, n)
}

/// Dirichlet field log-density from `T_alpha[m] = sum_p ln theta_pm`.
pub(crate) fn dirichlet_from_summary(t_alpha: &[f64], alpha: &[f64], n_pixels: usize) -> f64 {
    let sum: f64 = alpha.iter().sum();
    let norm = ln_gamma(sum) - alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>();
    let mut value = n_pixels as f64 * norm;
    for (&a, &t) in alpha.iter().zip(t_alpha) {
        if a != 1.0 {
            value += (a - 1.0) * t;
        }
    }
    value
}

/// Conjugate hyperprior of the Dirichlet parameter, `sum_m (1 - alpha_m)`.
pub fn log_alpha_hyperprior(alpha: &[f64]) -> f64 {
    alpha.iter().map(|a| 1.0 - a).sum()
}

/// Conditional log-posterior of one channel variance under the `1/sigma2`
/// hyperprior: `-(P/2 + 1) ln sigma2 - ssr / (2 sigma2)`.
pub fn log_sigma2_conditional(sigma2: f64, ssr: f64, n_pixels: usize) -> f64 {
    -(0.5 * n_pixels as f64 + 1.0) * sigma2.ln() - ssr / (2.0 * sigma2)
}

/// Constants of the hyperpriors on `kappa` and `sigma2`.
///
/// `kappa ~ Gamma(kappa_shape, kappa_rate)` and
/// `sigma2_c ~ scaled-inv-chi2(nu0, s0_sq)`. All zeros (the default) give the
/// noninformative `1/kappa` and `1/sigma2` priors.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HyperpriorConstants {
    pub kappa_shape: f64,
    pub kappa_rate: f64,
    pub nu0: f64,
    pub s0_sq: f64,
}

impl HyperpriorConstants {
    pub fn log_kappa_prior(&self, kappa: f64) -> f64 {
        (self.kappa_shape - 1.0) * kappa.ln() - self.kappa_rate * kappa
    }

    pub fn log_sigma2_prior(&self, sigma2: f64) -> f64 {
        -(1.0 + 0.5 * self.nu0) * sigma2.ln() - 0.5 * self.nu0 * self.s0_sq / sigma2
    }
}

/// Unnormalized joint log-posterior of `(tau, theta, sigma2, kappa, alpha)`
/// given the radiances, with the normalized likelihood.
pub fn log_posterior(
    block: &RadianceBlock,
    state: &AerosolState,
    hyper: &HyperState,
    fm: &dyn ForwardModel,
    adj: &Adjacency,
    priors: &HyperpriorConstants,
) -> Result<f64> {
    let lik = log_likelihood(block, state, &hyper.sigma2, fm, LikelihoodForm::Normalized)?;
    Ok(lik
        + log_gmrf_prior(&state.tau, hyper.kappa, adj)
        + priors.log_kappa_prior(hyper.kappa)
        + log_dirichlet_prior(&state.theta, &hyper.alpha)
        + log_alpha_hyperprior(&hyper.alpha)
        + hyper.sigma2.iter().map(|&s| priors.log_sigma2_prior(s)).sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Surrogate, SurrogateParams};
    use crate::lattice::build_adjacency;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_with_means(means: &[f64]) -> RadianceBlock {
        let grid = BlockGrid::all_clear(1, 2, 4.4).unwrap();
        let mut r = Vec::new();
        for _ in 0..2 {
            r.extend_from_slice(means);
        }
        RadianceBlock::new(grid, means.len(), r).unwrap()
    }

    #[test]
    fn sigma_rule_branches() {
        let s = sigma_init(&block_with_means(&[0.06, 0.02, 0.04])).unwrap();
        assert!((s[0] - 0.002).abs() < 1e-15);
        assert!((s[1] - 0.001).abs() < 1e-15);
        assert!((s[2] - 0.002).abs() < 1e-15);
    }

    #[test]
    fn empty_block_has_no_sigma() {
        let grid = BlockGrid::new(1, 1, 4.4, vec![false]).unwrap();
        let block = RadianceBlock::new(grid, 3, vec![]).unwrap();
        assert!(sigma_init(&block).is_err());
    }

    #[test]
    fn chi_square_examples() {
        let fm = Surrogate::misr_like(1, 1).unwrap();
        let fit = fm.eval(1.0, &[1.0]).unwrap();
        assert_eq!(chi_square_pixel(&fit, 1.0, &[1.0], &[1e-6], &fm).unwrap(), 0.0);
        let obs = [fit[0] + 0.002];
        let chi = chi_square_pixel(&obs, 1.0, &[1.0], &[0.002f64.powi(2)], &fm).unwrap();
        assert!((chi - 0.5).abs() < 1e-9);
    }

    #[test]
    fn chi_square_matches_channel_loop() {
        let fm = Surrogate::misr_like(36, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let obs: Vec<f64> = (0..36).map(|_| rng.random_range(0.02..0.2)).collect();
        let sigma2: Vec<f64> = (0..36).map(|_| rng.random_range(1e-6..1e-4)).collect();
        let theta = [0.1, 0.2, 0.3, 0.4];
        let got = chi_square_pixel(&obs, 0.7, &theta, &sigma2, &fm).unwrap();
        let p = fm.params();
        let mut expect = 0.0;
        for c in 0..36 {
            let k: f64 = (0..4).map(|m| theta[m] * p.extinction[c * 4 + m]).sum();
            let a: f64 = (0..4).map(|m| theta[m] * p.path[c * 4 + m]).sum();
            let l = p.surface[c] * (-0.7 * k).exp() + a * (1.0 - (-0.7 * k).exp());
            expect += (obs[c] - l).powi(2) / (2.0 * sigma2[c]);
        }
        assert!(((got - expect) / expect).abs() < 1e-12);
    }

    #[test]
    fn likelihood_of_perfect_fit_and_additivity() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let grid = BlockGrid::all_clear(1, 2, 4.4).unwrap();
        let a = fm.eval(0.5, &[0.3, 0.7]).unwrap();
        let b = fm.eval(1.5, &[0.9, 0.1]).unwrap();
        let state = AerosolState::new(vec![0.5, 1.5], vec![0.3, 0.7, 0.9, 0.1], 2).unwrap();
        let sigma2 = vec![1e-4; 4];
        let block = RadianceBlock::new(grid.clone(), 4, [a.clone(), b.clone()].concat()).unwrap();
        assert_eq!(log_likelihood(&block, &state, &sigma2, &fm, LikelihoodForm::Kernel).unwrap(), 0.0);

        let shifted: Vec<f64> = [a, b].concat().iter().map(|v| v * 1.1).collect();
        let block = RadianceBlock::new(grid, 4, shifted.clone()).unwrap();
        let total = log_likelihood(&block, &state, &sigma2, &fm, LikelihoodForm::Kernel).unwrap();
        let c0 = chi_square_pixel(&shifted[..4], 0.5, &[0.3, 0.7], &sigma2, &fm).unwrap();
        let c1 = chi_square_pixel(&shifted[4..], 1.5, &[0.9, 0.1], &sigma2, &fm).unwrap();
        assert_eq!(total, -(c0 + c1));
        let norm = log_likelihood(&block, &state, &sigma2, &fm, LikelihoodForm::Normalized).unwrap();
        assert!((norm - total - normalizing_term(2, &sigma2)).abs() < 1e-12);
    }

    #[test]
    fn gmrf_examples() {
        let grid = BlockGrid::all_clear(1, 2, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let v = log_gmrf_prior(&[0.0, 1.0], 2.0, &adj);
        assert!((v - (0.5 * 2f64.ln() - 1.0)).abs() < 1e-15);

        let grid = BlockGrid::all_clear(3, 4, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let v = log_gmrf_prior(&[0.7; 12], 5.0, &adj);
        assert_eq!(v, 5.5 * 5f64.ln());
    }

    #[test]
    fn dirichlet_prior_examples() {
        let uniform = log_dirichlet_prior(&[0.1, 0.2, 0.3, 0.4], &[1.0; 4]);
        assert!((uniform - 6f64.ln()).abs() < 1e-12);
        let one = log_dirichlet_prior(&[0.4, 0.2, 0.2, 0.2], &[2.0, 1.0, 1.0, 1.0]);
        assert!((one - (24f64.ln() + 0.4f64.ln())).abs() < 1e-12);
        let theta: Vec<f64> = [0.4, 0.2, 0.2, 0.2].repeat(7);
        let seven = log_dirichlet_prior(&theta, &[2.0, 1.0, 1.0, 1.0]);
        assert!((seven - 7.0 * one).abs() < 1e-12);
        assert_eq!(log_dirichlet_prior(&[0.0, 1.0], &[0.5, 2.0]), f64::NEG_INFINITY);
        assert_eq!(log_dirichlet_prior(&[0.0, 1.0], &[2.0, 2.0]), f64::NEG_INFINITY);
    }

    #[test]
    fn dirichlet_two_component_density_integrates_to_one() {
        for alpha in [[1.0, 1.0], [2.0, 3.0]] {
            // Composite Simpson on [0, 1]; endpoints are finite for alpha >= 1.
            let n = 20_000;
            let h = 1.0 / n as f64;
            let f = |x: f64| {
                let v = log_dirichlet_prior(&[x, 1.0 - x], &alpha);
                if v.is_finite() { v.exp() } else { 0.0 }
            };
            let mut s = f(0.0) + f(1.0);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * f(i as f64 * h);
            }
            let integral = s * h / 3.0;
            assert!((integral - 1.0).abs() < 1e-6, "alpha {alpha:?}: {integral}");
        }
    }

    #[test]
    fn alpha_hyperprior_examples() {
        assert_eq!(log_alpha_hyperprior(&[1.0; 4]), 0.0);
        assert!((log_alpha_hyperprior(&[2.0, 4.0, 0.1, 0.1]) + 2.2).abs() < 1e-12);
        assert!(log_alpha_hyperprior(&[1.0, 2.0]) < log_alpha_hyperprior(&[1.0, 1.5]));
    }

    #[test]
    fn sigma2_conditional_examples() {
        assert!((log_sigma2_conditional(1.0, 2.0, 2) + 1.0).abs() < 1e-15);
        // Maximizer ssr / (P + 2) from setting the derivative to zero.
        let (ssr, n) = (3.7, 10);
        let mode = ssr / (n as f64 + 2.0);
        let f = |s| log_sigma2_conditional(s, ssr, n);
        assert!(f(mode) > f(mode * 1.01) && f(mode) > f(mode * 0.99));
        assert!(log_sigma2_conditional(1e-8, 0.0, 4) > log_sigma2_conditional(1e-4, 0.0, 4));
    }

    #[test]
    fn state_validation() {
        let support = TauSupport::default();
        let ok = AerosolState::uniform(3, 4, 1.0);
        ok.validate(support).unwrap();
        let mut bad = ok.clone();
        bad.tau[1] = 3.5;
        assert!(bad.validate(support).is_err());
        let mut bad = ok.clone();
        bad.theta_mut(2)[0] += 1e-9;
        assert!(bad.validate(support).is_err());
        assert!(AerosolState::new(vec![1.0; 2], vec![0.5; 3], 2).is_err());
    }

    #[test]
    fn log_posterior_sums_its_parts() {
        let grid = BlockGrid::all_clear(2, 2, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let fm = Surrogate::new(SurrogateParams::misr_like(3, 2).unwrap()).unwrap();
        let state = AerosolState::new(vec![0.9, 1.0, 1.1, 1.2], [0.3, 0.7].repeat(4), 2).unwrap();
        let obs: Vec<f64> = (0..4)
            .flat_map(|p| fm.eval(state.tau[p] + 0.05, state.theta(p)).unwrap())
            .collect();
        let block = RadianceBlock::new(grid, 3, obs).unwrap();
        let hyper = HyperState {
            kappa: 30.0,
            alpha: vec![0.8, 1.5],
            sigma2: vec![1e-4, 2e-4, 3e-4],
        };
        let priors = HyperpriorConstants::default();
        let lp = log_posterior(&block, &state, &hyper, &fm, &adj, &priors).unwrap();
        let expect = log_likelihood(&block, &state, &hyper.sigma2, &fm, LikelihoodForm::Normalized).unwrap()
            + log_gmrf_prior(&state.tau, 30.0, &adj)
            - 30f64.ln()
            + log_dirichlet_prior(&state.theta, &hyper.alpha)
            + log_alpha_hyperprior(&hyper.alpha)
            - hyper.sigma2.iter().map(|s| s.ln()).sum::<f64>();
        assert!((lp - expect).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn gmrf_is_shift_invariant(seed in any::<u64>(), shift in -10.0f64..10.0, kappa in 0.1f64..1e3) {
            let grid = BlockGrid::all_clear(5, 6, 4.4).unwrap();
            let adj = build_adjacency(&grid);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Dyadic values keep the shifted differences exact.
            let tau: Vec<f64> = (0..30).map(|_| rng.random_range(0..64) as f64 / 64.0).collect();
            let dyadic_shift = (shift * 8.0).round() / 8.0;
            let moved: Vec<f64> = tau.iter().map(|t| t + dyadic_shift).collect();
            prop_assert_eq!(log_gmrf_prior(&moved, kappa, &adj) - log_gmrf_prior(&tau, kappa, &adj), 0.0);
        }
    }
}
