//! Metropolis-within-Gibbs sampler over a whole block.
//!
//! One iteration visits, in order: every `tau_p` (M-H), every `theta_p`
//! (M-H), every `sigma2_c` (conjugate draw), `kappa` (conjugate draw) and
//! every `alpha_m` (M-H). Pixels are visited column by column from the left,
//! top to bottom within a column.
//!
//! The `tau_p` proposal is the GMRF full conditional
//! `N(mean of neighbors, 1 / (n_p kappa))` truncated to the support, so with
//! unit proposal scale only the pixel likelihood ratio enters the acceptance
//! probability. The `theta_p` proposal is `Dirichlet(alpha + c theta_p)`;
//! with `c = 0` it is the prior and only the likelihood ratio remains.
//! Otherwise the full Hastings correction applies. A whole-field shift of
//! `tau` follows the pixel updates. During burn-in the sampler tunes the
//! `tau` scale, `c`, the shift step and the `alpha` step towards the
//! acceptance band; tuning is frozen after burn-in.
//!
//! Random streams: a chain with seed `s` and stream `k` draws from
//! `ChaCha8Rng::seed_from_u64(s)` with `set_stream(k)`. Independent chains
//! for convergence checks use streams `0, 1, 2, ...`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::dist::{dirichlet_ln_pdf, sample_dirichlet, sample_truncated_normal};
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, TauSupport};
use crate::lattice::{build_adjacency, build_region_adjacency, Adjacency};
use crate::model::{
    dirichlet_from_summary, edge_sum_of_squares, gmrf_from_summary, log_alpha_hyperprior, normalizing_term,
    sigma_init, AerosolState, HyperState, HyperpriorConstants, RadianceBlock,
};
use crate::parallel::SummaryStats;

/// Floor on a drawn channel variance, guarding a zero residual sum.
pub const SIGMA2_FLOOR: f64 = 1e-12;

const TUNING_RANGE: (f64, f64) = (1e-3, 1e6);

/// How channel variances are updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sigma2Update {
    /// Exact draw from the scaled inverse chi-square conditional.
    Conjugate,
    /// Log-scale random-walk Metropolis-Hastings on the same conditional.
    MetropolisHastings,
}

/// Parameter blocks held fixed at their initial values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FixedBlocks {
    pub tau: bool,
    pub theta: bool,
    pub sigma2: bool,
    pub kappa: bool,
    pub alpha: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    /// RNG stream; independent chains sharing a seed use distinct streams.
    pub stream: u64,
    /// Tune proposal scales during burn-in towards `acceptance_band`.
    pub adapt_acceptance: bool,
    pub acceptance_band: (f64, f64),
    /// Iterations per adaptation window.
    pub adapt_interval: usize,
    /// Initial log-scale random-walk step for `alpha_m`.
    pub alpha_step: f64,
    /// Initial multiplier of the `tau` proposal standard deviation.
    pub tau_scale: f64,
    /// Probability of the local `Dirichlet(alpha + c theta)` move for
    /// `theta`; otherwise the proposal is `Dirichlet(alpha)`.
    pub theta_local_weight: f64,
    /// Initial concentration of the local Dirichlet move.
    pub theta_concentration: f64,
    /// Add a move shifting the whole `tau` field by a common offset after
    /// the pixel updates.
    pub shift_move: bool,
    /// Initial standard deviation of the common offset.
    pub shift_step: f64,
    pub sigma2_update: Sigma2Update,
    pub sigma2_floor: f64,
    pub priors: HyperpriorConstants,
    pub fixed: FixedBlocks,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            burn_in: 1000,
            thinning: 5,
            seed: 0,
            stream: 0,
            adapt_acceptance: true,
            acceptance_band: (0.25, 0.50),
            adapt_interval: 50,
            alpha_step: 0.2,
            tau_scale: 1.0,
            theta_local_weight: 1.0,
            theta_concentration: 100.0,
            shift_move: true,
            shift_step: 0.05,
            sigma2_update: Sigma2Update::Conjugate,
            sigma2_floor: SIGMA2_FLOOR,
            priors: HyperpriorConstants::default(),
            fixed: FixedBlocks::default(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thinning == 0 {
            return Err(Error::config("thinning must be at least 1"));
        }
        if !(self.burn_in < self.iterations || (self.iterations == 0 && self.burn_in == 0)) {
            return Err(Error::config(format!(
                "burn_in < iterations violated ({} >= {})",
                self.burn_in, self.iterations
            )));
        }
        let (lo, hi) = self.acceptance_band;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(Error::config(format!("acceptance band ({lo}, {hi}) must lie within (0, 1)")));
        }
        if self.adapt_interval == 0 {
            return Err(Error::config("adapt_interval must be at least 1"));
        }
        for (name, v) in [
            ("alpha_step", self.alpha_step),
            ("tau_scale", self.tau_scale),
            ("theta_concentration", self.theta_concentration),
            ("shift_step", self.shift_step),
            ("sigma2_floor", self.sigma2_floor),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.theta_local_weight) {
            return Err(Error::config("theta_local_weight must lie in [0, 1]"));
        }
        let p = &self.priors;
        if [p.kappa_shape, p.kappa_rate, p.nu0, p.s0_sq].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("hyperprior constants must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Number of retained samples, `floor((iterations - burn_in) / thinning)`.
    pub fn n_samples(&self) -> usize {
        (self.iterations - self.burn_in) / self.thinning
    }

    pub(crate) fn adapt_midpoint(&self) -> f64 {
        0.5 * (self.acceptance_band.0 + self.acceptance_band.1)
    }
}

/// Deterministic RNG for a seed and stream.
pub fn chain_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Initial state of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainInit {
    pub state: AerosolState,
    pub hyper: HyperState,
}

impl ChainInit {
    /// `tau` at the support midpoint, uniform `theta`, `kappa = 100`,
    /// `alpha = 1` and `sigma2` from the operational noise rule.
    pub fn default_for(block: &RadianceBlock, fm: &dyn ForwardModel) -> Result<Self> {
        Self::at_tau(block, fm, fm.support().midpoint())
    }

    pub fn at_tau(block: &RadianceBlock, fm: &dyn ForwardModel, tau: f64) -> Result<Self> {
        let m = fm.components();
        let sigma2 = sigma_init(block)?.into_iter().map(|s| s * s).collect();
        Ok(Self {
            state: AerosolState::uniform(block.n_pixels(), m, tau),
            hyper: HyperState {
                kappa: 100.0,
                alpha: vec![1.0; m],
                sigma2,
            },
        })
    }

    /// `n` initializations with `tau` spread over the inner half of the
    /// support, from the lower to the upper quartile.
    pub fn overdispersed(block: &RadianceBlock, fm: &dyn ForwardModel, n: usize) -> Result<Vec<Self>> {
        let support = fm.support();
        (0..n)
            .map(|k| {
                let q = if n == 1 { 0.5 } else { 0.25 + 0.5 * k as f64 / (n - 1) as f64 };
                Self::at_tau(block, fm, support.quantile(q))
            })
            .collect()
    }
}

/// Sampling problem over a set of clear pixels: local adjacency, observed
/// radiances and sweep order.
#[derive(Debug, Clone)]
pub struct Problem {
    adjacency: Adjacency,
    channels: usize,
    radiances: Vec<f64>,
    sweep_order: Vec<usize>,
    /// Block-level pixel index of each local pixel.
    global_ids: Vec<usize>,
}

impl Problem {
    pub fn from_block(block: &RadianceBlock) -> Self {
        let adjacency = build_adjacency(block.grid());
        let sweep_order = adjacency.column_major_order();
        Self {
            channels: block.channels(),
            radiances: block.radiances().to_vec(),
            sweep_order,
            global_ids: (0..adjacency.n_pixels()).collect(),
            adjacency,
        }
    }

    /// The clear pixels inside a rectangle, with neighbors outside dropped.
    pub fn from_region(
        block: &RadianceBlock,
        global: &Adjacency,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Self {
        let adjacency = build_region_adjacency(block.grid(), rows, cols);
        let global_ids: Vec<usize> = (0..adjacency.n_pixels())
            .map(|p| global.pixel_of_cell(adjacency.cell(p)).expect("region pixel is clear"))
            .collect();
        let mut radiances = Vec::with_capacity(global_ids.len() * block.channels());
        for &g in &global_ids {
            radiances.extend_from_slice(block.pixel(g));
        }
        Self {
            channels: block.channels(),
            radiances,
            sweep_order: adjacency.column_major_order(),
            global_ids,
            adjacency,
        }
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adjacency
    }

    pub fn n_pixels(&self) -> usize {
        self.adjacency.n_pixels()
    }

    pub fn global_ids(&self) -> &[usize] {
        &self.global_ids
    }

    pub fn sweep_order(&self) -> &[usize] {
        &self.sweep_order
    }

    #[inline]
    fn observed(&self, p: usize) -> &[f64] {
        &self.radiances[p * self.channels..(p + 1) * self.channels]
    }
}

/// Accepted and attempted updates of one kernel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counter {
    pub accepted: u64,
    pub attempted: u64,
}

impl Counter {
    #[inline]
    fn record(&mut self, accepted: bool) {
        self.attempted += 1;
        self.accepted += u64::from(accepted);
    }

    pub fn rate(&self) -> Option<f64> {
        (self.attempted > 0).then(|| self.accepted as f64 / self.attempted as f64)
    }

    pub fn add(&mut self, other: Counter) {
        self.accepted += other.accepted;
        self.attempted += other.attempted;
    }
}

/// Counters of the three Metropolis-Hastings kernel families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct AcceptanceCounts {
    pub tau: Counter,
    pub theta: Counter,
    pub alpha: Counter,
}

impl AcceptanceCounts {
    pub fn add(&mut self, other: &AcceptanceCounts) {
        self.tau.add(other.tau);
        self.theta.add(other.theta);
        self.alpha.add(other.alpha);
    }
}

/// Proposal tuning parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tuning {
    pub tau_scale: f64,
    pub theta_concentration: f64,
    pub alpha_step: f64,
    pub shift_step: f64,
}

/// Mutable state of a chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub state: AerosolState,
    pub hyper: HyperState,
    pub iteration: usize,
    /// Lifetime counters.
    pub counts: AcceptanceCounts,
    pub rng: ChaCha8Rng,
}

/// Where the hyperparameter conditionals take their statistics from.
#[derive(Debug, Clone, Copy)]
pub enum HyperSource<'s> {
    /// Statistics of the chain's own current state.
    Live,
    /// Frozen block-wide statistics over `n_pixels` pixels.
    Frozen(&'s SummaryStats, usize),
}

/// Draws one `tau_p` proposal: the GMRF full conditional
/// `N(mean_{q~p} tau_q, scale^2 / (n_p kappa))` truncated to the support, or
/// uniform on the support for an isolated pixel.
pub fn propose_tau<R: Rng + ?Sized>(
    p: usize,
    tau: &[f64],
    kappa: f64,
    adj: &Adjacency,
    support: TauSupport,
    scale: f64,
    rng: &mut R,
) -> f64 {
    let nb = adj.neighbors(p);
    if nb.is_empty() {
        return rng.random_range(support.min..=support.max);
    }
    let n = nb.len() as f64;
    let mean = nb.iter().map(|&q| tau[q]).sum::<f64>() / n;
    let sd = scale / (n * kappa).sqrt();
    sample_truncated_normal(mean, sd, support.min, support.max, rng)
}

/// Exact draw of `kappa` from `Gamma((P - 1)/2, T_kappa / 2)` (plus any
/// proper prior constants). Depends on the field only through `T_kappa`.
pub fn draw_kappa<R: Rng + ?Sized>(
    t_kappa: f64,
    n_pixels: usize,
    priors: &HyperpriorConstants,
    rng: &mut R,
) -> Result<f64> {
    let shape = 0.5 * (n_pixels as f64 - 1.0) + priors.kappa_shape;
    let rate = 0.5 * t_kappa + priors.kappa_rate;
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Degenerate(format!(
            "kappa conditional undefined: T_kappa = {t_kappa} (constant field)"
        )));
    }
    if !(shape > 0.0) {
        return Err(Error::Degenerate(format!("kappa conditional undefined for {n_pixels} pixels")));
    }
    Ok(Gamma::new(shape, 1.0 / rate).expect("valid gamma").sample(rng))
}

/// Gibbs update of `kappa` from the field's neighbor differences.
pub fn gibbs_update_kappa<R: Rng + ?Sized>(tau: &[f64], adj: &Adjacency, rng: &mut R) -> Result<f64> {
    draw_kappa(edge_sum_of_squares(tau, adj), tau.len(), &HyperpriorConstants::default(), rng)
}

/// Exact draw of one channel variance: `(nu0 s0^2 + ssr) / chi2(nu0 + P)`,
/// floored at `floor`.
pub fn draw_sigma2<R: Rng + ?Sized>(
    ssr: f64,
    n_pixels: usize,
    priors: &HyperpriorConstants,
    floor: f64,
    rng: &mut R,
) -> f64 {
    let scale = priors.nu0 * priors.s0_sq + ssr;
    let dof = priors.nu0 + n_pixels as f64;
    if scale <= 0.0 {
        return floor;
    }
    let chi: f64 = ChiSquared::new(dof).expect("positive dof").sample(rng);
    (scale / chi).max(floor)
}

/// Gibbs update of `sigma2_c` under the noninformative prior.
pub fn gibbs_update_sigma2<R: Rng + ?Sized>(ssr: f64, n_pixels: usize, rng: &mut R) -> f64 {
    draw_sigma2(ssr, n_pixels, &HyperpriorConstants::default(), SIGMA2_FLOOR, rng)
}

fn sigma2_log_target(s2: f64, ssr: f64, n_pixels: usize, priors: &HyperpriorConstants) -> f64 {
    -0.5 * n_pixels as f64 * s2.ln() - ssr / (2.0 * s2) + priors.log_sigma2_prior(s2)
}

/// Log-scale random-walk M-H step on one channel variance.
pub fn mh_step_sigma2<R: Rng + ?Sized>(
    current: f64,
    ssr: f64,
    n_pixels: usize,
    priors: &HyperpriorConstants,
    floor: f64,
    rng: &mut R,
) -> f64 {
    // Step sized to the conditional's log-scale spread, about sqrt(2 / P).
    let step = 2.4 * (2.0 / n_pixels.max(1) as f64).sqrt();
    let z: f64 = StandardNormal.sample(rng);
    let proposal = current * (step * z).exp();
    if proposal < floor {
        return current;
    }
    let log_ratio = sigma2_log_target(proposal, ssr, n_pixels, priors) - sigma2_log_target(current, ssr, n_pixels, priors)
        + (proposal / current).ln();
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        proposal
    } else {
        current
    }
}

/// Log of `p(alpha | theta)` from `T_alpha` under the conjugate hyperprior.
pub fn alpha_log_target(alpha: &[f64], t_alpha: &[f64], n_pixels: usize) -> f64 {
    dirichlet_from_summary(t_alpha, alpha, n_pixels) + log_alpha_hyperprior(alpha)
}

/// One M-H update of `alpha[m]` with proposal `alpha_m exp(step z)`.
pub fn mh_step_alpha<R: Rng + ?Sized>(
    alpha: &mut [f64],
    m: usize,
    t_alpha: &[f64],
    n_pixels: usize,
    step: f64,
    rng: &mut R,
) -> bool {
    let old = alpha[m];
    let z: f64 = StandardNormal.sample(rng);
    let new = old * (step * z).exp();
    if !(new.is_finite() && new > 0.0) {
        return false;
    }
    let before = alpha_log_target(alpha, t_alpha, n_pixels);
    alpha[m] = new;
    let after = alpha_log_target(alpha, t_alpha, n_pixels);
    // Jacobian of the log-scale move.
    let log_ratio = after - before + (new / old).ln();
    if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
        true
    } else {
        alpha[m] = old;
        false
    }
}

/// Per-iteration acceptance counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct IterationAccepts {
    pub tau: Counter,
    pub theta: Counter,
    pub alpha: Counter,
}

impl IterationAccepts {
    fn as_counts(&self) -> AcceptanceCounts {
        AcceptanceCounts {
            tau: self.tau,
            theta: self.theta,
            alpha: self.alpha,
        }
    }
}

/// Outcome of one sweep.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub accepts: IterationAccepts,
    /// Live statistics of the state after the sweep, when computed.
    pub stats: Option<SummaryStats>,
}

/// A Metropolis-within-Gibbs chain over a [`Problem`].
pub struct Chain<'a> {
    problem: Problem,
    fm: &'a dyn ForwardModel,
    support: TauSupport,
    config: ChainConfig,
    pub chain: ChainState,
    tuning: Tuning,
    window: AcceptanceCounts,
    shift_window: Counter,
    /// Forward radiances at the current state, pixel-major.
    fits: Vec<f64>,
    inv_two_sigma2: Vec<f64>,
    scratch_fit: Vec<f64>,
    scratch_theta: Vec<f64>,
    scratch_fits: Vec<f64>,
}

impl<'a> Chain<'a> {
    pub fn new(
        problem: Problem,
        fm: &'a dyn ForwardModel,
        state: AerosolState,
        hyper: HyperState,
        config: ChainConfig,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let support = fm.support();
        let (c, m) = (fm.channels(), fm.components());
        if problem.channels != c {
            return Err(Error::config(format!(
                "block has {} channels, forward model {c}",
                problem.channels
            )));
        }
        if state.components() != m || hyper.alpha.len() != m {
            return Err(Error::config(format!("state and alpha must have {m} components")));
        }
        if hyper.sigma2.len() != c {
            return Err(Error::config(format!("sigma2 must have {c} channels")));
        }
        if state.n_pixels() != problem.n_pixels() {
            return Err(Error::config("initial state does not match the pixel count"));
        }
        hyper.validate()?;
        state.validate(support)?;
        if state.theta.iter().any(|&t| t <= 0.0) {
            return Err(Error::domain("initial mixing vectors must be strictly positive"));
        }
        let mut fits = vec![0.0; problem.n_pixels() * c];
        for p in 0..problem.n_pixels() {
            fm.eval_into(state.tau[p], state.theta(p), &mut fits[p * c..(p + 1) * c])?;
        }
        let inv_two_sigma2 = hyper.sigma2.iter().map(|s| 0.5 / s).collect();
        let tuning = Tuning {
            tau_scale: config.tau_scale,
            theta_concentration: config.theta_concentration,
            alpha_step: config.alpha_step,
            shift_step: config.shift_step,
        };
        Ok(Self {
            problem,
            fm,
            support,
            config,
            chain: ChainState {
                state,
                hyper,
                iteration: 0,
                counts: AcceptanceCounts::default(),
                rng,
            },
            tuning,
            window: AcceptanceCounts::default(),
            shift_window: Counter::default(),
            scratch_fits: vec![0.0; fits.len()],
            fits,
            inv_two_sigma2,
            scratch_fit: vec![0.0; c],
            scratch_theta: vec![0.0; m],
        })
    }

    pub fn problem(&self) -> &Problem {
        &self.problem
    }

    pub fn tuning(&self) -> Tuning {
        self.tuning
    }

    pub fn set_tuning(&mut self, tuning: Tuning) {
        self.tuning = tuning;
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    /// Replaces the current state and hyperparameters, refreshing caches.
    pub fn reset_state(&mut self, state: AerosolState, hyper: HyperState) -> Result<()> {
        let c = self.problem.channels;
        for p in 0..self.problem.n_pixels() {
            self.fm
                .eval_into(state.tau[p], state.theta(p), &mut self.fits[p * c..(p + 1) * c])?;
        }
        self.inv_two_sigma2 = hyper.sigma2.iter().map(|s| 0.5 / s).collect();
        self.chain.state = state;
        self.chain.hyper = hyper;
        Ok(())
    }

    #[inline]
    fn chi_square_current(&self, p: usize) -> f64 {
        let c = self.problem.channels;
        chi(self.problem.observed(p), &self.fits[p * c..(p + 1) * c], &self.inv_two_sigma2)
    }

    /// M-H update of `tau_p`. Returns whether the proposal was accepted; a
    /// proposal the forward model cannot evaluate is rejected.
    pub fn mh_update_tau(&mut self, p: usize) -> bool {
        let accepted = self.tau_step(p);
        self.chain.counts.tau.record(accepted);
        self.window.tau.record(accepted);
        accepted
    }

    fn tau_step(&mut self, p: usize) -> bool {
        let adj = &self.problem.adjacency;
        let kappa = self.chain.hyper.kappa;
        let scale = self.tuning.tau_scale;
        let old = self.chain.state.tau[p];
        let proposal = propose_tau(p, &self.chain.state.tau, kappa, adj, self.support, scale, &mut self.chain.rng);

        // Prior and proposal terms cancel at unit scale; otherwise add
        // log pi(x*) - log pi(x) + log q(x) - log q(x*), where both are
        // normals around the same neighbor mean with variances v and s^2 v.
        let mut log_ratio = 0.0;
        let n = adj.degree(p);
        if n > 0 && scale != 1.0 {
            let mean = adj.neighbors(p).iter().map(|&q| self.chain.state.tau[q]).sum::<f64>() / n as f64;
            let precision = n as f64 * kappa;
            let delta = (proposal - mean).powi(2) - (old - mean).powi(2);
            log_ratio += -0.5 * precision * delta * (1.0 - 1.0 / (scale * scale));
        }

        let theta = self.chain.state.theta(p);
        if self.fm.eval_into(proposal, theta, &mut self.scratch_fit).is_err() {
            return false;
        }
        let chi_new = chi(self.problem.observed(p), &self.scratch_fit, &self.inv_two_sigma2);
        log_ratio += self.chi_square_current(p) - chi_new;
        if accept(log_ratio, &mut self.chain.rng) {
            self.chain.state.tau[p] = proposal;
            let c = self.problem.channels;
            self.fits[p * c..(p + 1) * c].copy_from_slice(&self.scratch_fit);
            true
        } else {
            false
        }
    }

    /// M-H move adding one offset to every `tau_p`. The GMRF prior depends
    /// only on differences, so the likelihood ratio decides acceptance.
    pub fn mh_update_shift(&mut self) -> bool {
        let accepted = self.shift_step();
        self.shift_window.record(accepted);
        accepted
    }

    fn shift_step(&mut self) -> bool {
        let delta = self.tuning.shift_step * self.chain.rng.sample::<f64, _>(StandardNormal);
        if !self.chain.state.tau.iter().all(|&t| self.support.contains(t + delta)) {
            return false;
        }
        let c = self.problem.channels;
        let mut log_ratio = 0.0;
        for p in 0..self.problem.n_pixels() {
            let fit = &mut self.scratch_fits[p * c..(p + 1) * c];
            if self.fm.eval_into(self.chain.state.tau[p] + delta, self.chain.state.theta(p), fit).is_err() {
                return false;
            }
            log_ratio += chi(self.problem.observed(p), &self.fits[p * c..(p + 1) * c], &self.inv_two_sigma2)
                - chi(self.problem.observed(p), fit, &self.inv_two_sigma2);
        }
        if !log_ratio.is_nan() && accept(log_ratio, &mut self.chain.rng) {
            self.chain.state.tau.iter_mut().for_each(|t| *t += delta);
            std::mem::swap(&mut self.fits, &mut self.scratch_fits);
            true
        } else {
            false
        }
    }

    /// M-H update of `theta_p`.
    pub fn mh_update_theta(&mut self, p: usize) -> bool {
        let accepted = self.theta_step(p);
        self.chain.counts.theta.record(accepted);
        self.window.theta.record(accepted);
        accepted
    }

    fn theta_step(&mut self, p: usize) -> bool {
        let m = self.chain.state.components();
        let local = self.config.theta_local_weight > 0.0
            && self.chain.rng.random::<f64>() < self.config.theta_local_weight;
        let mut log_ratio = 0.0;
        if local {
            let conc = self.tuning.theta_concentration;
            let alpha = &self.chain.hyper.alpha;
            let old = self.chain.state.theta(p);
            let forward: Vec<f64> = old.iter().zip(alpha).map(|(&t, &a)| a + conc * t).collect();
            sample_dirichlet(&forward, &mut self.chain.rng, &mut self.scratch_theta);
            if self.scratch_theta.iter().any(|&t| t <= 0.0) {
                return false;
            }
            let backward: Vec<f64> = self.scratch_theta.iter().zip(alpha).map(|(&t, &a)| a + conc * t).collect();
            log_ratio += dirichlet_ln_pdf(&self.scratch_theta, alpha) - dirichlet_ln_pdf(old, alpha);
            log_ratio += dirichlet_ln_pdf(old, &backward) - dirichlet_ln_pdf(&self.scratch_theta, &forward);
        } else {
            // Independence proposal from the prior: prior and proposal cancel.
            sample_dirichlet(&self.chain.hyper.alpha, &mut self.chain.rng, &mut self.scratch_theta);
            if self.scratch_theta.iter().any(|&t| t <= 0.0) {
                return false;
            }
        }
        debug_assert_eq!(self.scratch_theta.len(), m);
        let tau = self.chain.state.tau[p];
        if self.fm.eval_into(tau, &self.scratch_theta, &mut self.scratch_fit).is_err() {
            return false;
        }
        let chi_new = chi(self.problem.observed(p), &self.scratch_fit, &self.inv_two_sigma2);
        log_ratio += self.chi_square_current(p) - chi_new;
        if !log_ratio.is_nan() && accept(log_ratio, &mut self.chain.rng) {
            self.chain.state.theta_mut(p).copy_from_slice(&self.scratch_theta);
            let c = self.problem.channels;
            self.fits[p * c..(p + 1) * c].copy_from_slice(&self.scratch_fit);
            true
        } else {
            false
        }
    }

    /// M-H update of `alpha_m` against the given statistics.
    pub fn mh_update_alpha(&mut self, m: usize, t_alpha: &[f64], n_pixels: usize) -> bool {
        let step = self.tuning.alpha_step;
        let accepted = mh_step_alpha(&mut self.chain.hyper.alpha, m, t_alpha, n_pixels, step, &mut self.chain.rng);
        self.chain.counts.alpha.record(accepted);
        self.window.alpha.record(accepted);
        accepted
    }

    /// Statistics of the current local state.
    pub fn local_summaries(&self) -> SummaryStats {
        let c = self.problem.channels;
        let m = self.chain.state.components();
        let mut t_sigma = vec![0.0; c];
        for p in 0..self.problem.n_pixels() {
            let obs = self.problem.observed(p);
            let fit = &self.fits[p * c..(p + 1) * c];
            for j in 0..c {
                let r = obs[j] - fit[j];
                t_sigma[j] += r * r;
            }
        }
        let mut t_alpha = vec![0.0; m];
        for (i, &t) in self.chain.state.theta.iter().enumerate() {
            t_alpha[i % m] += t.ln();
        }
        SummaryStats {
            t_kappa: edge_sum_of_squares(&self.chain.state.tau, &self.problem.adjacency),
            t_sigma,
            t_alpha,
        }
    }

    /// One full Metropolis-within-Gibbs iteration.
    pub fn sweep(&mut self, source: HyperSource<'_>) -> Result<SweepOutcome> {
        let before = self.chain.counts;
        let fixed = self.config.fixed;
        if !fixed.tau {
            for i in 0..self.problem.sweep_order.len() {
                let p = self.problem.sweep_order[i];
                self.mh_update_tau(p);
            }
            if self.config.shift_move {
                self.mh_update_shift();
            }
        }
        if !fixed.theta {
            for i in 0..self.problem.sweep_order.len() {
                let p = self.problem.sweep_order[i];
                self.mh_update_theta(p);
            }
        }

        let live = matches!(source, HyperSource::Live).then(|| self.local_summaries());
        let (stats, n) = match (source, &live) {
            (HyperSource::Frozen(stats, n), _) => (stats, n),
            (HyperSource::Live, Some(live)) => (live, self.problem.n_pixels()),
            (HyperSource::Live, None) => unreachable!(),
        };
        let priors = self.config.priors;
        if !fixed.sigma2 {
            for c in 0..stats.t_sigma.len() {
                let ssr = stats.t_sigma[c];
                let current = self.chain.hyper.sigma2[c];
                let floor = self.config.sigma2_floor;
                let s2 = match self.config.sigma2_update {
                    Sigma2Update::Conjugate => draw_sigma2(ssr, n, &priors, floor, &mut self.chain.rng),
                    Sigma2Update::MetropolisHastings => {
                        mh_step_sigma2(current, ssr, n, &priors, floor, &mut self.chain.rng)
                    }
                };
                self.chain.hyper.sigma2[c] = s2;
                self.inv_two_sigma2[c] = 0.5 / s2;
            }
        }
        // Frozen statistics of a constant starting field leave kappa's
        // conditional improper; kappa then keeps its value for the round.
        let frozen_flat = matches!(source, HyperSource::Frozen(..)) && stats.t_kappa == 0.0;
        if !fixed.kappa && !frozen_flat {
            self.chain.hyper.kappa = draw_kappa(stats.t_kappa, n, &priors, &mut self.chain.rng)?;
        }
        if !fixed.alpha {
            for m in 0..self.chain.hyper.alpha.len() {
                self.mh_update_alpha(m, &stats.t_alpha, n);
            }
        }
        self.chain.iteration += 1;

        let after = self.chain.counts;
        let diff = |a: Counter, b: Counter| Counter {
            accepted: a.accepted - b.accepted,
            attempted: a.attempted - b.attempted,
        };
        let accepts = IterationAccepts {
            tau: diff(after.tau, before.tau),
            theta: diff(after.theta, before.theta),
            alpha: diff(after.alpha, before.alpha),
        };
        Ok(SweepOutcome { accepts, stats: live })
    }

    /// Moves each tuning parameter towards the middle of the acceptance band
    /// using the acceptance rates of the window since the last call.
    pub fn adapt(&mut self) {
        let mid = self.config.adapt_midpoint();
        let gain = 1.5;
        let clamp = |v: f64| v.clamp(TUNING_RANGE.0, TUNING_RANGE.1);
        if let Some(rate) = self.window.tau.rate() {
            // Wider proposals lower the acceptance rate.
            self.tuning.tau_scale = clamp(self.tuning.tau_scale * (gain * (rate - mid)).exp());
        }
        if self.config.theta_local_weight > 0.0 {
            if let Some(rate) = self.window.theta.rate() {
                // Higher concentration means smaller moves and more acceptances.
                self.tuning.theta_concentration = clamp(self.tuning.theta_concentration * (-2.0 * gain * (rate - mid)).exp());
            }
        }
        if let Some(rate) = self.window.alpha.rate() {
            self.tuning.alpha_step = clamp(self.tuning.alpha_step * (gain * (rate - mid)).exp());
        }
        if let Some(rate) = self.shift_window.rate() {
            self.tuning.shift_step = clamp(self.tuning.shift_step * (gain * (rate - mid)).exp());
        }
        self.window = AcceptanceCounts::default();
        self.shift_window = Counter::default();
    }

    /// Joint log-posterior of the current state given its live statistics.
    pub fn log_posterior_from(&self, stats: &SummaryStats) -> f64 {
        log_posterior_from_summaries(stats, &self.chain.hyper, self.problem.n_pixels(), &self.config.priors)
    }

    pub fn log_posterior(&self) -> f64 {
        self.log_posterior_from(&self.local_summaries())
    }
}

/// Joint log-posterior from the sufficient statistics of a state.
pub fn log_posterior_from_summaries(
    stats: &SummaryStats,
    hyper: &HyperState,
    n_pixels: usize,
    priors: &HyperpriorConstants,
) -> f64 {
    let kernel: f64 = stats
        .t_sigma
        .iter()
        .zip(&hyper.sigma2)
        .map(|(ssr, s2)| -ssr / (2.0 * s2))
        .sum();
    kernel
        + normalizing_term(n_pixels, &hyper.sigma2)
        + gmrf_from_summary(stats.t_kappa, hyper.kappa, n_pixels)
        + priors.log_kappa_prior(hyper.kappa)
        + dirichlet_from_summary(&stats.t_alpha, &hyper.alpha, n_pixels)
        + log_alpha_hyperprior(&hyper.alpha)
        + hyper.sigma2.iter().map(|&s| priors.log_sigma2_prior(s)).sum::<f64>()
}

#[inline]
fn chi(observed: &[f64], fitted: &[f64], inv_two_sigma2: &[f64]) -> f64 {
    let mut total = 0.0;
    for c in 0..observed.len() {
        let r = observed[c] - fitted[c];
        total += r * r * inv_two_sigma2[c];
    }
    total
}

#[inline]
fn accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Recorded output of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub n_pixels: usize,
    pub components: usize,
    pub channels: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    /// Iterations between log-posterior trace entries.
    pub trace_stride: usize,
    /// Log-posterior at iterations `0, stride, 2 stride, ...`; entry 0 is the
    /// initial state.
    pub log_posterior: Vec<f64>,
    /// `kappa` at the same iterations as `log_posterior`.
    pub kappa_trace: Vec<f64>,
    pub tau_samples: Vec<Vec<f64>>,
    pub theta_samples: Vec<Vec<f64>>,
    pub kappa_samples: Vec<f64>,
    pub alpha_samples: Vec<Vec<f64>>,
    pub sigma2_samples: Vec<Vec<f64>>,
    /// Acceptance counts of every iteration.
    pub accept_log: Vec<IterationAccepts>,
    /// Acceptance counts after burn-in.
    pub acceptance: AcceptanceCounts,
    pub tuning: Tuning,
    pub final_state: AerosolState,
    pub final_hyper: HyperState,
}

impl ChainRecord {
    pub(crate) fn empty(
        n_pixels: usize,
        components: usize,
        channels: usize,
        config: &ChainConfig,
        trace_stride: usize,
        init: &ChainInit,
    ) -> Self {
        Self {
            n_pixels,
            components,
            channels,
            iterations: config.iterations,
            burn_in: config.burn_in,
            thinning: config.thinning,
            trace_stride,
            log_posterior: Vec::new(),
            kappa_trace: Vec::new(),
            tau_samples: Vec::new(),
            theta_samples: Vec::new(),
            kappa_samples: Vec::new(),
            alpha_samples: Vec::new(),
            sigma2_samples: Vec::new(),
            accept_log: Vec::new(),
            acceptance: AcceptanceCounts::default(),
            tuning: Tuning {
                tau_scale: config.tau_scale,
                theta_concentration: config.theta_concentration,
                alpha_step: config.alpha_step,
                shift_step: config.shift_step,
            },
            final_state: init.state.clone(),
            final_hyper: init.hyper.clone(),
        }
    }

    pub fn n_samples(&self) -> usize {
        self.tau_samples.len()
    }

    /// Post-burn-in acceptance counts recounted from the per-iteration log.
    pub fn recount_acceptance(&self) -> AcceptanceCounts {
        let mut total = AcceptanceCounts::default();
        for a in self.accept_log.iter().skip(self.burn_in) {
            total.add(&a.as_counts());
        }
        total
    }

    pub(crate) fn push_sample(&mut self, state: &AerosolState, hyper: &HyperState) {
        self.tau_samples.push(state.tau.clone());
        self.theta_samples.push(state.theta.clone());
        self.kappa_samples.push(hyper.kappa);
        self.alpha_samples.push(hyper.alpha.clone());
        self.sigma2_samples.push(hyper.sigma2.clone());
    }
}

pub(crate) fn check_run_inputs(block: &RadianceBlock, fm: &dyn ForwardModel, config: &ChainConfig, init: &ChainInit) -> Result<()> {
    config.validate()?;
    if block.channels() != fm.channels() {
        return Err(Error::config(format!(
            "block has {} channels but the forward model has {}",
            block.channels(),
            fm.channels()
        )));
    }
    if !config.fixed.kappa && block.n_pixels() <= 5 {
        return Err(Error::config(format!(
            "sampling kappa needs more than 5 clear pixels, block has {}",
            block.n_pixels()
        )));
    }
    if init.state.n_pixels() != block.n_pixels() {
        return Err(Error::config("initial state does not match the block"));
    }
    Ok(())
}

/// Runs the global Metropolis-within-Gibbs chain on a block.
pub fn run_chain(block: &RadianceBlock, fm: &dyn ForwardModel, config: &ChainConfig, init: &ChainInit) -> Result<ChainRecord> {
    check_run_inputs(block, fm, config, init)?;
    let problem = Problem::from_block(block);
    let rng = chain_rng(config.seed, config.stream);
    let mut chain = Chain::new(problem, fm, init.state.clone(), init.hyper.clone(), config.clone(), rng)?;
    let mut record = ChainRecord::empty(block.n_pixels(), fm.components(), fm.channels(), config, 1, init);
    let initial = chain.local_summaries();
    record.log_posterior.push(chain.log_posterior_from(&initial));
    record.kappa_trace.push(chain.chain.hyper.kappa);

    for t in 1..=config.iterations {
        let outcome = chain.sweep(HyperSource::Live)?;
        record.accept_log.push(outcome.accepts);
        if t > config.burn_in {
            record.acceptance.add(&outcome.accepts.as_counts());
        }
        if config.adapt_acceptance && t <= config.burn_in && (t % config.adapt_interval == 0 || t == config.burn_in) {
            chain.adapt();
        }
        let stats = outcome.stats.expect("live sweep returns statistics");
        record.log_posterior.push(chain.log_posterior_from(&stats));
        record.kappa_trace.push(chain.chain.hyper.kappa);
        if t > config.burn_in && (t - config.burn_in) % config.thinning == 0 {
            record.push_sample(&chain.chain.state, &chain.chain.hyper);
        }
    }
    record.tuning = chain.tuning();
    record.final_state = chain.chain.state.clone();
    record.final_hyper = chain.chain.hyper.clone();
    Ok(record)
}

/// Runs independent chains, chain `k` on RNG stream `k`, on up to `workers`
/// threads. Results are in chain order and do not depend on `workers`.
pub fn run_chains(
    block: &RadianceBlock,
    fm: &dyn ForwardModel,
    config: &ChainConfig,
    inits: &[ChainInit],
    workers: usize,
) -> Result<Vec<ChainRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        inits
            .par_iter()
            .enumerate()
            .map(|(k, init)| {
                let cfg = ChainConfig {
                    stream: k as u64,
                    ..config.clone()
                };
                run_chain(block, fm, &cfg, init)
            })
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{Surrogate, SurrogateParams};
    use crate::lattice::BlockGrid;

    fn tiny_block(rows: usize, cols: usize, fm: &dyn ForwardModel, tau: f64) -> RadianceBlock {
        let grid = BlockGrid::all_clear(rows, cols, 4.4).unwrap();
        let m = fm.components();
        let theta = vec![1.0 / m as f64; m];
        let one = fm.eval(tau, &theta).unwrap();
        RadianceBlock::new(grid, fm.channels(), one.repeat(rows * cols)).unwrap()
    }

    fn short_config(iterations: usize, burn_in: usize) -> ChainConfig {
        ChainConfig {
            iterations,
            burn_in,
            thinning: 1,
            seed: 9,
            ..ChainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(ChainConfig::default().validate().is_ok());
        let bad = ChainConfig { iterations: 0, ..ChainConfig::default() };
        assert!(bad.validate().unwrap_err().to_string().contains("burn_in < iterations"));
        assert!(ChainConfig { thinning: 0, ..ChainConfig::default() }.validate().is_err());
        assert!(ChainConfig { acceptance_band: (0.5, 0.25), ..ChainConfig::default() }.validate().is_err());
        assert!(ChainConfig { theta_local_weight: 1.5, ..ChainConfig::default() }.validate().is_err());
        assert_eq!(ChainConfig { iterations: 10, burn_in: 3, thinning: 2, ..ChainConfig::default() }.n_samples(), 3);
    }

    #[test]
    fn proposal_concentrates_as_kappa_grows() {
        let grid = BlockGrid::all_clear(1, 3, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let tau = [0.5, 2.0, 0.5];
        let mut rng = chain_rng(1, 0);
        for _ in 0..100 {
            let x = propose_tau(1, &tau, 1e12, &adj, TauSupport::default(), 1.0, &mut rng);
            assert!((x - 0.5).abs() < 1e-4);
        }
    }

    #[test]
    fn proposal_mean_matches_neighbor_average() {
        let grid = BlockGrid::all_clear(1, 3, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let tau = [0.2, 9.0, 0.4];
        let support = TauSupport::new(-10.0, 10.0).unwrap();
        let mut rng = chain_rng(2, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = propose_tau(1, &tau, 100.0, &adj, support, 1.0, &mut rng);
            assert!(support.contains(x));
            sum += x;
        }
        let se = (1.0 / 200.0f64).sqrt() / (n as f64).sqrt();
        assert!((sum / n as f64 - 0.3).abs() < 3.0 * se);
    }

    #[test]
    fn isolated_pixel_proposal_is_uniform_on_support() {
        let grid = BlockGrid::all_clear(1, 1, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let mut rng = chain_rng(3, 0);
        let n = 20_000;
        let mean = (0..n)
            .map(|_| propose_tau(0, &[1.0], 50.0, &adj, TauSupport::default(), 1.0, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.5).abs() < 3.0 * (0.75f64 / n as f64).sqrt());
    }

    #[test]
    fn kappa_draw_matches_gamma_mean_and_scaling() {
        let grid = BlockGrid::all_clear(4, 4, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let tau: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let t = edge_sum_of_squares(&tau, &adj);
        let n = 100_000;
        let mut rng = chain_rng(4, 0);
        let draws: Vec<f64> = (0..n).map(|_| gibbs_update_kappa(&tau, &adj, &mut rng).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let shape = 7.5f64;
        let expect = 15.0 / t;
        let se = (shape.sqrt() / (t / 2.0)) / (n as f64).sqrt();
        assert!((mean - expect).abs() < 3.0 * se, "{mean} vs {expect}");

        // Doubling the differences quarters the draws.
        let doubled: Vec<f64> = tau.iter().map(|x| 2.0 * x).collect();
        let mut rng = chain_rng(4, 0);
        let scaled: Vec<f64> = (0..n).map(|_| gibbs_update_kappa(&doubled, &adj, &mut rng).unwrap()).collect();
        for (a, b) in draws.iter().zip(&scaled) {
            assert!((a / 4.0 - b).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn kappa_from_single_edge_and_constant_field() {
        let grid = BlockGrid::all_clear(1, 2, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        // Shape 1/2, rate 1/2: a chi-square with one degree of freedom.
        let mut a = chain_rng(5, 0);
        let mut b = chain_rng(5, 0);
        let x = gibbs_update_kappa(&[0.0, 1.0], &adj, &mut a).unwrap();
        let y: f64 = Gamma::new(0.5, 2.0).unwrap().sample(&mut b);
        assert_eq!(x, y);
        assert!(matches!(gibbs_update_kappa(&[0.3, 0.3], &adj, &mut a), Err(Error::Degenerate(_))));
    }

    #[test]
    fn sigma2_draws_mean_and_floor() {
        let mut rng = chain_rng(6, 0);
        let (ssr, p) = (0.8, 40);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| gibbs_update_sigma2(ssr, p, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let expect = ssr / (p as f64 - 2.0);
        // Variance of the scaled inverse chi-square.
        let var = 2.0 * expect * expect / (p as f64 - 4.0);
        assert!((mean - expect).abs() < 3.0 * (var / n as f64).sqrt());
        assert_eq!(gibbs_update_sigma2(0.0, p, &mut rng), SIGMA2_FLOOR);
        // Large P with ssr / P fixed concentrates at that value.
        let big: Vec<f64> = (0..1000).map(|_| gibbs_update_sigma2(0.5 * 1e6, 1_000_000, &mut rng)).collect();
        assert!(big.iter().all(|v| (v - 0.5).abs() < 0.01));
    }

    #[test]
    fn alpha_step_keeps_positive_and_identity_accepts() {
        let mut rng = chain_rng(7, 0);
        let mut alpha = vec![1.0, 2.0];
        let t = [-50.0, -20.0];
        for _ in 0..1000 {
            mh_step_alpha(&mut alpha, 0, &t, 30, 0.5, &mut rng);
            mh_step_alpha(&mut alpha, 1, &t, 30, 0.5, &mut rng);
            assert!(alpha.iter().all(|&a| a > 0.0));
        }
        // A zero step proposes the current value, which is always accepted.
        assert!(mh_step_alpha(&mut alpha, 0, &t, 30, 0.0, &mut rng));
    }

    #[test]
    fn identical_fit_proposals_are_accepted() {
        // Radiances independent of tau and theta: every likelihood ratio is 1.
        let params = SurrogateParams {
            channels: 2,
            components: 2,
            extinction: vec![1.0; 4],
            path: vec![0.05; 4],
            surface: vec![0.05; 2],
            support: TauSupport::default(),
        };
        let fm = Surrogate::new(params).unwrap();
        let block = tiny_block(3, 3, &fm, 1.0);
        let init = ChainInit::default_for(&block, &fm).unwrap();
        let config = ChainConfig {
            theta_local_weight: 0.0,
            fixed: FixedBlocks { kappa: true, sigma2: true, alpha: true, ..FixedBlocks::default() },
            ..short_config(5, 0)
        };
        let record = run_chain(&block, &fm, &config, &init).unwrap();
        assert_eq!(record.acceptance.tau.accepted, record.acceptance.tau.attempted);
        assert_eq!(record.acceptance.theta.accepted, record.acceptance.theta.attempted);
    }

    #[test]
    fn mh_acceptance_probability_for_fixed_misfit_increase() {
        // One channel, two fixed tau values whose misfits differ by ln 2:
        // the move from the better to the worse is accepted half the time.
        let params = SurrogateParams {
            channels: 1,
            components: 1,
            extinction: vec![1.0],
            path: vec![0.2],
            surface: vec![0.02],
            support: TauSupport::new(0.0, 3.0).unwrap(),
        };
        let fm = Surrogate::new(params).unwrap();
        let obs = fm.eval(1.0, &[1.0]).unwrap()[0];
        let worse = fm.eval(1.2, &[1.0]).unwrap()[0];
        let sigma2 = (obs - worse).powi(2) / (2.0 * std::f64::consts::LN_2);
        let grid = BlockGrid::all_clear(1, 2, 4.4).unwrap();
        let block = RadianceBlock::new(grid, 1, vec![obs, obs]).unwrap();
        let problem = Problem::from_block(&block);
        let state = AerosolState::new(vec![1.0, 1.2], vec![1.0, 1.0], 1).unwrap();
        let hyper = HyperState { kappa: 1e16, alpha: vec![1.0], sigma2: vec![sigma2] };
        let config = ChainConfig { fixed: FixedBlocks { theta: true, sigma2: true, kappa: true, alpha: true, tau: false }, ..short_config(1, 0) };
        let mut chain = Chain::new(problem, &fm, state, hyper, config, chain_rng(8, 0)).unwrap();
        // With kappa huge the proposal for pixel 0 is pixel 1's value, 1.2.
        let n = 40_000;
        let mut accepted = 0;
        for _ in 0..n {
            chain.chain.state.tau[0] = 1.0;
            chain.reset_state(chain.chain.state.clone(), chain.chain.hyper.clone()).unwrap();
            if chain.mh_update_tau(0) {
                accepted += 1;
            }
        }
        let rate = accepted as f64 / n as f64;
        assert!((rate - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "rate {rate}");
    }

    #[test]
    fn zero_iterations_give_initial_trace_only() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let block = tiny_block(3, 3, &fm, 1.0);
        let init = ChainInit::default_for(&block, &fm).unwrap();
        let record = run_chain(&block, &fm, &short_config(0, 0), &init).unwrap();
        assert_eq!(record.n_samples(), 0);
        assert_eq!(record.log_posterior.len(), 1);
        assert!(record.log_posterior[0].is_finite());
    }

    #[test]
    fn tiny_blocks_cannot_sample_kappa() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let block = tiny_block(1, 5, &fm, 1.0);
        let init = ChainInit::default_for(&block, &fm).unwrap();
        assert!(matches!(run_chain(&block, &fm, &short_config(3, 0), &init), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_seed_is_deterministic_and_counts_match_log() {
        let fm = Surrogate::misr_like(8, 3).unwrap();
        let block = tiny_block(4, 5, &fm, 0.8);
        let init = ChainInit::default_for(&block, &fm).unwrap();
        let config = ChainConfig { thinning: 3, ..short_config(60, 20) };
        let a = run_chain(&block, &fm, &config, &init).unwrap();
        let b = run_chain(&block, &fm, &config, &init).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples(), config.n_samples());
        assert_eq!(a.log_posterior.len(), 61);
        assert_eq!(a.acceptance, a.recount_acceptance());
        for (tau, theta) in a.tau_samples.iter().zip(&a.theta_samples) {
            let s = AerosolState::new(tau.clone(), theta.clone(), 3).unwrap();
            s.validate(fm.support()).unwrap();
        }
    }

    #[test]
    fn multiple_chains_use_distinct_streams() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let block = tiny_block(3, 3, &fm, 0.8);
        let inits = ChainInit::overdispersed(&block, &fm, 3).unwrap();
        assert_eq!(inits[0].state.tau[0], 0.75);
        assert_eq!(inits[2].state.tau[0], 2.25);
        let config = short_config(20, 5);
        let one = run_chains(&block, &fm, &config, &inits, 1).unwrap();
        let two = run_chains(&block, &fm, &config, &inits, 2).unwrap();
        assert_eq!(one, two);
        assert_ne!(one[0].log_posterior, one[1].log_posterior);
    }

    #[test]
    fn log_posterior_cache_matches_direct_evaluation() {
        let fm = Surrogate::misr_like(6, 3).unwrap();
        let block = tiny_block(3, 4, &fm, 1.3);
        let init = ChainInit::default_for(&block, &fm).unwrap();
        let record = run_chain(&block, &fm, &short_config(15, 5), &init).unwrap();
        let adj = build_adjacency(block.grid());
        let direct = crate::model::log_posterior(
            &block,
            &record.final_state,
            &record.final_hyper,
            &fm,
            &adj,
            &HyperpriorConstants::default(),
        )
        .unwrap();
        let cached = *record.log_posterior.last().unwrap();
        assert!((direct - cached).abs() < 1e-8 * direct.abs().max(1.0), "{direct} vs {cached}");
    }
}
