//! Patch-parallel sampler.
//!
//! The block is covered by overlapping rectangular patches. Each round, every
//! patch runs a fixed number of Metropolis-within-Gibbs sweeps on its own
//! pixels using only within-patch neighbors, while its hyperparameter
//! conditionals use block-wide statistics frozen at the start of the round.
//! After the round the coordinator averages the overlap copies of `tau` and
//! `theta` into the state that seeds the next round, recomputes the
//! block-wide statistics from the patch draws and draws the global
//! hyperparameters.
//!
//! Random streams: with chain stream `k` and `n` patches, the coordinator
//! uses stream `k (n + 1)` and patch `i` uses stream `k (n + 1) + 1 + i`, so
//! results do not depend on the number of worker threads.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::ForwardModel;
use crate::lattice::{build_adjacency, Adjacency, PatchLayout};
use crate::model::{edge_sum_of_squares, AerosolState, HyperState, RadianceBlock};
use crate::sampler::{
    chain_rng, check_run_inputs, draw_kappa, draw_sigma2, mh_step_alpha, mh_step_sigma2, Chain, ChainConfig,
    ChainInit, ChainRecord, HyperSource, IterationAccepts, Problem, Sigma2Update, log_posterior_from_summaries,
};

/// Sufficient statistics of the hyperparameter conditionals.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryStats {
    /// `sum over edges (tau_p - tau_q)^2`.
    pub t_kappa: f64,
    /// Residual sum of squares per channel.
    pub t_sigma: Vec<f64>,
    /// `sum_p log theta_pm` per component.
    pub t_alpha: Vec<f64>,
}

/// Block-wide statistics of a state.
pub fn compute_summaries(
    block: &RadianceBlock,
    state: &AerosolState,
    fm: &dyn ForwardModel,
    adj: &Adjacency,
) -> Result<SummaryStats> {
    let c = block.channels();
    let m = state.components();
    let mut t_sigma = vec![0.0; c];
    let mut fit = vec![0.0; c];
    for p in 0..block.n_pixels() {
        fm.eval_into(state.tau[p], state.theta(p), &mut fit)?;
        for (j, (o, f)) in block.pixel(p).iter().zip(&fit).enumerate() {
            t_sigma[j] += (o - f) * (o - f);
        }
    }
    let mut t_alpha = vec![0.0; m];
    for (i, &t) in state.theta.iter().enumerate() {
        t_alpha[i % m] += t.ln();
    }
    Ok(SummaryStats {
        t_kappa: edge_sum_of_squares(&state.tau, adj),
        t_sigma,
        t_alpha,
    })
}

/// Values of one patch's pixels, listed by block-level pixel index.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchValues<'a> {
    pub global_ids: &'a [usize],
    pub tau: &'a [f64],
    pub theta: &'a [f64],
}

/// Merges patch copies into a block state: `tau` and `theta` are averaged
/// over every patch holding the pixel, and `theta` is renormalized. A pixel
/// whose copies all agree exactly keeps that value unchanged. Patches are
/// accumulated in index order.
pub fn average_overlaps(n_pixels: usize, components: usize, patches: &[PatchValues<'_>]) -> Result<AerosolState> {
    let m = components;
    let mut tau = vec![0.0; n_pixels];
    let mut theta = vec![0.0; n_pixels * m];
    let mut count = vec![0u32; n_pixels];
    // Index of the first copy, used for the agreement check.
    let mut first: Vec<Option<(usize, usize)>> = vec![None; n_pixels];
    let mut agree = vec![true; n_pixels];
    for (k, patch) in patches.iter().enumerate() {
        for (local, &g) in patch.global_ids.iter().enumerate() {
            if g >= n_pixels {
                return Err(Error::config(format!("patch {k} references pixel {g} of {n_pixels}")));
            }
            let t = patch.tau[local];
            let th = &patch.theta[local * m..(local + 1) * m];
            match first[g] {
                None => first[g] = Some((k, local)),
                Some((k0, l0)) => {
                    let p0 = &patches[k0];
                    if p0.tau[l0] != t || &p0.theta[l0 * m..(l0 + 1) * m] != th {
                        agree[g] = false;
                    }
                }
            }
            tau[g] += t;
            for (acc, v) in theta[g * m..(g + 1) * m].iter_mut().zip(th) {
                *acc += v;
            }
            count[g] += 1;
        }
    }
    for g in 0..n_pixels {
        let Some((k0, l0)) = first[g] else {
            return Err(Error::config(format!("pixel {g} is not covered by any patch")));
        };
        if agree[g] {
            tau[g] = patches[k0].tau[l0];
            theta[g * m..(g + 1) * m].copy_from_slice(&patches[k0].theta[l0 * m..(l0 + 1) * m]);
            continue;
        }
        tau[g] /= f64::from(count[g]);
        let row = &mut theta[g * m..(g + 1) * m];
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    AerosolState::new(tau, theta, m)
}

/// Which field the between-round statistics are computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SummarySource {
    /// Every pixel and every edge is read from the patch draw of the patch
    /// in which it lies deepest, so the statistics come from values a patch
    /// sampler actually produced.
    #[default]
    PatchDraws,
    /// The overlap-averaged field. Averaging independent copies lowers
    /// `T_kappa` each round and `kappa` drifts upward.
    Merged,
}

/// Round structure of the parallel sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundConfig {
    pub iterations_per_round: usize,
    pub rounds: usize,
    /// Worker threads; at most the number of patches is useful.
    pub workers: usize,
    pub summaries: SummarySource,
}

impl RoundConfig {
    pub const DEFAULT_ITERATIONS_PER_ROUND: usize = 50;

    /// Enough 50-iteration rounds to cover `iterations` sweeps.
    pub fn for_iterations(iterations: usize, workers: usize) -> Self {
        let per = Self::DEFAULT_ITERATIONS_PER_ROUND;
        Self {
            iterations_per_round: per,
            rounds: iterations.div_ceil(per),
            workers,
            summaries: SummarySource::default(),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.rounds * self.iterations_per_round
    }

    /// Burn-in rounds: `ceil(burn_in / iterations_per_round)`.
    pub fn burn_in_rounds(&self, burn_in: usize) -> usize {
        burn_in.div_ceil(self.iterations_per_round)
    }
}

struct PatchOutput {
    accepts: Vec<IterationAccepts>,
    /// Snapshots `(tau, theta)` at the thinned sample iterations.
    snapshots: Vec<(Vec<f64>, Vec<f64>)>,
}

struct RoundPlan<'s> {
    stats: &'s SummaryStats,
    n_pixels: usize,
    first_iteration: usize,
    iterations: usize,
    burn_in: usize,
    thinning: usize,
    adapt: bool,
    adapt_interval: usize,
}

fn run_patch_round(chain: &mut Chain<'_>, plan: &RoundPlan<'_>) -> Result<PatchOutput> {
    let mut accepts = Vec::with_capacity(plan.iterations);
    let mut snapshots = Vec::new();
    for i in 0..plan.iterations {
        let t = plan.first_iteration + i;
        let outcome = chain.sweep(HyperSource::Frozen(plan.stats, plan.n_pixels))?;
        accepts.push(outcome.accepts);
        if plan.adapt && t <= plan.burn_in && (t % plan.adapt_interval == 0 || t == plan.burn_in) {
            chain.adapt();
        }
        if t > plan.burn_in && (t - plan.burn_in) % plan.thinning == 0 {
            let s = &chain.chain.state;
            snapshots.push((s.tau.clone(), s.theta.clone()));
        }
    }
    Ok(PatchOutput { accepts, snapshots })
}

/// Where each block pixel lives in the patch samplers.
struct Ownership {
    /// Owning patch of each pixel.
    owner: Vec<usize>,
    /// Local index of each pixel in each patch, `usize::MAX` when absent.
    local: Vec<Vec<usize>>,
}

impl Ownership {
    fn new(layout: &PatchLayout, global: &Adjacency, workers: &[Chain<'_>]) -> Self {
        let n = global.n_pixels();
        let owner = (0..n)
            .map(|g| {
                let (r, c) = global.position(g);
                layout.interior_owner(r, c)
            })
            .collect();
        let local = workers
            .iter()
            .map(|w| {
                let mut idx = vec![usize::MAX; n];
                for (l, &g) in w.problem().global_ids().iter().enumerate() {
                    idx[g] = l;
                }
                idx
            })
            .collect();
        Self { owner, local }
    }

    /// Block statistics read from the patch draws. An edge uses the copies of
    /// the owner of its first endpoint, or of its second when the first
    /// owner does not hold both ends.
    fn summaries(
        &self,
        block: &RadianceBlock,
        fm: &dyn ForwardModel,
        global: &Adjacency,
        workers: &[Chain<'_>],
    ) -> Result<SummaryStats> {
        let n = global.n_pixels();
        let m = fm.components();
        let mut tau = Vec::with_capacity(n);
        let mut theta = Vec::with_capacity(n * m);
        for g in 0..n {
            let k = self.owner[g];
            let l = self.local[k][g];
            tau.push(workers[k].chain.state.tau[l]);
            theta.extend_from_slice(workers[k].chain.state.theta(l));
        }
        let owned = AerosolState::new(tau, theta, m)?;
        let mut stats = compute_summaries(block, &owned, fm, global)?;
        let mut t_kappa = 0.0;
        for (a, b) in global.edges() {
            let pick = [self.owner[a], self.owner[b]]
                .into_iter()
                .find(|&k| self.local[k][a] != usize::MAX && self.local[k][b] != usize::MAX);
            let d = match pick {
                Some(k) => {
                    let t = &workers[k].chain.state.tau;
                    t[self.local[k][a]] - t[self.local[k][b]]
                }
                None => owned.tau[a] - owned.tau[b],
            };
            t_kappa += d * d;
        }
        stats.t_kappa = t_kappa;
        Ok(stats)
    }
}

/// Coordinator draw of the global hyperparameters from block-wide statistics.
fn draw_global_hyper(
    hyper: &mut HyperState,
    stats: &SummaryStats,
    n_pixels: usize,
    config: &ChainConfig,
    alpha_step: f64,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let fixed = config.fixed;
    if !fixed.sigma2 {
        for (c, s2) in hyper.sigma2.iter_mut().enumerate() {
            let ssr = stats.t_sigma[c];
            *s2 = match config.sigma2_update {
                Sigma2Update::Conjugate => draw_sigma2(ssr, n_pixels, &config.priors, config.sigma2_floor, rng),
                Sigma2Update::MetropolisHastings => {
                    mh_step_sigma2(*s2, ssr, n_pixels, &config.priors, config.sigma2_floor, rng)
                }
            };
        }
    }
    if !fixed.kappa {
        hyper.kappa = draw_kappa(stats.t_kappa, n_pixels, &config.priors, rng)?;
    }
    if !fixed.alpha {
        for m in 0..hyper.alpha.len() {
            mh_step_alpha(&mut hyper.alpha, m, &stats.t_alpha, n_pixels, alpha_step, rng);
        }
    }
    Ok(())
}

/// Runs the patch-parallel sampler.
///
/// Burn-in covers whole rounds, `ceil(burn_in / iterations_per_round)` of
/// them; sweeps are numbered globally so thinning matches the global
/// sampler. The log-posterior trace is evaluated from each round's summary
/// statistics. Samples hold the merged patch snapshots with the hyperparameters
/// that seeded their round. Results are identical for any worker count.
pub fn run_parallel(
    block: &RadianceBlock,
    fm: &dyn ForwardModel,
    layout: &PatchLayout,
    rounds: &RoundConfig,
    config: &ChainConfig,
    init: &ChainInit,
) -> Result<ChainRecord> {
    check_run_inputs(block, fm, config, init)?;
    if rounds.iterations_per_round == 0 {
        return Err(Error::config("iterations_per_round must be at least 1"));
    }
    if rounds.workers == 0 {
        return Err(Error::config("workers must be at least 1"));
    }
    let (br, bc) = layout.block_shape();
    if (br, bc) != (block.grid().rows(), block.grid().cols()) {
        return Err(Error::config(format!(
            "patch layout covers {br}x{bc}, block is {}x{}",
            block.grid().rows(),
            block.grid().cols()
        )));
    }

    let per = rounds.iterations_per_round;
    let total = rounds.total_iterations();
    let burn_rounds = rounds.burn_in_rounds(config.burn_in);
    let burn_in = burn_rounds * per;
    if !(burn_in < total || total == 0) {
        return Err(Error::config(format!(
            "burn-in of {burn_rounds} rounds leaves no sampling rounds out of {}",
            rounds.rounds
        )));
    }
    let effective = ChainConfig {
        iterations: total,
        burn_in: if total == 0 { 0 } else { burn_in },
        ..config.clone()
    };

    let global = build_adjacency(block.grid());
    let n = block.n_pixels();
    let m = fm.components();
    let n_patches = layout.patches().len();
    let base_stream = config.stream * (n_patches as u64 + 1);
    let mut coord_rng = chain_rng(config.seed, base_stream);

    let mut workers: Vec<Chain<'_>> = Vec::with_capacity(n_patches);
    for (i, patch) in layout.patches().iter().enumerate() {
        let problem = Problem::from_region(block, &global, patch.rows.clone(), patch.cols.clone());
        let state = restrict(&init.state, problem.global_ids());
        let rng = chain_rng(config.seed, base_stream + 1 + i as u64);
        let chain = Chain::new(problem, fm, state, init.hyper.clone(), effective.clone(), rng)
            .map_err(|e| Error::Worker { patch: i, message: e.to_string() })?;
        workers.push(chain);
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rounds.workers)
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;

    let ownership = Ownership::new(layout, &global, &workers);
    let mut record = ChainRecord::empty(n, m, block.channels(), &effective, per, init);
    let mut state = init.state.clone();
    let mut hyper = init.hyper.clone();
    let mut stats = compute_summaries(block, &state, fm, &global)?;
    let priors = config.priors;
    record.log_posterior.push(log_posterior_from_summaries(&stats, &hyper, n, &priors));
    record.kappa_trace.push(hyper.kappa);
    let mut alpha_step = config.alpha_step;

    for round in 0..rounds.rounds {
        for w in workers.iter_mut() {
            let local = restrict(&state, w.problem().global_ids());
            w.reset_state(local, hyper.clone())?;
        }
        let plan = RoundPlan {
            stats: &stats,
            n_pixels: n,
            first_iteration: round * per + 1,
            iterations: per,
            burn_in,
            thinning: config.thinning,
            adapt: config.adapt_acceptance,
            adapt_interval: config.adapt_interval,
        };
        let outputs: Vec<Result<PatchOutput>> =
            pool.install(|| workers.par_iter_mut().map(|w| run_patch_round(w, &plan)).collect());
        let mut collected = Vec::with_capacity(n_patches);
        for (i, out) in outputs.into_iter().enumerate() {
            collected.push(out.map_err(|e| Error::Worker { patch: i, message: e.to_string() })?);
        }

        for i in 0..per {
            let mut sum = IterationAccepts::default();
            for out in &collected {
                let a = out.accepts[i];
                sum.tau.add(a.tau);
                sum.theta.add(a.theta);
                sum.alpha.add(a.alpha);
            }
            record.accept_log.push(sum);
            if plan.first_iteration + i > burn_in {
                record.acceptance.tau.add(sum.tau);
                record.acceptance.theta.add(sum.theta);
                record.acceptance.alpha.add(sum.alpha);
            }
        }

        let n_snap = collected[0].snapshots.len();
        for k in 0..n_snap {
            let values: Vec<PatchValues<'_>> = workers
                .iter()
                .zip(&collected)
                .map(|(w, out)| PatchValues {
                    global_ids: w.problem().global_ids(),
                    tau: &out.snapshots[k].0,
                    theta: &out.snapshots[k].1,
                })
                .collect();
            let merged = average_overlaps(n, m, &values)?;
            record.push_sample(&merged, &hyper);
        }

        let finals: Vec<PatchValues<'_>> = workers
            .iter()
            .map(|w| PatchValues {
                global_ids: w.problem().global_ids(),
                tau: &w.chain.state.tau,
                theta: &w.chain.state.theta,
            })
            .collect();
        state = average_overlaps(n, m, &finals)?;
        stats = match rounds.summaries {
            SummarySource::PatchDraws => ownership.summaries(block, fm, &global, &workers)?,
            SummarySource::Merged => compute_summaries(block, &state, fm, &global)?,
        };
        if config.adapt_acceptance && round < burn_rounds {
            alpha_step = workers[0].tuning().alpha_step;
        }
        draw_global_hyper(&mut hyper, &stats, n, config, alpha_step, &mut coord_rng)?;
        record.log_posterior.push(log_posterior_from_summaries(&stats, &hyper, n, &priors));
        record.kappa_trace.push(hyper.kappa);
    }

    record.tuning = workers.first().map(|w| w.tuning()).unwrap_or(record.tuning);
    record.final_state = state;
    record.final_hyper = hyper;
    Ok(record)
}

fn restrict(state: &AerosolState, ids: &[usize]) -> AerosolState {
    let m = state.components();
    let tau = ids.iter().map(|&g| state.tau[g]).collect();
    let mut theta = Vec::with_capacity(ids.len() * m);
    for &g in ids {
        theta.extend_from_slice(state.theta(g));
    }
    AerosolState::new(tau, theta, m).expect("restriction of a valid state")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Surrogate;
    use crate::lattice::{build_patch_layout, BlockGrid, PatchSpec};
    use crate::model::HyperpriorConstants;

    #[test]
    fn overlap_average_example() {
        let ids = [0usize];
        let a = PatchValues { global_ids: &ids, tau: &[0.2], theta: &[0.5, 0.5, 0.0, 0.0] };
        let b = PatchValues { global_ids: &ids, tau: &[0.4], theta: &[0.3, 0.7, 0.0, 0.0] };
        let merged = average_overlaps(1, 4, &[a, b]).unwrap();
        assert!((merged.tau[0] - 0.3).abs() < 1e-15);
        let want = [0.4, 0.6, 0.0, 0.0];
        for (x, y) in merged.theta.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn agreeing_copies_are_kept_exactly() {
        let ids = [0usize, 1];
        let tau = [0.1 + 0.2, 1.0 / 3.0];
        let theta = [0.1, 0.7, 0.2, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];
        let copies: Vec<PatchValues<'_>> =
            (0..3).map(|_| PatchValues { global_ids: &ids, tau: &tau, theta: &theta }).collect();
        let merged = average_overlaps(2, 3, &copies).unwrap();
        assert_eq!(merged.tau, tau);
        assert_eq!(merged.theta, theta);
    }

    #[test]
    fn uncovered_pixel_is_an_error() {
        let ids = [0usize];
        let a = PatchValues { global_ids: &ids, tau: &[0.2], theta: &[1.0] };
        assert!(average_overlaps(2, 1, &[a]).is_err());
    }

    #[test]
    fn round_arithmetic() {
        let r = RoundConfig::for_iterations(3000, 4);
        assert_eq!(r.rounds, 60);
        assert_eq!(r.burn_in_rounds(1000), 20);
        assert_eq!(r.burn_in_rounds(1001), 21);
        assert_eq!(RoundConfig::for_iterations(120, 1).total_iterations(), 150);
    }

    fn block(rows: usize, cols: usize, fm: &dyn ForwardModel) -> RadianceBlock {
        let grid = BlockGrid::all_clear(rows, cols, 4.4).unwrap();
        let m = fm.components();
        let mut rad = Vec::new();
        for p in 0..rows * cols {
            let tau = 0.5 + 0.3 * ((p as f64) * 0.21).sin();
            rad.extend(fm.eval(tau, &vec![1.0 / m as f64; m]).unwrap());
        }
        RadianceBlock::new(grid, fm.channels(), rad).unwrap()
    }

    #[test]
    fn summaries_match_direct_computation() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let b = block(3, 4, &fm);
        let adj = build_adjacency(b.grid());
        let state = AerosolState::uniform(12, 2, 0.7);
        let s = compute_summaries(&b, &state, &fm, &adj).unwrap();
        assert_eq!(s.t_kappa, 0.0);
        assert!((s.t_alpha[0] - 12.0 * 0.5f64.ln()).abs() < 1e-12);
        let mut ssr = [0.0; 4];
        for p in 0..12 {
            let f = fm.eval(0.7, &[0.5, 0.5]).unwrap();
            for c in 0..4 {
                ssr[c] += (b.pixel(p)[c] - f[c]).powi(2);
            }
        }
        for c in 0..4 {
            assert!((s.t_sigma[c] - ssr[c]).abs() < 1e-15);
        }
        let _ = HyperpriorConstants::default();
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let fm = Surrogate::misr_like(6, 2).unwrap();
        let b = block(8, 12, &fm);
        let spec = PatchSpec { grid_rows: 2, grid_cols: 2, height: 5, width: 7, min_overlap: 1 };
        let layout = build_patch_layout(b.grid(), spec).unwrap();
        let init = ChainInit::default_for(&b, &fm).unwrap();
        let config = ChainConfig { iterations: 40, burn_in: 10, thinning: 2, seed: 3, ..ChainConfig::default() };
        let one = RoundConfig { iterations_per_round: 10, rounds: 4, workers: 1, summaries: SummarySource::PatchDraws };
        let three = RoundConfig { workers: 3, ..one };
        let a = run_parallel(&b, &fm, &layout, &one, &config, &init).unwrap();
        let c = run_parallel(&b, &fm, &layout, &three, &config, &init).unwrap();
        assert_eq!(a, c);
        assert_eq!(a.n_samples(), 15);
        assert_eq!(a.log_posterior.len(), 5);
        assert_eq!(a.acceptance, a.recount_acceptance());
        for tau in &a.tau_samples {
            assert!(tau.iter().all(|t| (0.0..=3.0).contains(t)));
        }
    }

    #[test]
    fn mismatched_layout_is_rejected() {
        let fm = Surrogate::misr_like(4, 2).unwrap();
        let b = block(6, 6, &fm);
        let other = BlockGrid::all_clear(6, 8, 4.4).unwrap();
        let layout = PatchLayout::single(&other);
        let init = ChainInit::default_for(&b, &fm).unwrap();
        let config = ChainConfig { iterations: 20, burn_in: 5, ..ChainConfig::default() };
        let r = RoundConfig::for_iterations(20, 1);
        assert!(run_parallel(&b, &fm, &layout, &r, &config, &init).is_err());
    }
}
