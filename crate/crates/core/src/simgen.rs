//! Synthetic blocks for simulation studies: an AOD field from the intrinsic
//! GMRF, mixing vectors from a Dirichlet, radiances from a forward model plus
//! Gaussian noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dist::sample_dirichlet;
use crate::error::{Error, Result};
use crate::forward::{ForwardModel, TauSupport};
use crate::lattice::{build_adjacency, Adjacency, BlockGrid};
use crate::model::{AerosolState, RadianceBlock};

/// Floor for a simulated radiance that stays negative after redraws.
pub const RADIANCE_FLOOR: f64 = 1e-6;
/// Redraws of a negative noisy radiance before flooring.
pub const MAX_REDRAWS: usize = 100;
/// Fraction of clipped pixels above which a warning is logged.
pub const CLIP_WARN_FRACTION: f64 = 0.01;

/// A rectangle of cloudy cells, half-open in both directions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudRect {
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub rows: usize,
    pub cols: usize,
    pub resolution_km: f64,
    pub clouds: Vec<CloudRect>,
    pub kappa: f64,
    pub alpha: Vec<f64>,
    /// Noise standard deviation as a fraction of each channel's mean
    /// noiseless radiance.
    pub noise_fraction: f64,
    /// Level the zero-mean field is shifted to.
    pub center: f64,
    pub seed: u64,
    /// Sample each connected component of a cloud-split lattice separately.
    pub per_component: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rows: crate::lattice::DEFAULT_ROWS,
            cols: crate::lattice::DEFAULT_COLS,
            resolution_km: 4.4,
            clouds: Vec::new(),
            kappa: 100.0,
            alpha: vec![0.8, 0.4, 0.2, 0.2],
            noise_fraction: 0.10,
            center: 1.0,
            seed: 0,
            per_component: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::config("alpha must be a nonempty vector of positive values"));
        }
        if !(self.noise_fraction.is_finite() && self.noise_fraction >= 0.0) {
            return Err(Error::config(format!(
                "noise_fraction must be nonnegative, got {}",
                self.noise_fraction
            )));
        }
        if !self.center.is_finite() {
            return Err(Error::config("center must be finite"));
        }
        for r in &self.clouds {
            if r.rows.end > self.rows || r.cols.end > self.cols || r.rows.start > r.rows.end || r.cols.start > r.cols.end {
                return Err(Error::config(format!("cloud rectangle {r:?} leaves the {}x{} grid", self.rows, self.cols)));
            }
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BlockGrid> {
        let mut grid = BlockGrid::all_clear(self.rows, self.cols, self.resolution_km)?;
        for r in &self.clouds {
            grid.mask_rect(r.rows.clone(), r.cols.clone());
        }
        Ok(grid)
    }
}

/// A sampled AOD field and how many of its pixels were clipped to the support.
#[derive(Debug, Clone, PartialEq)]
pub struct GmrfDraw {
    pub tau: Vec<f64>,
    pub clipped: usize,
}

/// Draws a zero-mean field from the intrinsic GMRF with precision `kappa`
/// over the clear pixels, without shifting or clipping.
///
/// A fully clear grid uses the separable eigenbasis of the lattice Laplacian.
/// Any other lattice pins one pixel per connected component, samples the
/// remaining proper Gaussian through a banded Cholesky factor and removes the
/// mean; the intrinsic density depends only on differences, so both give the
/// same law. A disconnected lattice is an error unless `per_component`, in
/// which case every component is centered separately.
pub fn sample_gmrf_centered<R: Rng + ?Sized>(
    grid: &BlockGrid,
    adj: &Adjacency,
    kappa: f64,
    per_component: bool,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(Error::config(format!("kappa must be positive, got {kappa}")));
    }
    let n = adj.n_pixels();
    if n == 0 {
        return Ok(Vec::new());
    }
    let (labels, count) = adj.components();
    if count > 1 && !per_component {
        return Err(Error::Degenerate(format!(
            "clear lattice has {count} disconnected components; enable per-component sampling"
        )));
    }
    let mut field = if n == grid.n_cells() {
        separable_draw(grid.rows(), grid.cols(), rng)
    } else {
        pinned_draw(adj, &labels, count, rng)?
    };
    let scale = kappa.sqrt().recip();
    let mut sums = vec![0.0; count];
    let mut sizes = vec![0usize; count];
    for (p, v) in field.iter_mut().enumerate() {
        *v *= scale;
        sums[labels[p]] += *v;
        sizes[labels[p]] += 1;
    }
    for (p, v) in field.iter_mut().enumerate() {
        *v -= sums[labels[p]] / sizes[labels[p]] as f64;
    }
    Ok(field)
}

/// [`sample_gmrf_centered`] shifted by `center` and clipped to `support`.
pub fn sample_gmrf<R: Rng + ?Sized>(
    grid: &BlockGrid,
    adj: &Adjacency,
    kappa: f64,
    center: f64,
    support: TauSupport,
    per_component: bool,
    rng: &mut R,
) -> Result<GmrfDraw> {
    let mut tau = sample_gmrf_centered(grid, adj, kappa, per_component, rng)?;
    let mut clipped = 0;
    for v in tau.iter_mut() {
        let shifted = *v + center;
        let c = shifted.clamp(support.min, support.max);
        clipped += usize::from(c != shifted);
        *v = c;
    }
    if !tau.is_empty() && clipped as f64 > CLIP_WARN_FRACTION * tau.len() as f64 {
        log::warn!("{clipped} of {} simulated AOD values clipped to the support", tau.len());
    }
    Ok(GmrfDraw { tau, clipped })
}

/// Orthonormal eigenvectors of the path-graph Laplacian on `n` nodes:
/// `cos(pi k (i + 1/2) / n)` with eigenvalue `2 - 2 cos(pi k / n)`.
fn path_basis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let nf = n as f64;
    let values = (0..n).map(|k| 2.0 - 2.0 * (PI * k as f64 / nf).cos()).collect();
    let mut vectors = vec![0.0; n * n];
    for k in 0..n {
        let norm = if k == 0 { nf.recip().sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            vectors[k * n + i] = norm * (PI * k as f64 * (i as f64 + 0.5) / nf).cos();
        }
    }
    (values, vectors)
}

/// Unit-precision draw on a fully clear `rows x cols` lattice, row-major.
fn separable_draw<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    let (mu, v) = path_basis(rows);
    let (nu, w) = path_basis(cols);
    // Coefficients z_ij / sqrt(lambda_ij), flat direction removed.
    let mut coef = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            if i == 0 && j == 0 {
                continue;
            }
            let z: f64 = StandardNormal.sample(rng);
            coef[i * cols + j] = z / (mu[i] + nu[j]).sqrt();
        }
    }
    // tmp = coef W, then field = V^T tmp.
    let mut tmp = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let a = coef[i * cols + j];
            if a == 0.0 {
                continue;
            }
            let wj = &w[j * cols..(j + 1) * cols];
            let row = &mut tmp[i * cols..(i + 1) * cols];
            for (t, wv) in row.iter_mut().zip(wj) {
                *t += a * wv;
            }
        }
    }
    let mut field = vec![0.0; rows * cols];
    for i in 0..rows {
        let vi = &v[i * rows..(i + 1) * rows];
        let src = &tmp[i * cols..(i + 1) * cols];
        for (r, &vr) in vi.iter().enumerate() {
            let dst = &mut field[r * cols..(r + 1) * cols];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += vr * s;
            }
        }
    }
    field
}

/// Unit-precision draw with the first pixel of every component pinned at 0.
fn pinned_draw<R: Rng + ?Sized>(adj: &Adjacency, labels: &[usize], count: usize, rng: &mut R) -> Result<Vec<f64>> {
    let n = adj.n_pixels();
    let mut pinned = vec![false; n];
    let mut seen = vec![false; count];
    for p in 0..n {
        if !seen[labels[p]] {
            seen[labels[p]] = true;
            pinned[p] = true;
        }
    }
    let free: Vec<usize> = (0..n).filter(|&p| !pinned[p]).collect();
    let mut index = vec![usize::MAX; n];
    for (i, &p) in free.iter().enumerate() {
        index[p] = i;
    }
    let band = adj
        .edges()
        .filter(|&(p, q)| !pinned[p] && !pinned[q])
        .map(|(p, q)| index[p].abs_diff(index[q]))
        .max()
        .unwrap_or(0);
    let mut chol = BandCholesky::zeros(free.len(), band);
    for (i, &p) in free.iter().enumerate() {
        chol.set(i, i, adj.degree(p) as f64);
        for &q in adj.neighbors(p) {
            if !pinned[q] && index[q] < i {
                chol.set(i, index[q], -1.0);
            }
        }
    }
    chol.factor()?;
    let mut x: Vec<f64> = (0..free.len()).map(|_| StandardNormal.sample(rng)).collect();
    chol.solve_upper(&mut x);
    let mut field = vec![0.0; n];
    for (i, &p) in free.iter().enumerate() {
        field[p] = x[i];
    }
    Ok(field)
}

/// Lower-banded symmetric matrix factored in place as `L L^T`.
struct BandCholesky {
    n: usize,
    band: usize,
    /// Row `i` holds columns `i - band ..= i`.
    data: Vec<f64>,
}

impl BandCholesky {
    fn zeros(n: usize, band: usize) -> Self {
        Self { n, band, data: vec![0.0; n * (band + 1)] }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> usize {
        i * (self.band + 1) + (j + self.band - i)
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.at(i, j);
        self.data[k] = v;
    }

    fn factor(&mut self) -> Result<()> {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.band);
            for j in lo..=i {
                let mut s = self.data[self.at(i, j)];
                for k in lo.max(j.saturating_sub(self.band))..j {
                    s -= self.data[self.at(i, k)] * self.data[self.at(j, k)];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::Degenerate("GMRF precision is not positive definite".into()));
                    }
                    let k = self.at(i, i);
                    self.data[k] = s.sqrt();
                } else {
                    let k = self.at(i, j);
                    self.data[k] = s / self.data[self.at(j, j)];
                }
            }
        }
        Ok(())
    }

    /// Solves `L^T x = b` in place, so `x ~ N(0, (L L^T)^-1)` for white `b`.
    fn solve_upper(&self, x: &mut [f64]) {
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for r in i + 1..(i + self.band + 1).min(self.n) {
                s -= self.data[self.at(r, i)] * x[r];
            }
            x[i] = s / self.data[self.at(i, i)];
        }
    }
}

/// Independent `Dirichlet(alpha)` mixing vectors, pixel-major.
pub fn sample_theta_field<R: Rng + ?Sized>(n_pixels: usize, alpha: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if alpha.is_empty() || alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::config("alpha must be a nonempty vector of positive values"));
    }
    let m = alpha.len();
    let mut theta = vec![0.0; n_pixels * m];
    for p in 0..n_pixels {
        sample_dirichlet(alpha, rng, &mut theta[p * m..(p + 1) * m]);
    }
    Ok(theta)
}

/// A simulated block with its truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub block: RadianceBlock,
    pub truth: AerosolState,
    pub noiseless: Vec<f64>,
    /// Noise standard deviation per channel.
    pub noise_sd: Vec<f64>,
    pub clipped: usize,
}

/// Simulates a block: field, mixing vectors, forward radiances, then noise
/// with standard deviation `noise_fraction` times each channel's mean
/// noiseless radiance. A negative noisy value is redrawn up to
/// [`MAX_REDRAWS`] times, then floored at [`RADIANCE_FLOOR`].
pub fn simulate_block<R: Rng + ?Sized>(config: &SimConfig, fm: &dyn ForwardModel, rng: &mut R) -> Result<Simulation> {
    config.validate()?;
    let m = fm.components();
    if config.alpha.len() != m {
        return Err(Error::config(format!(
            "alpha has {} components, forward model {m}",
            config.alpha.len()
        )));
    }
    let grid = config.grid()?;
    let adj = build_adjacency(&grid);
    let draw = sample_gmrf(&grid, &adj, config.kappa, config.center, fm.support(), config.per_component, rng)?;
    let n = adj.n_pixels();
    let theta = sample_theta_field(n, &config.alpha, rng)?;
    let c = fm.channels();
    let mut noiseless = vec![0.0; n * c];
    for p in 0..n {
        fm.eval_into(draw.tau[p], &theta[p * m..(p + 1) * m], &mut noiseless[p * c..(p + 1) * c])?;
    }
    let mut means = vec![0.0; c];
    for p in 0..n {
        for j in 0..c {
            means[j] += noiseless[p * c + j];
        }
    }
    let noise_sd: Vec<f64> = means.iter().map(|s| config.noise_fraction * s / n.max(1) as f64).collect();
    let mut radiances = noiseless.clone();
    if config.noise_fraction > 0.0 {
        for p in 0..n {
            for j in 0..c {
                let base = noiseless[p * c + j];
                let mut value = RADIANCE_FLOOR;
                for _ in 0..MAX_REDRAWS {
                    let z: f64 = StandardNormal.sample(rng);
                    let v = base + noise_sd[j] * z;
                    if v > 0.0 {
                        value = v;
                        break;
                    }
                }
                radiances[p * c + j] = value;
            }
        }
    }
    let block = RadianceBlock::new(grid, c, radiances)?;
    let truth = AerosolState::new(draw.tau, theta, m)?;
    Ok(Simulation {
        block,
        truth,
        noiseless,
        noise_sd,
        clipped: draw.clipped,
    })
}

/// [`simulate_block`] with the RNG derived from the configured seed.
pub fn simulate_seeded(config: &SimConfig, fm: &dyn ForwardModel) -> Result<Simulation> {
    let mut rng = crate::sampler::chain_rng(config.seed, 0);
    simulate_block(config, fm, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::Surrogate;
    use crate::model::edge_sum_of_squares;
    use crate::sampler::chain_rng;

    #[test]
    fn path_basis_is_orthonormal_eigenbasis() {
        let n = 7;
        let (vals, vecs) = path_basis(n);
        for k in 0..n {
            let v = &vecs[k * n..(k + 1) * n];
            // L v = lambda v for the path Laplacian.
            for i in 0..n {
                let deg = if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
                let mut lv = deg * v[i];
                if i > 0 {
                    lv -= v[i - 1];
                }
                if i + 1 < n {
                    lv -= v[i + 1];
                }
                assert!((lv - vals[k] * v[i]).abs() < 1e-12);
            }
            for l in 0..n {
                let dot: f64 = v.iter().zip(&vecs[l * n..(l + 1) * n]).map(|(a, b)| a * b).sum();
                assert!((dot - f64::from(u8::from(k == l))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn band_cholesky_matches_dense_solution() {
        // Tridiagonal [2 -1; -1 2 -1; -1 2]: check L L^T reproduces it.
        let mut c = BandCholesky::zeros(3, 1);
        for i in 0..3 {
            c.set(i, i, 2.0);
            if i > 0 {
                c.set(i, i - 1, -1.0);
            }
        }
        c.factor().unwrap();
        let l = |i: usize, j: usize| if j + 1 >= i && j <= i { c.data[c.at(i, j)] } else { 0.0 };
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| l(i, k) * l(j, k)).sum();
                let want = if i == j { 2.0 } else if i.abs_diff(j) == 1 { -1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    fn mean_t_kappa(grid: &BlockGrid, kappa: f64, reps: usize, seed: u64) -> f64 {
        let adj = build_adjacency(grid);
        let mut rng = chain_rng(seed, 0);
        (0..reps)
            .map(|_| edge_sum_of_squares(&sample_gmrf_centered(grid, &adj, kappa, false, &mut rng).unwrap(), &adj))
            .sum::<f64>()
            / reps as f64
    }

    #[test]
    fn trace_identity_full_and_masked() {
        let full = BlockGrid::all_clear(16, 24, 4.4).unwrap();
        let p = full.n_cells() as f64;
        let t = mean_t_kappa(&full, 50.0, 200, 1);
        assert!((t - (p - 1.0) / 50.0).abs() < 0.05 * (p - 1.0) / 50.0, "{t}");

        let mut masked = BlockGrid::all_clear(16, 24, 4.4).unwrap();
        masked.mask_rect(3..9, 5..11);
        let p = masked.n_clear() as f64;
        let t = mean_t_kappa(&masked, 50.0, 200, 2);
        assert!((t - (p - 1.0) / 50.0).abs() < 0.05 * (p - 1.0) / 50.0, "{t}");
    }

    #[test]
    fn field_is_centered_and_collapses_for_huge_kappa() {
        let grid = BlockGrid::all_clear(8, 8, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let mut rng = chain_rng(3, 0);
        let f = sample_gmrf_centered(&grid, &adj, 1.0, false, &mut rng).unwrap();
        let mean = f.iter().sum::<f64>() / 64.0;
        let sd = (f.iter().map(|x| x * x).sum::<f64>() / 64.0).sqrt();
        assert!(mean.abs() < 1e-8 * sd);
        let d = sample_gmrf(&grid, &adj, 1e14, 1.0, TauSupport::default(), false, &mut rng).unwrap();
        assert!(d.tau.iter().all(|t| (t - 1.0).abs() < 1e-5));
        assert_eq!(d.clipped, 0);
    }

    #[test]
    fn disconnected_lattice_needs_flag() {
        let mut grid = BlockGrid::all_clear(4, 5, 4.4).unwrap();
        grid.mask_rect(0..4, 2..3);
        let adj = build_adjacency(&grid);
        let mut rng = chain_rng(4, 0);
        assert!(matches!(
            sample_gmrf_centered(&grid, &adj, 1.0, false, &mut rng),
            Err(Error::Degenerate(_))
        ));
        let f = sample_gmrf_centered(&grid, &adj, 1.0, true, &mut rng).unwrap();
        let (labels, _) = adj.components();
        for k in 0..2 {
            let s: f64 = f.iter().zip(&labels).filter(|(_, l)| **l == k).map(|(v, _)| v).sum();
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn clipping_is_counted() {
        let grid = BlockGrid::all_clear(8, 8, 4.4).unwrap();
        let adj = build_adjacency(&grid);
        let mut rng = chain_rng(5, 0);
        let d = sample_gmrf(&grid, &adj, 0.5, 0.0, TauSupport::default(), false, &mut rng).unwrap();
        assert!(d.clipped > 0);
        assert!(d.tau.iter().all(|t| (0.0..=3.0).contains(t)));
    }

    #[test]
    fn noiseless_simulation_matches_forward_model() {
        let fm = Surrogate::misr_like(8, 4).unwrap();
        let config = SimConfig { rows: 6, cols: 7, noise_fraction: 0.0, ..SimConfig::default() };
        let sim = simulate_seeded(&config, &fm).unwrap();
        assert_eq!(sim.block.radiances(), &sim.noiseless[..]);
        for p in 0..42 {
            assert_eq!(sim.block.pixel(p), &fm.eval(sim.truth.tau[p], sim.truth.theta(p)).unwrap()[..]);
        }
    }

    #[test]
    fn simulation_is_reproducible_and_respects_clouds() {
        let fm = Surrogate::misr_like(8, 4).unwrap();
        let config = SimConfig {
            rows: 10,
            cols: 12,
            clouds: vec![CloudRect { rows: 2..4, cols: 3..6 }],
            seed: 11,
            ..SimConfig::default()
        };
        let a = simulate_seeded(&config, &fm).unwrap();
        let b = simulate_seeded(&config, &fm).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.block.n_pixels(), 114);
        assert!(a.block.radiances().iter().all(|v| *v > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { kappa: 0.0, ..SimConfig::default() }.validate().is_err());
        assert!(SimConfig { alpha: vec![1.0, -1.0], ..SimConfig::default() }.validate().is_err());
        let bad = SimConfig { clouds: vec![CloudRect { rows: 0..40, cols: 0..1 }], ..SimConfig::default() };
        assert!(bad.validate().is_err());
        let fm = Surrogate::misr_like(4, 2).unwrap();
        assert!(simulate_seeded(&SimConfig::default(), &fm).is_err());
    }
}
