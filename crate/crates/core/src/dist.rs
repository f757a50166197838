//! Sampling helpers not covered by `rand_distr` in the form the sampler needs.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::gamma::ln_gamma;

/// Log of a gamma variate with unit scale.
///
/// For shape < 1 uses `G(a) = G(a + 1) * U^(1/a)` in log space, so draws with
/// tiny shape do not underflow to zero before normalization.
fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("positive shape").sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("positive shape").sample(rng);
        let u: f64 = rng.random::<f64>();
        // `random` is in [0, 1); map a zero to the smallest positive double.
        let u = if u > 0.0 { u } else { f64::MIN_POSITIVE };
        g.ln() + u.ln() / shape
    }
}

/// Draws a Dirichlet(alpha) vector into `out`.
///
/// Components can still underflow to exactly zero when some shape is far
/// below one; callers treat such draws as falling outside the target support.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R, out: &mut [f64]) {
    debug_assert_eq!(alpha.len(), out.len());
    let mut max = f64::NEG_INFINITY;
    for (o, &a) in out.iter_mut().zip(alpha) {
        *o = log_gamma_variate(a, rng);
        max = max.max(*o);
    }
    let mut sum = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Log density of Dirichlet(alpha) at `x`. Returns `-inf` when a component is
/// exactly zero and its shape differs from one.
pub fn dirichlet_ln_pdf(x: &[f64], alpha: &[f64]) -> f64 {
    let mut total = 0.0;
    let mut norm = 0.0;
    for &a in alpha {
        norm += ln_gamma(a);
        total += a;
    }
    let mut value = ln_gamma(total) - norm;
    for (&xi, &a) in x.iter().zip(alpha) {
        if a == 1.0 {
            continue;
        }
        if xi <= 0.0 {
            return f64::NEG_INFINITY;
        }
        value += (a - 1.0) * xi.ln();
    }
    value
}

/// Draws from Normal(mean, sd) truncated to `[lo, hi]`.
///
/// Plain rejection is used while it is efficient; otherwise inverse-CDF
/// sampling on the tail nearest the interval.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, sd: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    debug_assert!(lo < hi && sd > 0.0);
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    // Rejection accepts with probability >= ~0.3 when the interval contains
    // the mean or reaches within half a standard deviation of it.
    if a < 0.5 && b > -0.5 && b - a > 1.0 {
        for _ in 0..64 {
            let z: f64 = StandardNormal.sample(rng);
            if z >= a && z <= b {
                return mean + sd * z;
            }
        }
    }
    let std = Normal::standard();
    let z = if a > 0.0 {
        // Upper tail: work with survival probabilities to keep precision.
        let (sa, sb) = (std.sf(a), std.sf(b));
        if sa <= 0.0 {
            a
        } else {
            let u = sb + (sa - sb) * rng.random::<f64>();
            -std.inverse_cdf(u)
        }
    } else {
        let (ca, cb) = (std.cdf(a), std.cdf(b));
        if cb <= 0.0 {
            b
        } else {
            let u = ca + (cb - ca) * rng.random::<f64>();
            std.inverse_cdf(u)
        }
    };
    (mean + sd * z.clamp(a, b)).clamp(lo, hi)
}
