//! Convergence and mixing diagnostics over recorded chains.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::sampler::{AcceptanceCounts, ChainRecord, Counter};

/// Acceptance band the proposal tuning aims for.
pub const ACCEPTANCE_BAND: (f64, f64) = (0.25, 0.50);

/// Potential scale reduction of `m >= 2` chains of equal length `n >= 2`:
/// `sqrt(((n - 1)/n W + B/n) / W)`, with `W` the mean within-chain variance
/// and `B/n` the variance of the chain means.
///
/// Returns `+inf` when `W = 0 < B` and `1` when both vanish.
pub fn compute_rhat(chains: &[&[f64]]) -> Result<f64> {
    if chains.len() < 2 {
        return Err(Error::config("R-hat needs at least two chains"));
    }
    let n = chains[0].len();
    if n < 2 {
        return Err(Error::config("R-hat needs chains of length at least 2"));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::config("R-hat needs chains of equal length"));
    }
    let m = chains.len() as f64;
    let nf = n as f64;
    let means: Vec<f64> = chains.iter().map(|c| c.iter().sum::<f64>() / nf).collect();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / m;
    let grand = means.iter().sum::<f64>() / m;
    let b_over_n = means.iter().map(|mu| (mu - grand).powi(2)).sum::<f64>() / (m - 1.0);
    if w == 0.0 {
        return Ok(if b_over_n > 0.0 { f64::INFINITY } else { 1.0 });
    }
    Ok((((nf - 1.0) / nf * w + b_over_n) / w).sqrt())
}

/// Post-burn-in log-posterior trace of a record.
pub fn post_burn_in_trace(record: &ChainRecord) -> &[f64] {
    let skip = record.burn_in / record.trace_stride.max(1) + 1;
    &record.log_posterior[skip.min(record.log_posterior.len())..]
}

/// R-hat of the post-burn-in log-posterior over several chains.
pub fn rhat_log_posterior(records: &[ChainRecord]) -> Result<f64> {
    let traces: Vec<&[f64]> = records.iter().map(post_burn_in_trace).collect();
    compute_rhat(&traces)
}

/// R-hat of every pixel's `tau` over the retained samples of several chains.
pub fn rhat_per_pixel(records: &[ChainRecord]) -> Result<Vec<f64>> {
    let first = records.first().ok_or_else(|| Error::config("no chains"))?;
    let mut out = Vec::with_capacity(first.n_pixels);
    let mut series = vec![Vec::new(); records.len()];
    for p in 0..first.n_pixels {
        for (s, r) in series.iter_mut().zip(records) {
            s.clear();
            s.extend(r.tau_samples.iter().map(|t| t[p]));
        }
        let refs: Vec<&[f64]> = series.iter().map(Vec::as_slice).collect();
        out.push(compute_rhat(&refs)?);
    }
    Ok(out)
}

/// Acceptance rate of one kernel family; `None` when nothing was attempted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelRate {
    pub counter: Counter,
    pub rate: Option<f64>,
}

impl KernelRate {
    fn new(counter: Counter) -> Self {
        Self { counter, rate: counter.rate() }
    }

    /// Whether the rate lies outside [`ACCEPTANCE_BAND`]. An absent rate is
    /// not flagged.
    pub fn flagged(&self) -> bool {
        self.rate.is_some_and(|r| r < ACCEPTANCE_BAND.0 || r > ACCEPTANCE_BAND.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcceptanceReport {
    pub tau: KernelRate,
    pub theta: KernelRate,
    pub alpha: KernelRate,
}

pub fn acceptance_report(counts: &AcceptanceCounts) -> AcceptanceReport {
    AcceptanceReport {
        tau: KernelRate::new(counts.tau),
        theta: KernelRate::new(counts.theta),
        alpha: KernelRate::new(counts.alpha),
    }
}

/// Post-burn-in acceptance pooled over several chains.
pub fn pooled_acceptance(records: &[ChainRecord]) -> AcceptanceReport {
    let mut total = AcceptanceCounts::default();
    for r in records {
        total.add(&r.acceptance);
    }
    acceptance_report(&total)
}

/// Biased sample autocorrelation at lags `0..=max_lag`, normalized so lag 0
/// is 1. A constant series has no defined autocorrelation beyond lag 0.
pub fn autocorrelation(series: &[f64], max_lag: usize) -> Result<Vec<Option<f64>>> {
    let n = series.len();
    if n <= max_lag {
        return Err(Error::config(format!("series of length {n} is too short for lag {max_lag}")));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(Some(1.0));
    for k in 1..=max_lag {
        if c0 == 0.0 {
            out.push(None);
            continue;
        }
        let ck: f64 = (0..n - k).map(|i| (series[i] - mean) * (series[i + k] - mean)).sum();
        out.push(Some((ck / c0).clamp(-1.0, 1.0)));
    }
    Ok(out)
}

/// Percentile levels reported by [`summarize`].
pub const PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

/// Nearest-rank percentile of sorted data: the value of rank
/// `ceil(q/100 N)`, at least 1.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = ((q / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Mean, standard deviation (`n - 1` denominator, zero for one value) and
/// nearest-rank percentiles of a scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarSummary {
    pub mean: f64,
    pub sd: f64,
    pub percentiles: [f64; 5],
}

impl ScalarSummary {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("cannot summarize an empty sample"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() > 1 {
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let percentiles = PERCENTILES.map(|q| nearest_rank(&sorted, q));
        Ok(Self { mean, sd, percentiles })
    }
}

/// Posterior summary over the retained samples of one or more chains.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSummary {
    pub n_samples: usize,
    pub components: usize,
    pub tau: Vec<ScalarSummary>,
    /// Pixel-major, component-minor.
    pub theta_mean: Vec<f64>,
    pub theta_sd: Vec<f64>,
    pub kappa: ScalarSummary,
    pub alpha: Vec<ScalarSummary>,
    pub sigma2: Vec<ScalarSummary>,
}

impl PosteriorSummary {
    pub fn tau_mean(&self) -> Vec<f64> {
        self.tau.iter().map(|s| s.mean).collect()
    }
}

pub fn summarize(record: &ChainRecord) -> Result<PosteriorSummary> {
    summarize_many(std::slice::from_ref(record))
}

/// Summary over the pooled samples of several chains on the same block.
pub fn summarize_many(records: &[ChainRecord]) -> Result<PosteriorSummary> {
    let first = records.first().ok_or_else(|| Error::config("no chains to summarize"))?;
    let n_samples: usize = records.iter().map(ChainRecord::n_samples).sum();
    if n_samples == 0 {
        return Err(Error::config("chain record holds no retained samples"));
    }
    if records.iter().any(|r| r.n_pixels != first.n_pixels || r.components != first.components) {
        return Err(Error::config("chains cover different blocks"));
    }
    let (n_pixels, m) = (first.n_pixels, first.components);
    let column = |f: &dyn Fn(&ChainRecord, usize) -> f64| -> Vec<f64> {
        records
            .iter()
            .flat_map(|r| (0..r.n_samples()).map(move |s| (r, s)))
            .map(|(r, s)| f(r, s))
            .collect()
    };
    let mut tau = Vec::with_capacity(n_pixels);
    let mut theta_mean = Vec::with_capacity(n_pixels * m);
    let mut theta_sd = Vec::with_capacity(n_pixels * m);
    for p in 0..n_pixels {
        tau.push(ScalarSummary::from_values(&column(&|r, s| r.tau_samples[s][p]))?);
        for k in 0..m {
            let s = ScalarSummary::from_values(&column(&|r, s| r.theta_samples[s][p * m + k]))?;
            theta_mean.push(s.mean);
            theta_sd.push(s.sd);
        }
    }
    let kappa = ScalarSummary::from_values(&column(&|r, s| r.kappa_samples[s]))?;
    let alpha = (0..m)
        .map(|k| ScalarSummary::from_values(&column(&|r, s| r.alpha_samples[s][k])))
        .collect::<Result<_>>()?;
    let sigma2 = (0..first.channels)
        .map(|c| ScalarSummary::from_values(&column(&|r, s| r.sigma2_samples[s][c])))
        .collect::<Result<_>>()?;
    Ok(PosteriorSummary {
        n_samples,
        components: m,
        tau,
        theta_mean,
        theta_sd,
        kappa,
        alpha,
        sigma2,
    })
}

/// Chain-level diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub chains: usize,
    /// R-hat of the log-posterior; absent for a single chain.
    pub rhat: Option<f64>,
    pub acceptance: AcceptanceReport,
    /// Autocorrelation of the first chain's post-burn-in log-posterior at
    /// lags `1..=L`.
    pub acf: Vec<Option<f64>>,
}

const REPORT_HEADER: &str = "aod-diagnostics 1";

impl DiagnosticsReport {
    /// Diagnostics of chains run on the same block. The autocorrelation is
    /// truncated to lags the trace can support.
    pub fn from_records(records: &[ChainRecord], max_lag: usize) -> Result<Self> {
        let first = records.first().ok_or_else(|| Error::config("no chains"))?;
        let rhat = if records.len() >= 2 { Some(rhat_log_posterior(records)?) } else { None };
        let trace = post_burn_in_trace(first);
        let lag = max_lag.min(trace.len().saturating_sub(1));
        let acf = if trace.is_empty() { Vec::new() } else { autocorrelation(trace, lag)?.split_off(1) };
        Ok(Self {
            chains: records.len(),
            rhat,
            acceptance: pooled_acceptance(records),
            acf,
        })
    }

    pub fn converged(&self, threshold: f64) -> bool {
        self.rhat.is_none_or(|r| r < threshold)
    }

    /// Key-value text, one `key value` pair per line after a header line.
    ///
    /// Keys: `chains`; `rhat_log_posterior`, `rhat_below_1.1`,
    /// `rhat_below_1.2`; for each kernel `k` in `tau`, `theta`, `alpha`:
    /// `accepted_k`, `attempted_k`, `acceptance_k`, `acceptance_k_flagged`;
    /// `acf_lags` and `acf_lag_1` ... `acf_lag_L`. Undefined values are
    /// written as `absent`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |v: Option<f64>| v.map_or_else(|| "absent".to_string(), |x| format!("{x:?}"));
        writeln!(s, "{REPORT_HEADER}").unwrap();
        writeln!(s, "chains {}", self.chains).unwrap();
        writeln!(s, "rhat_log_posterior {}", opt(self.rhat)).unwrap();
        for t in ["1.1", "1.2"] {
            let below = self.rhat.map(|r| r < t.parse::<f64>().unwrap());
            writeln!(s, "rhat_below_{t} {}", below.map_or("absent".into(), |b| b.to_string())).unwrap();
        }
        for (name, k) in [("tau", &self.acceptance.tau), ("theta", &self.acceptance.theta), ("alpha", &self.acceptance.alpha)] {
            writeln!(s, "accepted_{name} {}", k.counter.accepted).unwrap();
            writeln!(s, "attempted_{name} {}", k.counter.attempted).unwrap();
            writeln!(s, "acceptance_{name} {}", opt(k.rate)).unwrap();
            writeln!(s, "acceptance_{name}_flagged {}", k.flagged()).unwrap();
        }
        writeln!(s, "acf_lags {}", self.acf.len()).unwrap();
        for (i, v) in self.acf.iter().enumerate() {
            writeln!(s, "acf_lag_{} {}", i + 1, opt(*v)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, l)) if l == REPORT_HEADER => {}
            _ => return Err(Error::parse(1, format!("expected `{REPORT_HEADER}`"))),
        }
        let mut map = std::collections::BTreeMap::new();
        for (no, line) in lines {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse(no, format!("expected `key value`, got `{line}`")))?;
            map.insert(k.to_string(), (no, v.to_string()));
        }
        let get = |k: &str| -> Result<(usize, String)> {
            map.get(k).cloned().ok_or_else(|| Error::parse(0, format!("missing key `{k}`")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            let (no, v) = get(k)?;
            if v == "absent" {
                return Ok(None);
            }
            v.parse().map(Some).map_err(|_| Error::parse(no, format!("bad number `{v}` for `{k}`")))
        };
        let int = |k: &str| -> Result<u64> {
            let (no, v) = get(k)?;
            v.parse().map_err(|_| Error::parse(no, format!("bad count `{v}` for `{k}`")))
        };
        let rate = |name: &str| -> Result<KernelRate> {
            let counter = Counter {
                accepted: int(&format!("accepted_{name}"))?,
                attempted: int(&format!("attempted_{name}"))?,
            };
            let rate = opt(&format!("acceptance_{name}"))?;
            Ok(KernelRate { counter, rate })
        };
        let lags = int("acf_lags")? as usize;
        let acf = (1..=lags).map(|i| opt(&format!("acf_lag_{i}"))).collect::<Result<_>>()?;
        Ok(Self {
            chains: int("chains")? as usize,
            rhat: opt("rhat_log_posterior")?,
            acceptance: AcceptanceReport {
                tau: rate("tau")?,
                theta: rate("theta")?,
                alpha: rate("alpha")?,
            },
            acf,
        })
    }
}
