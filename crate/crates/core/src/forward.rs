//! Forward models mapping `(tau, theta)` to simulated radiances in every channel.
//!
//! Two backends are provided: an analytic exponential-saturation [`Surrogate`]
//! and a [`RadianceTable`] of pure-component radiances on a `tau` grid,
//! linearly interpolated in `tau` and mixed linearly in `theta`.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default number of channels (9 view angles x 4 bands).
pub const DEFAULT_CHANNELS: usize = 36;
/// Default number of component aerosols.
pub const DEFAULT_COMPONENTS: usize = 4;

/// Tolerance on `|sum(theta) - 1|` accepted by the forward models.
pub const SIMPLEX_TOLERANCE: f64 = 1e-8;

/// Closed interval of admissible AOD values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TauSupport {
    pub min: f64,
    pub max: f64,
}

impl TauSupport {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(Error::config(format!("invalid tau support [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, tau: f64) -> bool {
        tau >= self.min && tau <= self.max
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    /// `min + q * (max - min)`.
    pub fn quantile(&self, q: f64) -> f64 {
        self.min + q * self.width()
    }
}

impl Default for TauSupport {
    fn default() -> Self {
        Self { min: 0.0, max: 3.0 }
    }
}

/// Evaluator of simulated top-of-atmosphere radiances.
///
/// Implementations are deterministic, return finite positive radiances on
/// their support and are continuous in both arguments.
pub trait ForwardModel: Send + Sync {
    fn channels(&self) -> usize;

    fn components(&self) -> usize;

    fn support(&self) -> TauSupport;

    /// Writes the `channels()` radiances at `(tau, theta)` into `out`.
    fn eval_into(&self, tau: f64, theta: &[f64], out: &mut [f64]) -> Result<()>;

    fn eval(&self, tau: f64, theta: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels()];
        self.eval_into(tau, theta, &mut out)?;
        Ok(out)
    }
}

pub(crate) fn check_inputs(support: TauSupport, components: usize, tau: f64, theta: &[f64]) -> Result<()> {
    if !support.contains(tau) {
        return Err(Error::domain(format!(
            "tau {tau} outside support [{}, {}]",
            support.min, support.max
        )));
    }
    check_simplex(theta, components, SIMPLEX_TOLERANCE)
}

/// Checks that `theta` is a point of the `components`-simplex.
pub fn check_simplex(theta: &[f64], components: usize, tol: f64) -> Result<()> {
    if theta.len() != components {
        return Err(Error::domain(format!(
            "mixing vector has {} components, expected {components}",
            theta.len()
        )));
    }
    let mut sum = 0.0;
    for &t in theta {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("negative or NaN mixing weight {t}")));
        }
        sum += t;
    }
    if (sum - 1.0).abs() > tol {
        return Err(Error::domain(format!("mixing vector sums to {sum}")));
    }
    Ok(())
}

/// Parameters of the exponential-saturation surrogate, stored channel-major
/// (`index = channel * components + component`).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateParams {
    pub channels: usize,
    pub components: usize,
    /// Extinction efficiency `E[c][m] > 0`.
    pub extinction: Vec<f64>,
    /// Path-radiance saturation level `P[c][m] > 0`.
    pub path: Vec<f64>,
    /// Surface-leaving radiance `S[c] >= 0`.
    pub surface: Vec<f64>,
    pub support: TauSupport,
}

// Nominal view zenith angles (degrees) of the nine cameras, fore to aft.
const VIEW_ZENITH: [f64; 9] = [70.5, 60.0, 45.6, 26.1, 0.0, 26.1, 45.6, 60.0, 70.5];
const VIEW_FORE: [f64; 9] = [1.0, 1.0, 1.0, 1.0, 0.0, -1.0, -1.0, -1.0, -1.0];
const BAND_NM: [f64; 4] = [446.0, 558.0, 672.0, 867.0];
const BAND_BRIGHTNESS: [f64; 4] = [1.0, 0.85, 0.7, 0.5];
const BAND_SURFACE: [f64; 4] = [0.025, 0.04, 0.05, 0.09];

// Per component: Angstrom exponent, brightness, forward-scattering asymmetry.
// Fine non-absorbing, fine non-absorbing with sulfate, absorbing, dust.
const COMPONENT_SHAPE: [(f64, f64, f64); 4] = [
    (2.0, 0.16, 0.25),
    (1.2, 0.11, -0.15),
    (1.6, 0.03, 0.05),
    (0.1, 0.13, 0.6),
];

impl SurrogateParams {
    /// Deterministic MISR-like parameters: channel `c = angle * 4 + band`.
    ///
    /// Extinction grows with air mass and follows an Angstrom law per
    /// component; path radiance depends on band brightness and on a
    /// component-specific fore/aft asymmetry, so the components have distinct
    /// multi-angle spectral signatures. Only `components <= 4` is supported;
    /// `channels` cycles through the 36 angle/band pairs.
    pub fn misr_like(channels: usize, components: usize) -> Result<Self> {
        if channels == 0 || components == 0 || components > COMPONENT_SHAPE.len() {
            return Err(Error::config(format!(
                "misr-like surrogate needs channels >= 1 and 1..=4 components, got {channels}, {components}"
            )));
        }
        let mut extinction = Vec::with_capacity(channels * components);
        let mut path = Vec::with_capacity(channels * components);
        let mut surface = Vec::with_capacity(channels);
        for c in 0..channels {
            let angle = (c / 4) % 9;
            let band = c % 4;
            let air_mass = 1.0 / VIEW_ZENITH[angle].to_radians().cos();
            let scatter = VIEW_ZENITH[angle].to_radians().sin() * VIEW_FORE[angle];
            for &(angstrom, bright, asym) in &COMPONENT_SHAPE[..components] {
                extinction.push(0.35 * air_mass * (BAND_NM[band] / 558.0).powf(-angstrom));
                path.push(bright * BAND_BRIGHTNESS[band] * (1.0 + asym * scatter) * air_mass.sqrt());
            }
            surface.push(BAND_SURFACE[band] * (1.0 - 0.1 * scatter));
        }
        let params = Self {
            channels,
            components,
            extinction,
            path,
            surface,
            support: TauSupport::default(),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let cm = self.channels * self.components;
        if self.channels == 0 || self.components == 0 {
            return Err(Error::config("surrogate needs at least one channel and component"));
        }
        if self.extinction.len() != cm || self.path.len() != cm || self.surface.len() != self.channels {
            return Err(Error::config("surrogate parameter arrays have wrong dimensions"));
        }
        if self.extinction.iter().chain(&self.path).any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::config("surrogate extinction and path values must be finite and positive"));
        }
        if self.surface.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
            return Err(Error::config("surrogate surface values must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Analytic surrogate:
/// `L_c = S_c exp(-tau k_c) + A_c (1 - exp(-tau k_c))` with
/// `k_c = sum_m theta_m E_cm` and `A_c = sum_m theta_m P_cm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    params: SurrogateParams,
}

impl Surrogate {
    pub fn new(params: SurrogateParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn misr_like(channels: usize, components: usize) -> Result<Self> {
        Self::new(SurrogateParams::misr_like(channels, components)?)
    }

    pub fn params(&self) -> &SurrogateParams {
        &self.params
    }
}

impl ForwardModel for Surrogate {
    fn channels(&self) -> usize {
        self.params.channels
    }

    fn components(&self) -> usize {
        self.params.components
    }

    fn support(&self) -> TauSupport {
        self.params.support
    }

    fn eval_into(&self, tau: f64, theta: &[f64], out: &mut [f64]) -> Result<()> {
        let p = &self.params;
        check_inputs(p.support, p.components, tau, theta)?;
        let m = p.components;
        for (c, o) in out.iter_mut().enumerate().take(p.channels) {
            let ext = &p.extinction[c * m..(c + 1) * m];
            let path = &p.path[c * m..(c + 1) * m];
            let mut k = 0.0;
            let mut a = 0.0;
            for j in 0..m {
                k += theta[j] * ext[j];
                a += theta[j] * path[j];
            }
            let t = (-tau * k).exp();
            *o = p.surface[c] * t + a * (1.0 - t);
        }
        Ok(())
    }
}

/// Pure-component radiances on a grid of `tau` nodes, stored node-major, then
/// component, then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RadianceTable {
    channels: usize,
    components: usize,
    labels: Vec<String>,
    tau_nodes: Vec<f64>,
    values: Vec<f64>,
}

fn check_nodes(nodes: &[f64]) -> Result<()> {
    if nodes.len() < 2 {
        return Err(Error::config("a radiance table needs at least two tau nodes"));
    }
    if nodes.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("tau nodes must be finite"));
    }
    if nodes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("tau nodes must be strictly increasing"));
    }
    Ok(())
}

impl RadianceTable {
    pub fn new(
        channels: usize,
        components: usize,
        labels: Vec<String>,
        tau_nodes: Vec<f64>,
        values: Vec<f64>,
    ) -> Result<Self> {
        check_nodes(&tau_nodes)?;
        if channels == 0 || components == 0 {
            return Err(Error::config("table needs at least one channel and component"));
        }
        if labels.len() != components {
            return Err(Error::config(format!(
                "table has {} labels for {components} components",
                labels.len()
            )));
        }
        if labels.iter().any(|l| l.is_empty() || l.chars().any(char::is_whitespace)) {
            return Err(Error::config("component labels must be nonempty and free of whitespace"));
        }
        let expected = tau_nodes.len() * components * channels;
        if values.len() != expected {
            return Err(Error::config(format!(
                "table has {} values, expected {expected}",
                values.len()
            )));
        }
        if values.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::config("table radiances must be finite and positive"));
        }
        Ok(Self {
            channels,
            components,
            labels,
            tau_nodes,
            values,
        })
    }

    pub fn tau_nodes(&self) -> &[f64] {
        &self.tau_nodes
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Radiance of pure component `m` in channel `c` at node `i`.
    pub fn value(&self, node: usize, component: usize, channel: usize) -> f64 {
        self.values[(node * self.components + component) * self.channels + channel]
    }

    /// Writes the table in its text format. Floats use the shortest decimal
    /// representation that reads back to the same bits.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut body = String::new();
        let _ = writeln!(body, "aod-radiance-table 1");
        let _ = writeln!(body, "channels {}", self.channels);
        let _ = writeln!(body, "components {}", self.components);
        let _ = writeln!(body, "labels {}", self.labels.join(" "));
        let nodes: Vec<String> = self.tau_nodes.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(body, "tau_nodes {}", nodes.join(" "));
        let _ = writeln!(body, "values {}", self.values.len());
        for v in &self.values {
            let _ = writeln!(body, "{v:?}");
        }
        let digest = Sha256::digest(body.as_bytes());
        w.write_all(body.as_bytes())?;
        writeln!(w, "checksum sha256 {}", hex::encode(digest))?;
        Ok(())
    }

    /// Reads a table written by [`RadianceTable::write`], verifying the checksum.
    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = Vec::new();
        for line in r.lines() {
            lines.push(line?);
        }
        let Some((last, body_lines)) = lines.split_last() else {
            return Err(Error::parse(1, "empty table file"));
        };
        let n_lines = lines.len();
        let mut body = String::new();
        for l in body_lines {
            body.push_str(l);
            body.push('\n');
        }
        let expected = last
            .strip_prefix("checksum sha256 ")
            .ok_or_else(|| Error::parse(n_lines, "missing checksum line"))?;
        let digest = hex::encode(Sha256::digest(body.as_bytes()));
        if digest != expected {
            return Err(Error::parse(n_lines, "checksum mismatch"));
        }

        let mut it = body_lines.iter().enumerate().map(|(i, l)| (i + 1, l.as_str()));
        let mut field = |key: &str| -> Result<(usize, String)> {
            let (ln, l) = it.next().ok_or_else(|| Error::parse(n_lines, format!("missing `{key}`")))?;
            let rest = if l == key {
                ""
            } else {
                l.strip_prefix(key)
                    .and_then(|r| r.strip_prefix(' '))
                    .ok_or_else(|| Error::parse(ln, format!("expected `{key}`")))?
            };
            Ok((ln, rest.to_string()))
        };
        let (ln, version) = field("aod-radiance-table")?;
        if version != "1" {
            return Err(Error::parse(ln, format!("unsupported version {version}")));
        }
        let (ln, v) = field("channels")?;
        let channels: usize = v.parse().map_err(|_| Error::parse(ln, "bad channel count"))?;
        let (ln, v) = field("components")?;
        let components: usize = v.parse().map_err(|_| Error::parse(ln, "bad component count"))?;
        let (_, v) = field("labels")?;
        let labels: Vec<String> = v.split(' ').map(str::to_string).collect();
        let (ln, v) = field("tau_nodes")?;
        let tau_nodes = v
            .split(' ')
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(ln, "bad tau node"))?;
        let (ln, v) = field("values")?;
        let count: usize = v.parse().map_err(|_| Error::parse(ln, "bad value count"))?;
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, l) = it.next().ok_or_else(|| Error::parse(n_lines, "truncated value list"))?;
            values.push(l.parse::<f64>().map_err(|_| Error::parse(ln, format!("bad value `{l}`")))?);
        }
        if let Some((ln, _)) = it.next() {
            return Err(Error::parse(ln, "unexpected trailing content"));
        }
        Self::new(channels, components, labels, tau_nodes, values).map_err(|e| Error::parse(n_lines, e.to_string()))
    }
}

impl ForwardModel for RadianceTable {
    fn channels(&self) -> usize {
        self.channels
    }

    fn components(&self) -> usize {
        self.components
    }

    fn support(&self) -> TauSupport {
        TauSupport {
            min: self.tau_nodes[0],
            max: *self.tau_nodes.last().expect("at least two nodes"),
        }
    }

    fn eval_into(&self, tau: f64, theta: &[f64], out: &mut [f64]) -> Result<()> {
        check_inputs(self.support(), self.components, tau, theta)?;
        let nodes = &self.tau_nodes;
        // Segment i with nodes[i] <= tau <= nodes[i + 1].
        let i = (nodes.partition_point(|&n| n <= tau) - 1).min(nodes.len() - 2);
        let w = (tau - nodes[i]) / (nodes[i + 1] - nodes[i]);
        let (m_count, c_count) = (self.components, self.channels);
        let out = &mut out[..c_count];
        out.fill(0.0);
        for (m, &weight) in theta.iter().enumerate() {
            let lo = &self.values[(i * m_count + m) * c_count..][..c_count];
            let hi = &self.values[((i + 1) * m_count + m) * c_count..][..c_count];
            for c in 0..c_count {
                let pure = (1.0 - w) * lo[c] + w * hi[c];
                out[c] += weight * pure;
            }
        }
        Ok(())
    }
}

/// Tabulates the surrogate's pure-component radiances at `tau_nodes`.
pub fn build_table_from_surrogate(params: &SurrogateParams, tau_nodes: &[f64]) -> Result<RadianceTable> {
    check_nodes(tau_nodes)?;
    let surrogate = Surrogate::new(params.clone())?;
    let support = params.support;
    if tau_nodes[0] < support.min || tau_nodes[tau_nodes.len() - 1] > support.max {
        return Err(Error::config("tau nodes extend beyond the surrogate support"));
    }
    let (m, c) = (params.components, params.channels);
    let mut values = Vec::with_capacity(tau_nodes.len() * m * c);
    let mut theta = vec![0.0; m];
    let mut out = vec![0.0; c];
    for &tau in tau_nodes {
        for j in 0..m {
            theta.fill(0.0);
            theta[j] = 1.0;
            surrogate.eval_into(tau, &theta, &mut out)?;
            values.extend_from_slice(&out);
        }
    }
    let labels = (0..m).map(|j| format!("component{}", j + 1)).collect();
    RadianceTable::new(c, m, labels, tau_nodes.to_vec(), values)
}

/// `count` equally spaced nodes spanning the support.
pub fn uniform_nodes(support: TauSupport, count: usize) -> Vec<f64> {
    let step = support.width() / (count - 1) as f64;
    let mut nodes: Vec<f64> = (0..count).map(|i| support.min + step * i as f64).collect();
    if let Some(last) = nodes.last_mut() {
        *last = support.max;
    }
    nodes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_channel(surface: f64, ext: f64, path: f64) -> Surrogate {
        Surrogate::new(SurrogateParams {
            channels: 1,
            components: 4,
            extinction: vec![ext, 1.0, 1.0, 1.0],
            path: vec![path, 0.1, 0.1, 0.1],
            surface: vec![surface],
            support: TauSupport::default(),
        })
        .unwrap()
    }

    #[test]
    fn zero_aod_returns_surface() {
        let s = Surrogate::misr_like(36, 4).unwrap();
        let l = s.eval(0.0, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        for (c, v) in l.iter().enumerate() {
            assert_eq!(*v, s.params().surface[c]);
        }
    }

    #[test]
    fn large_aod_saturates_at_path_radiance() {
        let mut p = one_channel(0.02, 50.0, 0.10).params().clone();
        p.support = TauSupport::new(0.0, 10.0).unwrap();
        let s = Surrogate::new(p).unwrap();
        let l = s.eval(10.0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((l[0] - 0.10).abs() < 1e-15);
    }

    #[test]
    fn single_component_reference_value() {
        let s = one_channel(0.02, 1.0, 0.10);
        let l = s.eval(1.0, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        // 0.02 e^-1 + 0.10 (1 - e^-1) = 0.0705696447062846142... (mpmath, 30 digits).
        assert!((l[0] - 0.070_569_644_706_284_61).abs() < 1e-15);
    }

    #[test]
    fn domain_errors() {
        let s = Surrogate::misr_like(36, 4).unwrap();
        assert!(matches!(s.eval(-0.1, &[0.25; 4]), Err(Error::Domain(_))));
        assert!(matches!(s.eval(3.5, &[0.25; 4]), Err(Error::Domain(_))));
        assert!(s.eval(1.0, &[0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(s.eval(1.0, &[-0.1, 0.6, 0.5, 0.0]).is_err());
        assert!(s.eval(1.0, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn misr_like_outputs_positive_and_deterministic() {
        let s = Surrogate::misr_like(36, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let tau = rng.random_range(0.0..=3.0);
            let mut theta = [0.0; 4];
            crate::dist::sample_dirichlet(&[1.0; 4], &mut rng, &mut theta);
            let a = s.eval(tau, &theta).unwrap();
            assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
            assert_eq!(a, s.eval(tau, &theta).unwrap());
        }
    }

    #[test]
    fn table_at_node_is_verbatim() {
        let p = SurrogateParams::misr_like(36, 4).unwrap();
        let nodes = uniform_nodes(p.support, 7);
        let table = build_table_from_surrogate(&p, &nodes).unwrap();
        let s = Surrogate::new(p).unwrap();
        for (i, &tau) in nodes.iter().enumerate() {
            for m in 0..4 {
                let mut theta = [0.0; 4];
                theta[m] = 1.0;
                let t = table.eval(tau, &theta).unwrap();
                assert_eq!(t, s.eval(tau, &theta).unwrap());
                for c in 0..36 {
                    assert_eq!(t[c], table.value(i, m, c));
                }
            }
        }
    }

    #[test]
    fn table_size_and_midpoint() {
        let table = RadianceTable::new(
            1,
            1,
            vec!["a".into()],
            vec![0.0, 1.0],
            vec![0.05, 0.07],
        )
        .unwrap();
        let mid = table.eval(0.5, &[1.0]).unwrap();
        assert!((mid[0] - 0.06).abs() < 1e-15);
        let p = SurrogateParams::misr_like(36, 4).unwrap();
        let t = build_table_from_surrogate(&p, &[0.0, 1.0]).unwrap();
        assert_eq!(t.values().len(), 2 * 4 * 36);
    }

    #[test]
    fn table_rejects_bad_nodes_and_extrapolation() {
        let p = SurrogateParams::misr_like(4, 2).unwrap();
        assert!(build_table_from_surrogate(&p, &[0.0]).is_err());
        assert!(build_table_from_surrogate(&p, &[0.0, 1.0, 1.0]).is_err());
        assert!(build_table_from_surrogate(&p, &[0.0, 2.0, 1.0]).is_err());
        let t = build_table_from_surrogate(&p, &[0.5, 1.0, 2.0]).unwrap();
        assert!(matches!(t.eval(0.4, &[0.5, 0.5]), Err(Error::Domain(_))));
        assert!(t.eval(2.01, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn dense_table_tracks_surrogate() {
        let p = SurrogateParams::misr_like(36, 4).unwrap();
        let table = build_table_from_surrogate(&p, &uniform_nodes(p.support, 64)).unwrap();
        let s = Surrogate::new(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let tau = rng.random_range(0.0..=3.0);
            let m = rng.random_range(0..4);
            let mut theta = [0.0; 4];
            theta[m] = 1.0;
            let a = table.eval(tau, &theta).unwrap();
            let b = s.eval(tau, &theta).unwrap();
            for (x, y) in a.iter().zip(&b) {
                worst = worst.max(((x - y) / y).abs());
            }
        }
        assert!(worst < 0.01, "worst relative error {worst}");
    }

    #[test]
    fn table_file_round_trip_is_byte_exact() {
        let p = SurrogateParams::misr_like(8, 3).unwrap();
        let table = build_table_from_surrogate(&p, &uniform_nodes(p.support, 5)).unwrap();
        let mut first = Vec::new();
        table.write(&mut first).unwrap();
        let back = RadianceTable::read(first.as_slice()).unwrap();
        assert_eq!(back, table);
        let mut second = Vec::new();
        back.write(&mut second).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn table_file_detects_corruption() {
        let p = SurrogateParams::misr_like(2, 2).unwrap();
        let table = build_table_from_surrogate(&p, &[0.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let tampered = text.replacen("channels 2", "channels 3", 1);
        assert!(matches!(
            RadianceTable::read(tampered.as_bytes()),
            Err(Error::Parse { .. })
        ));
        let truncated: String = text.lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(RadianceTable::read(truncated.as_bytes()).is_err());
    }

    fn simplex(m: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01f64..1.0, m).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn surrogate_increasing_when_path_exceeds_surface(tau in 0.0f64..2.9, theta in simplex(4)) {
            let mut p = SurrogateParams::misr_like(36, 4).unwrap();
            for c in 0..36 {
                p.surface[c] = 0.5 * p.path[c * 4..c * 4 + 4].iter().cloned().fold(f64::INFINITY, f64::min);
            }
            let s = Surrogate::new(p).unwrap();
            let a = s.eval(tau, &theta).unwrap();
            let b = s.eval(tau + 0.05, &theta).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y > x);
            }
        }

        #[test]
        fn table_mixing_is_linear(tau in 0.0f64..=3.0, theta in simplex(4)) {
            let p = SurrogateParams::misr_like(36, 4).unwrap();
            let table = build_table_from_surrogate(&p, &uniform_nodes(p.support, 9)).unwrap();
            let mixed = table.eval(tau, &theta).unwrap();
            let mut expect = vec![0.0; 36];
            for m in 0..4 {
                let mut e = [0.0; 4];
                e[m] = 1.0;
                let pure = table.eval(tau, &e).unwrap();
                for c in 0..36 {
                    expect[c] += theta[m] * pure[c];
                }
            }
            prop_assert_eq!(mixed, expect);
        }

        #[test]
        fn surrogate_is_lipschitz_in_tau(tau in 0.0f64..2.99, theta in simplex(4)) {
            let s = Surrogate::misr_like(36, 4).unwrap();
            let a = s.eval(tau, &theta).unwrap();
            for h in [1e-3, 1e-5, 1e-7] {
                let b = s.eval(tau + h, &theta).unwrap();
                for (x, y) in a.iter().zip(&b) {
                    // |dL/dtau| <= max_m E_cm * max(P, S) which is below 2 here.
                    prop_assert!((x - y).abs() <= 2.0 * h);
                }
            }
        }
    }
}
