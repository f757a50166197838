//! Text file formats: radiance blocks, simulation truth, flat grids and chain
//! traces. Floats are written in their shortest round-trip form, so every
//! format satisfies write -> read -> write byte identity.

use std::fmt::Write as _;

use aod_core::diagnostics::{PosteriorSummary, PERCENTILES};
use aod_core::sampler::{AcceptanceCounts, ChainRecord, Counter, IterationAccepts, Tuning};
use aod_core::validation::Field;
use aod_core::{AerosolState, BlockGrid, HyperState, RadianceBlock};

use crate::error::{CliError, CliResult};
use crate::textio::{num, nums, Lines};

const BLOCK_HEADER: &str = "aod-block 1";
const TRUTH_HEADER: &str = "aod-truth 1";
const GRID_HEADER: &str = "aod-grid 1";
const CHAIN_HEADER: &str = "aod-chain 1";

/// Run-length encoding of a clear mask: `c<n>` for clear runs, `x<n>` for
/// cloudy runs, in row-major cell order.
pub fn encode_mask(mask: &[bool]) -> String {
    let mut out: Vec<String> = Vec::new();
    let mut i = 0;
    while i < mask.len() {
        let v = mask[i];
        let start = i;
        while i < mask.len() && mask[i] == v {
            i += 1;
        }
        out.push(format!("{}{}", if v { 'c' } else { 'x' }, i - start));
    }
    out.join(" ")
}

pub fn decode_mask(s: &str, n_cells: usize) -> Result<Vec<bool>, String> {
    let mut mask = Vec::with_capacity(n_cells);
    for tok in s.split_whitespace() {
        let (kind, count) = tok.split_at(1);
        let v = match kind {
            "c" => true,
            "x" => false,
            _ => return Err(format!("bad mask run `{tok}`")),
        };
        let n: usize = count.parse().map_err(|_| format!("bad mask run `{tok}`"))?;
        if n == 0 {
            return Err(format!("empty mask run `{tok}`"));
        }
        mask.extend(std::iter::repeat_n(v, n));
    }
    if mask.len() != n_cells {
        return Err(format!("mask covers {} cells, grid has {n_cells}", mask.len()));
    }
    Ok(mask)
}

fn write_grid_header(s: &mut String, grid: &BlockGrid) {
    writeln!(s, "rows {}", grid.rows()).unwrap();
    writeln!(s, "cols {}", grid.cols()).unwrap();
    writeln!(s, "resolution_km {}", num(grid.resolution_km())).unwrap();
    writeln!(s, "mask_rle {}", encode_mask(grid.clear_mask())).unwrap();
}

fn read_grid_header(lines: &mut Lines<'_>) -> CliResult<BlockGrid> {
    let rows: usize = lines.value("rows")?;
    let cols: usize = lines.value("cols")?;
    let resolution: f64 = lines.value("resolution_km")?;
    let rle = lines.field("mask_rle")?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| lines.error("grid dimensions overflow"))?;
    let mask = decode_mask(rle, n).map_err(|e| lines.error(e))?;
    BlockGrid::new(rows, cols, resolution, mask).map_err(|e| lines.error(e))
}

/// A radiance block with the number of mixture components it is meant for.
///
/// ```text
/// aod-block 1
/// rows R
/// cols C
/// resolution_km r
/// mask_rle c<n> x<n> ...
/// channels K
/// components M
/// pixels P
/// <K radiances of clear pixel 0>
/// ...
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFile {
    pub block: RadianceBlock,
    pub components: usize,
}

impl BlockFile {
    pub fn to_text(&self) -> String {
        let b = &self.block;
        let mut s = String::new();
        writeln!(s, "{BLOCK_HEADER}").unwrap();
        write_grid_header(&mut s, b.grid());
        writeln!(s, "channels {}", b.channels()).unwrap();
        writeln!(s, "components {}", self.components).unwrap();
        writeln!(s, "pixels {}", b.n_pixels()).unwrap();
        for p in 0..b.n_pixels() {
            writeln!(s, "{}", nums(b.pixel(p))).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(BLOCK_HEADER)?;
        let grid = read_grid_header(&mut lines)?;
        let channels: usize = lines.value("channels")?;
        let components: usize = lines.value("components")?;
        let pixels: usize = lines.value("pixels")?;
        if pixels != grid.n_clear() {
            return Err(lines.error(format!("{pixels} pixels listed, mask has {} clear cells", grid.n_clear())));
        }
        if components == 0 {
            return Err(lines.error("components must be at least 1"));
        }
        let mut radiances = Vec::with_capacity(pixels * channels);
        for _ in 0..pixels {
            radiances.extend(lines.row::<f64>(channels)?);
        }
        let line = lines.line();
        lines.finish()?;
        let block = RadianceBlock::new(grid, channels, radiances).map_err(|e| crate::error::parse_err(line, e.to_string()))?;
        Ok(Self { block, components })
    }
}

/// True state of a simulated block.
///
/// ```text
/// aod-truth 1
/// rows / cols / resolution_km / mask_rle    as in the block file
/// components M
/// kappa k
/// alpha a_1 ... a_M
/// noise_sd s_1 ... s_K
/// clipped n
/// pixels P
/// <tau theta_1 ... theta_M of clear pixel 0>
/// ...
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct TruthFile {
    pub grid: BlockGrid,
    pub state: AerosolState,
    pub kappa: f64,
    pub alpha: Vec<f64>,
    pub noise_sd: Vec<f64>,
    pub clipped: usize,
}

impl TruthFile {
    pub fn to_text(&self) -> String {
        let m = self.state.components();
        let mut s = String::new();
        writeln!(s, "{TRUTH_HEADER}").unwrap();
        write_grid_header(&mut s, &self.grid);
        writeln!(s, "components {m}").unwrap();
        writeln!(s, "kappa {}", num(self.kappa)).unwrap();
        writeln!(s, "alpha {}", nums(&self.alpha)).unwrap();
        writeln!(s, "noise_sd {}", nums(&self.noise_sd)).unwrap();
        writeln!(s, "clipped {}", self.clipped).unwrap();
        writeln!(s, "pixels {}", self.state.n_pixels()).unwrap();
        for p in 0..self.state.n_pixels() {
            writeln!(s, "{} {}", num(self.state.tau[p]), nums(self.state.theta(p))).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(TRUTH_HEADER)?;
        let grid = read_grid_header(&mut lines)?;
        let m: usize = lines.value("components")?;
        if m == 0 {
            return Err(lines.error("components must be at least 1"));
        }
        let kappa = lines.value("kappa")?;
        let alpha: Vec<f64> = lines.values("alpha")?;
        if alpha.len() != m {
            return Err(lines.error(format!("alpha has {} entries for {m} components", alpha.len())));
        }
        let noise_sd = lines.values("noise_sd")?;
        let clipped = lines.value("clipped")?;
        let pixels: usize = lines.value("pixels")?;
        if pixels != grid.n_clear() {
            return Err(lines.error(format!("{pixels} pixels listed, mask has {} clear cells", grid.n_clear())));
        }
        let mut tau = Vec::with_capacity(pixels);
        let mut theta = Vec::with_capacity(pixels * m);
        for _ in 0..pixels {
            let row = lines.row::<f64>(m + 1)?;
            tau.push(row[0]);
            theta.extend_from_slice(&row[1..]);
        }
        lines.finish()?;
        let state = AerosolState::new(tau, theta, m)?;
        Ok(Self {
            grid,
            state,
            kappa,
            alpha,
            noise_sd,
            clipped,
        })
    }

    /// The true AOD as a grid with a single `tau` column.
    pub fn tau_grid(&self) -> Grid {
        Grid::from_pixels(&self.grid, vec!["tau".into()], Vec::new(), |p| vec![self.state.tau[p]])
    }
}

/// Per-cell status in a grid file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellStatus {
    Ok,
    /// Cloud-masked; never attempted.
    Cloud,
    /// Attempted but not converged.
    Failed,
}

impl CellStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            CellStatus::Ok => "ok",
            CellStatus::Cloud => "cloud",
            CellStatus::Failed => "failed",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ok" => Some(CellStatus::Ok),
            "cloud" => Some(CellStatus::Cloud),
            "failed" => Some(CellStatus::Failed),
            _ => None,
        }
    }
}

/// Flat per-cell table for plotting and comparison.
///
/// ```text
/// aod-grid 1
/// rows R
/// cols C
/// meta N
/// <key> <value>             N lines
/// columns <name> ...
/// <row> <col> <status> <value> ...     R*C lines, row-major
/// ```
///
/// Missing values are written as `NaN`; cloud cells carry no values.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub status: Vec<CellStatus>,
    /// Row-major, `columns.len()` values per cell.
    pub values: Vec<f64>,
}

impl Grid {
    /// Grid over a block: clear pixel `p` gets `values(p)`, cloudy cells NaN.
    pub fn from_pixels(
        grid: &BlockGrid,
        columns: Vec<String>,
        meta: Vec<(String, String)>,
        values: impl Fn(usize) -> Vec<f64>,
    ) -> Self {
        let k = columns.len();
        let mut status = Vec::with_capacity(grid.n_cells());
        let mut out = Vec::with_capacity(grid.n_cells() * k);
        let mut p = 0;
        for &clear in grid.clear_mask() {
            if clear {
                status.push(CellStatus::Ok);
                out.extend(values(p));
                p += 1;
            } else {
                status.push(CellStatus::Cloud);
                out.extend(std::iter::repeat_n(f64::NAN, k));
            }
        }
        Self {
            rows: grid.rows(),
            cols: grid.cols(),
            meta,
            columns,
            status,
            values: out,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.rows * self.cols
    }

    pub fn column_index(&self, name: &str) -> CliResult<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| CliError::config(format!("grid has no column `{name}`; columns are {}", self.columns.join(", "))))
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// One column as a field; only `ok` cells with finite values are present.
    pub fn field(&self, column: &str) -> CliResult<Field> {
        let j = self.column_index(column)?;
        let k = self.columns.len();
        let values = (0..self.n_cells())
            .map(|i| {
                let v = self.values[i * k + j];
                (self.status[i] == CellStatus::Ok && v.is_finite()).then_some(v)
            })
            .collect();
        Ok(Field::new(self.rows, self.cols, values)?)
    }

    /// Single-column grid from a field; absent cells are marked `cloud`.
    pub fn from_field(field: &Field, column: &str, meta: Vec<(String, String)>) -> Self {
        Self {
            rows: field.rows,
            cols: field.cols,
            meta,
            columns: vec![column.to_string()],
            status: field
                .values
                .iter()
                .map(|v| if v.is_some() { CellStatus::Ok } else { CellStatus::Cloud })
                .collect(),
            values: field.values.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let k = self.columns.len();
        let mut s = String::new();
        writeln!(s, "{GRID_HEADER}").unwrap();
        writeln!(s, "rows {}", self.rows).unwrap();
        writeln!(s, "cols {}", self.cols).unwrap();
        writeln!(s, "meta {}", self.meta.len()).unwrap();
        for (key, v) in &self.meta {
            writeln!(s, "{key} {v}").unwrap();
        }
        writeln!(s, "columns {}", self.columns.join(" ")).unwrap();
        for i in 0..self.n_cells() {
            let (r, c) = (i / self.cols, i % self.cols);
            write!(s, "{r} {c} {}", self.status[i].as_str()).unwrap();
            for v in &self.values[i * k..(i + 1) * k] {
                write!(s, " {}", num(*v)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(GRID_HEADER)?;
        let rows: usize = lines.value("rows")?;
        let cols: usize = lines.value("cols")?;
        let n_meta: usize = lines.value("meta")?;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let l = lines.next_line()?;
            let (k, v) = l.split_once(' ').ok_or_else(|| lines.error(format!("expected `key value`, found `{l}`")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let columns: Vec<String> = lines.field("columns")?.split(' ').filter(|c| !c.is_empty()).map(str::to_string).collect();
        let k = columns.len();
        let n = rows.checked_mul(cols).ok_or_else(|| lines.error("grid dimensions overflow"))?;
        let mut status = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n * k);
        for i in 0..n {
            let l = lines.next_line()?;
            let mut toks = l.split(' ');
            let r: Option<usize> = toks.next().and_then(|t| t.parse().ok());
            let c: Option<usize> = toks.next().and_then(|t| t.parse().ok());
            if r != Some(i / cols) || c != Some(i % cols) {
                return Err(lines.error(format!("expected cell {} {}", i / cols, i % cols)));
            }
            let st = toks
                .next()
                .and_then(CellStatus::parse)
                .ok_or_else(|| lines.error("expected status ok, cloud or failed"))?;
            status.push(st);
            let rest: Vec<&str> = toks.collect();
            if rest.len() != k {
                return Err(lines.error(format!("expected {k} values, found {}", rest.len())));
            }
            for t in rest {
                values.push(t.parse::<f64>().map_err(|_| lines.error(format!("bad number `{t}`")))?);
            }
        }
        lines.finish()?;
        Ok(Self {
            rows,
            cols,
            meta,
            columns,
            status,
            values,
        })
    }
}

/// Column names of a posterior summary grid with `m` components.
pub fn summary_columns(m: usize) -> Vec<String> {
    let mut cols = vec!["mean".to_string(), "sd".to_string()];
    cols.extend(PERCENTILES.iter().map(|q| format!("p{:02}", *q as u32)));
    cols.extend((1..=m).map(|k| format!("theta_mean_{k}")));
    cols.extend((1..=m).map(|k| format!("theta_sd_{k}")));
    cols
}

/// Per-pixel posterior summary as a grid. Pixels flagged in `failed` get the
/// `failed` status but keep their values. Hyperparameter summaries go into
/// the metadata.
pub fn summary_grid(grid: &BlockGrid, summary: &PosteriorSummary, failed: &[bool]) -> Grid {
    let m = summary.components;
    let mut meta = vec![("samples".to_string(), summary.n_samples.to_string())];
    let mut scalar = |name: String, s: &aod_core::diagnostics::ScalarSummary| {
        meta.push((format!("{name}_mean"), num(s.mean)));
        meta.push((format!("{name}_sd"), num(s.sd)));
    };
    scalar("kappa".into(), &summary.kappa);
    for (k, a) in summary.alpha.iter().enumerate() {
        scalar(format!("alpha_{}", k + 1), a);
    }
    for (c, s2) in summary.sigma2.iter().enumerate() {
        scalar(format!("sigma2_{}", c + 1), s2);
    }
    let mut out = Grid::from_pixels(grid, summary_columns(m), meta, |p| {
        let t = &summary.tau[p];
        let mut v = vec![t.mean, t.sd];
        v.extend_from_slice(&t.percentiles);
        v.extend_from_slice(&summary.theta_mean[p * m..(p + 1) * m]);
        v.extend_from_slice(&summary.theta_sd[p * m..(p + 1) * m]);
        v
    });
    let mut p = 0;
    for (i, &clear) in grid.clear_mask().iter().enumerate() {
        if clear {
            if failed.get(p).copied().unwrap_or(false) {
                out.status[i] = CellStatus::Failed;
            }
            p += 1;
        }
    }
    out
}

/// Scalar traces of a chain: everything in a [`ChainRecord`] except the
/// per-pixel samples, which the summary grid condenses.
///
/// ```text
/// aod-chain 1
/// n_pixels / components / channels / iterations / burn_in / thinning / trace_stride
/// tuning <tau_scale> <theta_concentration> <alpha_step> <shift_step>
/// acceptance <tau acc att> <theta acc att> <alpha acc att>
/// trace N            then N lines: <log posterior> <kappa>
/// samples S          then S lines: <kappa> <alpha_1..M> <sigma2_1..K>
/// accepts I          then I lines: <tau acc att> <theta acc att> <alpha acc att>
/// final_kappa k
/// final_alpha ...
/// final_sigma2 ...
/// final_state P      then P lines: <tau> <theta_1..M>
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub record: ChainRecord,
}

fn counters(cs: &[Counter]) -> String {
    cs.iter().map(|c| format!("{} {}", c.accepted, c.attempted)).collect::<Vec<_>>().join(" ")
}

fn read_counters(v: &[u64]) -> [Counter; 3] {
    [0, 1, 2].map(|i| Counter {
        accepted: v[2 * i],
        attempted: v[2 * i + 1],
    })
}

impl ChainTrace {
    /// Drops the per-pixel samples of `record`.
    pub fn from_record(record: &ChainRecord) -> Self {
        let mut r = record.clone();
        r.tau_samples.clear();
        r.theta_samples.clear();
        Self { record: r }
    }

    pub fn to_text(&self) -> String {
        let r = &self.record;
        let mut s = String::new();
        writeln!(s, "{CHAIN_HEADER}").unwrap();
        for (k, v) in [
            ("n_pixels", r.n_pixels),
            ("components", r.components),
            ("channels", r.channels),
            ("iterations", r.iterations),
            ("burn_in", r.burn_in),
            ("thinning", r.thinning),
            ("trace_stride", r.trace_stride),
        ] {
            writeln!(s, "{k} {v}").unwrap();
        }
        let t = r.tuning;
        writeln!(s, "tuning {}", nums(&[t.tau_scale, t.theta_concentration, t.alpha_step, t.shift_step])).unwrap();
        let a = r.acceptance;
        writeln!(s, "acceptance {}", counters(&[a.tau, a.theta, a.alpha])).unwrap();
        writeln!(s, "trace {}", r.log_posterior.len()).unwrap();
        for (lp, k) in r.log_posterior.iter().zip(&r.kappa_trace) {
            writeln!(s, "{} {}", num(*lp), num(*k)).unwrap();
        }
        writeln!(s, "samples {}", r.kappa_samples.len()).unwrap();
        for i in 0..r.kappa_samples.len() {
            writeln!(s, "{} {} {}", num(r.kappa_samples[i]), nums(&r.alpha_samples[i]), nums(&r.sigma2_samples[i])).unwrap();
        }
        writeln!(s, "accepts {}", r.accept_log.len()).unwrap();
        for a in &r.accept_log {
            writeln!(s, "{}", counters(&[a.tau, a.theta, a.alpha])).unwrap();
        }
        writeln!(s, "final_kappa {}", num(r.final_hyper.kappa)).unwrap();
        writeln!(s, "final_alpha {}", nums(&r.final_hyper.alpha)).unwrap();
        writeln!(s, "final_sigma2 {}", nums(&r.final_hyper.sigma2)).unwrap();
        writeln!(s, "final_state {}", r.final_state.n_pixels()).unwrap();
        for p in 0..r.final_state.n_pixels() {
            writeln!(s, "{} {}", num(r.final_state.tau[p]), nums(r.final_state.theta(p))).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> CliResult<Self> {
        let mut lines = Lines::new(text);
        lines.expect_header(CHAIN_HEADER)?;
        let n_pixels: usize = lines.value("n_pixels")?;
        let components: usize = lines.value("components")?;
        let channels: usize = lines.value("channels")?;
        let iterations: usize = lines.value("iterations")?;
        let burn_in: usize = lines.value("burn_in")?;
        let thinning: usize = lines.value("thinning")?;
        let trace_stride: usize = lines.value("trace_stride")?;
        if components == 0 {
            return Err(lines.error("components must be at least 1"));
        }
        let t: Vec<f64> = lines.values("tuning")?;
        if t.len() != 4 {
            return Err(lines.error("tuning needs 4 values"));
        }
        let tuning = Tuning {
            tau_scale: t[0],
            theta_concentration: t[1],
            alpha_step: t[2],
            shift_step: t[3],
        };
        let a: Vec<u64> = lines.values("acceptance")?;
        if a.len() != 6 {
            return Err(lines.error("acceptance needs 6 counts"));
        }
        let [tau, theta, alpha] = read_counters(&a);
        let acceptance = AcceptanceCounts { tau, theta, alpha };

        let n: usize = lines.value("trace")?;
        let mut log_posterior = Vec::with_capacity(n);
        let mut kappa_trace = Vec::with_capacity(n);
        for _ in 0..n {
            let v = lines.row::<f64>(2)?;
            log_posterior.push(v[0]);
            kappa_trace.push(v[1]);
        }
        let n: usize = lines.value("samples")?;
        let (mut kappa_samples, mut alpha_samples, mut sigma2_samples) = (Vec::new(), Vec::new(), Vec::new());
        for _ in 0..n {
            let v = lines.row::<f64>(1 + components + channels)?;
            kappa_samples.push(v[0]);
            alpha_samples.push(v[1..1 + components].to_vec());
            sigma2_samples.push(v[1 + components..].to_vec());
        }
        let n: usize = lines.value("accepts")?;
        let mut accept_log = Vec::with_capacity(n);
        for _ in 0..n {
            let [tau, theta, alpha] = read_counters(&lines.row::<u64>(6)?);
            accept_log.push(IterationAccepts { tau, theta, alpha });
        }
        let kappa = lines.value("final_kappa")?;
        let alpha: Vec<f64> = lines.values("final_alpha")?;
        let sigma2: Vec<f64> = lines.values("final_sigma2")?;
        if alpha.len() != components || sigma2.len() != channels {
            return Err(lines.error("final hyperparameters have the wrong length"));
        }
        let p: usize = lines.value("final_state")?;
        if p != n_pixels {
            return Err(lines.error(format!("final state has {p} pixels, expected {n_pixels}")));
        }
        let mut tau = Vec::with_capacity(p);
        let mut theta = Vec::with_capacity(p * components);
        for _ in 0..p {
            let v = lines.row::<f64>(1 + components)?;
            tau.push(v[0]);
            theta.extend_from_slice(&v[1..]);
        }
        lines.finish()?;
        Ok(Self {
            record: ChainRecord {
                n_pixels,
                components,
                channels,
                iterations,
                burn_in,
                thinning,
                trace_stride,
                log_posterior,
                kappa_trace,
                tau_samples: Vec::new(),
                theta_samples: Vec::new(),
                kappa_samples,
                alpha_samples,
                sigma2_samples,
                accept_log,
                acceptance,
                tuning,
                final_state: AerosolState::new(tau, theta, components)?,
                final_hyper: HyperState { kappa, alpha, sigma2 },
            },
        })
    }
}
