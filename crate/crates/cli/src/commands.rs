//! Subcommands. Each takes a fully resolved [`Invocation`], so a run can be
//! repeated from its manifest.

use std::fmt::Write as _;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aod_core::diagnostics::{rhat_per_pixel, summarize_many, DiagnosticsReport};
use aod_core::forward::{build_table_from_surrogate, uniform_nodes, ForwardModel, SurrogateParams};
use aod_core::lattice::build_patch_layout;
use aod_core::parallel::run_parallel;
use aod_core::sampler::{run_chains, ChainConfig, ChainInit, ChainRecord};
use aod_core::simgen::{simulate_seeded, CLIP_WARN_FRACTION};
use aod_core::validation::{
    aggregate, compare_fields, match_overpass, parse_ground_records, sort_records, Field, Georegistration,
    OverpassMatch,
};
use aod_core::{RadianceTable, Surrogate};
use serde::{Deserialize, Serialize};

use crate::config::{ForwardSettings, RetrieveSettings, SimSettings};
use crate::error::{CliError, CliResult};
use crate::formats::{summary_grid, BlockFile, CellStatus, ChainTrace, Grid, TruthFile};
use crate::manifest::{FileDigest, RunManifest, TOOL};
use crate::textio::num;

pub const BLOCK_FILE: &str = "block.txt";
pub const TRUTH_FILE: &str = "truth.txt";
pub const SUMMARY_FILE: &str = "summary.grid";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn chain_file(k: usize) -> String {
    format!("chain-{k}.txt")
}

/// Affine cell-to-coordinate mapping of a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeorefSettings {
    pub lat0: f64,
    pub lon0: f64,
    pub lat_per_row: f64,
    pub lat_per_col: f64,
    pub lon_per_row: f64,
    pub lon_per_col: f64,
}

impl From<GeorefSettings> for Georegistration {
    fn from(g: GeorefSettings) -> Self {
        Georegistration {
            lat0: g.lat0,
            lon0: g.lon0,
            lat_per_row: g.lat_per_row,
            lat_per_col: g.lat_per_col,
            lon_per_row: g.lon_per_row,
            lon_per_col: g.lon_per_col,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    Simulate {
        settings: SimSettings,
        out_dir: PathBuf,
    },
    Retrieve {
        block: PathBuf,
        settings: RetrieveSettings,
        out_dir: PathBuf,
    },
    Diagnose {
        chains: Vec<PathBuf>,
        max_lag: usize,
        rhat_threshold: f64,
        out: PathBuf,
    },
    Aggregate {
        input: PathBuf,
        column: Option<String>,
        factor: usize,
        min_clear_fraction: f64,
        out: PathBuf,
    },
    Compare {
        a: PathBuf,
        b: PathBuf,
        column_a: Option<String>,
        column_b: Option<String>,
        out: PathBuf,
        diff_out: Option<PathBuf>,
    },
    Validate {
        grid: PathBuf,
        column: Option<String>,
        records: PathBuf,
        /// RFC 3339 overpass time.
        overpass: String,
        station_lat: f64,
        station_lon: f64,
        georef: GeorefSettings,
        window_seconds: i64,
        wavelength_nm: f64,
        out: PathBuf,
    },
    MakeTable {
        channels: usize,
        components: usize,
        nodes: usize,
        out: PathBuf,
    },
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Simulate { .. } => "simulate",
            Invocation::Retrieve { .. } => "retrieve",
            Invocation::Diagnose { .. } => "diagnose",
            Invocation::Aggregate { .. } => "aggregate",
            Invocation::Compare { .. } => "compare",
            Invocation::Validate { .. } => "validate",
            Invocation::MakeTable { .. } => "make-table",
        }
    }

    /// Where the manifest of this invocation goes.
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            Invocation::Simulate { out_dir, .. } | Invocation::Retrieve { out_dir, .. } => out_dir.join(MANIFEST_FILE),
            Invocation::Diagnose { out, .. }
            | Invocation::Aggregate { out, .. }
            | Invocation::Compare { out, .. }
            | Invocation::Validate { out, .. }
            | Invocation::MakeTable { out, .. } => {
                let mut s = out.clone().into_os_string();
                s.push(".manifest.json");
                PathBuf::from(s)
            }
        }
    }
}

/// Files touched by a run and whether it ended with a convergence warning.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub convergence_warning: bool,
}

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str, outcome: &mut Outcome) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
    outcome.outputs.push(path.to_path_buf());
    Ok(())
}

fn read_input<T>(path: &Path, outcome: &mut Outcome, parse: impl FnOnce(&str) -> CliResult<T>) -> CliResult<T> {
    let text = read_text(path)?;
    outcome.inputs.push(path.to_path_buf());
    parse(&text).map_err(|e| e.in_file(path))
}

/// A grid file, or a truth file viewed as a `tau` grid.
pub fn parse_grid_like(text: &str) -> CliResult<Grid> {
    if text.starts_with("aod-truth ") {
        Ok(TruthFile::from_text(text)?.tau_grid())
    } else {
        Grid::from_text(text)
    }
}

fn default_column(grid: &Grid, column: &Option<String>) -> CliResult<String> {
    if let Some(c) = column {
        return Ok(c.clone());
    }
    if grid.columns.iter().any(|c| c == "mean") {
        return Ok("mean".into());
    }
    grid.columns
        .first()
        .cloned()
        .ok_or_else(|| CliError::config("grid has no value columns"))
}

/// Runs an invocation and writes its manifest.
pub fn run(invocation: &Invocation) -> CliResult<Outcome> {
    let start = Instant::now();
    let outcome = execute(invocation)?;
    let manifest = RunManifest {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        invocation: invocation.clone(),
        inputs: outcome.inputs.iter().map(|p| FileDigest::of(p)).collect::<CliResult<_>>()?,
        outputs: outcome.outputs.iter().map(|p| FileDigest::of(p)).collect::<CliResult<_>>()?,
        convergence_warning: outcome.convergence_warning,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let path = invocation.manifest_path();
    std::fs::write(&path, manifest.to_json()).map_err(|e| CliError::io(&path, e))?;
    Ok(outcome)
}

/// Repeats the run recorded in a manifest. With `check`, every output must
/// match its recorded digest and the manifest is left untouched.
pub fn rerun(manifest_path: &Path, check: bool) -> CliResult<Outcome> {
    let manifest = RunManifest::from_json(&read_text(manifest_path)?).map_err(|e| e.in_file(manifest_path))?;
    if !check {
        return run(&manifest.invocation);
    }
    for input in &manifest.inputs {
        let now = FileDigest::of(&input.path)?;
        if now.sha256 != input.sha256 {
            return Err(CliError::Reproducibility(format!("input {} changed since the recorded run", input.path.display())));
        }
    }
    let outcome = execute(&manifest.invocation)?;
    for expected in &manifest.outputs {
        let now = FileDigest::of(&expected.path)?;
        if now.sha256 != expected.sha256 {
            return Err(CliError::Reproducibility(format!("output {} differs from the recorded run", expected.path.display())));
        }
    }
    Ok(outcome)
}

pub fn execute(invocation: &Invocation) -> CliResult<Outcome> {
    let mut outcome = Outcome::default();
    match invocation {
        Invocation::Simulate { settings, out_dir } => simulate(settings, out_dir, &mut outcome)?,
        Invocation::Retrieve { block, settings, out_dir } => retrieve(block, settings, out_dir, &mut outcome)?,
        Invocation::Diagnose {
            chains,
            max_lag,
            rhat_threshold,
            out,
        } => diagnose(chains, *max_lag, *rhat_threshold, out, &mut outcome)?,
        Invocation::Aggregate {
            input,
            column,
            factor,
            min_clear_fraction,
            out,
        } => {
            let grid = read_input(input, &mut outcome, parse_grid_like)?;
            let column = default_column(&grid, column)?;
            let coarse = aggregate(&grid.field(&column)?, *factor, *min_clear_fraction)?;
            let meta = vec![("aggregation_factor".to_string(), factor.to_string())];
            write_text(out, &Grid::from_field(&coarse, &column, meta).to_text(), &mut outcome)?;
        }
        Invocation::Compare {
            a,
            b,
            column_a,
            column_b,
            out,
            diff_out,
        } => compare(a, b, column_a, column_b, out, diff_out.as_deref(), &mut outcome)?,
        Invocation::Validate { .. } => validate(invocation, &mut outcome)?,
        Invocation::MakeTable {
            channels,
            components,
            nodes,
            out,
        } => {
            let params = SurrogateParams::misr_like(*channels, *components)?;
            let table = build_table_from_surrogate(&params, &uniform_nodes(params.support, *nodes))?;
            let mut bytes = Vec::new();
            table.write(&mut bytes)?;
            write_text(out, &String::from_utf8(bytes).expect("table text is UTF-8"), &mut outcome)?;
        }
    }
    Ok(outcome)
}

fn simulate(settings: &SimSettings, out_dir: &Path, outcome: &mut Outcome) -> CliResult<()> {
    let config = settings.sim_config()?;
    let fm = Surrogate::new(settings.surrogate()?)?;
    let sim = simulate_seeded(&config, &fm)?;
    if sim.clipped as f64 > CLIP_WARN_FRACTION * sim.block.n_pixels().max(1) as f64 {
        log::warn!("{} simulated AOD values were clipped to the support", sim.clipped);
    }
    let block = BlockFile {
        block: sim.block,
        components: settings.alpha.len(),
    };
    let truth = TruthFile {
        grid: config.grid()?,
        state: sim.truth,
        kappa: config.kappa,
        alpha: config.alpha.clone(),
        noise_sd: sim.noise_sd,
        clipped: sim.clipped,
    };
    write_text(&out_dir.join(BLOCK_FILE), &block.to_text(), outcome)?;
    write_text(&out_dir.join(TRUTH_FILE), &truth.to_text(), outcome)?;
    Ok(())
}

/// Forward model named by the settings, checked against the block.
pub fn forward_model(
    settings: &ForwardSettings,
    block: &BlockFile,
    outcome: &mut Outcome,
) -> CliResult<Box<dyn ForwardModel>> {
    let fm: Box<dyn ForwardModel> = match settings {
        ForwardSettings::Surrogate => Box::new(Surrogate::misr_like(block.block.channels(), block.components)?),
        ForwardSettings::Table { path } => {
            let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
            outcome.inputs.push(path.clone());
            let table = RadianceTable::read(BufReader::new(file)).map_err(|e| CliError::from(e).in_file(path))?;
            Box::new(table)
        }
    };
    if fm.channels() != block.block.channels() || fm.components() != block.components {
        return Err(CliError::Dimension(format!(
            "forward model has {} channels and {} components, block has {} and {}",
            fm.channels(),
            fm.components(),
            block.block.channels(),
            block.components
        )));
    }
    Ok(fm)
}

/// Runs the configured sampler: `chains` independent chains from
/// over-dispersed starting points, global or patch-parallel.
pub fn run_sampler(
    block: &BlockFile,
    fm: &dyn ForwardModel,
    settings: &RetrieveSettings,
) -> CliResult<Vec<ChainRecord>> {
    let config = settings.chain_config()?;
    let b = &block.block;
    let inits = if settings.chains == 1 {
        vec![ChainInit::default_for(b, fm)?]
    } else {
        ChainInit::overdispersed(b, fm, settings.chains)?
    };
    if !settings.parallel {
        return Ok(run_chains(b, fm, &config, &inits, settings.workers)?);
    }
    let layout = build_patch_layout(b.grid(), settings.patch_spec())?;
    let rounds = settings.round_config()?;
    inits
        .iter()
        .enumerate()
        .map(|(k, init)| {
            let cfg = ChainConfig {
                stream: k as u64,
                ..config.clone()
            };
            Ok(run_parallel(b, fm, &layout, &rounds, &cfg, init)?)
        })
        .collect()
}

fn retrieve(block_path: &Path, settings: &RetrieveSettings, out_dir: &Path, outcome: &mut Outcome) -> CliResult<()> {
    settings.chain_config()?;
    let block = read_input(block_path, outcome, BlockFile::from_text)?;
    let fm = forward_model(&settings.forward, &block, outcome)?;
    let records = run_sampler(&block, fm.as_ref(), settings)?;

    let summary = summarize_many(&records)?;
    let failed: Vec<bool> = if records.len() >= 2 {
        rhat_per_pixel(&records)?
            .into_iter()
            .map(|r| !(r < settings.pixel_rhat_threshold))
            .collect()
    } else {
        vec![false; block.block.n_pixels()]
    };
    let report = DiagnosticsReport::from_records(&records, settings.acf_max_lag)?;
    outcome.convergence_warning = !report.converged(settings.rhat_threshold);
    if outcome.convergence_warning {
        log::warn!(
            "log-posterior R-hat {:?} is not below {}",
            report.rhat,
            settings.rhat_threshold
        );
    }
    let n_failed = failed.iter().filter(|&&f| f).count();
    if n_failed > 0 {
        log::warn!("{n_failed} pixels did not converge and are marked failed");
    }

    let grid = summary_grid(block.block.grid(), &summary, &failed);
    write_text(&out_dir.join(SUMMARY_FILE), &grid.to_text(), outcome)?;
    for (k, r) in records.iter().enumerate() {
        write_text(&out_dir.join(chain_file(k)), &ChainTrace::from_record(r).to_text(), outcome)?;
    }
    write_text(&out_dir.join(DIAGNOSTICS_FILE), &report.to_text(), outcome)?;
    Ok(())
}

fn diagnose(chains: &[PathBuf], max_lag: usize, threshold: f64, out: &Path, outcome: &mut Outcome) -> CliResult<()> {
    if chains.is_empty() {
        return Err(CliError::config("diagnose needs at least one chain file"));
    }
    let records = chains
        .iter()
        .map(|p| read_input(p, outcome, ChainTrace::from_text).map(|t| t.record))
        .collect::<CliResult<Vec<_>>>()?;
    let report = DiagnosticsReport::from_records(&records, max_lag)?;
    outcome.convergence_warning = !report.converged(threshold);
    write_text(out, &report.to_text(), outcome)
}

fn opt_num(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".into(), num)
}

fn compare(
    a: &Path,
    b: &Path,
    column_a: &Option<String>,
    column_b: &Option<String>,
    out: &Path,
    diff_out: Option<&Path>,
    outcome: &mut Outcome,
) -> CliResult<()> {
    let ga = read_input(a, outcome, parse_grid_like)?;
    let gb = read_input(b, outcome, parse_grid_like)?;
    if (ga.rows, ga.cols) != (gb.rows, gb.cols) {
        return Err(CliError::Dimension(format!(
            "{} is {}x{} but {} is {}x{}",
            a.display(),
            ga.rows,
            ga.cols,
            b.display(),
            gb.rows,
            gb.cols
        )));
    }
    let fa = ga.field(&default_column(&ga, column_a)?)?;
    let fb = gb.field(&default_column(&gb, column_b)?)?;
    let report = compare_fields(&fa, &fb)?;
    let mut s = String::from("aod-comparison 1\n");
    writeln!(s, "cells {}", fa.values.len()).unwrap();
    writeln!(s, "pairs {}", report.pairs.len()).unwrap();
    writeln!(s, "missing {}", report.missing).unwrap();
    writeln!(s, "rms {}", num(report.rms)).unwrap();
    writeln!(s, "correlation {}", opt_num(report.correlation)).unwrap();
    write_text(out, &s, outcome)?;
    if let Some(path) = diff_out {
        let diff = Field {
            rows: fa.rows,
            cols: fa.cols,
            values: fa
                .values
                .iter()
                .zip(&fb.values)
                .map(|(x, y)| Some((*x)? - (*y)?))
                .collect(),
        };
        write_text(path, &Grid::from_field(&diff, "difference", Vec::new()).to_text(), outcome)?;
    }
    Ok(())
}

fn validate(invocation: &Invocation, outcome: &mut Outcome) -> CliResult<()> {
    let Invocation::Validate {
        grid,
        column,
        records,
        overpass,
        station_lat,
        station_lon,
        georef,
        window_seconds,
        wavelength_nm,
        out,
    } = invocation
    else {
        unreachable!()
    };
    let g = read_input(grid, outcome, parse_grid_like)?;
    let column = default_column(&g, column)?;
    let j = g.column_index(&column)?;
    let mut recs = {
        let file = std::fs::File::open(records).map_err(|e| CliError::io(records, e))?;
        outcome.inputs.push(records.clone());
        parse_ground_records(file).map_err(|e| CliError::from(e).in_file(records))?
    };
    sort_records(&mut recs);
    let t = chrono::DateTime::parse_from_rfc3339(overpass)
        .map_err(|e| CliError::config(format!("overpass `{overpass}` is not an RFC 3339 time: {e}")))?
        .timestamp();
    let reg: Georegistration = (*georef).into();
    let cell = reg.nearest_cell(*station_lat, *station_lon, g.rows, g.cols)?;
    let matched = match_overpass(&recs, t, *window_seconds, *wavelength_nm)?;

    let mut s = String::from("aod-validation 1\n");
    writeln!(s, "station {} {}", num(*station_lat), num(*station_lon)).unwrap();
    writeln!(s, "overpass {t}").unwrap();
    writeln!(s, "column {column}").unwrap();
    match cell {
        Some((r, c)) => {
            let i = r * g.cols + c;
            let st = g.status[i];
            let v = g.values[i * g.columns.len() + j];
            writeln!(s, "cell {r} {c}").unwrap();
            writeln!(s, "cell_status {}", st.as_str()).unwrap();
            writeln!(s, "retrieved {}", opt_num((st == CellStatus::Ok && v.is_finite()).then_some(v))).unwrap();
        }
        None => {
            writeln!(s, "cell absent").unwrap();
            writeln!(s, "cell_status absent").unwrap();
            writeln!(s, "retrieved absent").unwrap();
        }
    }
    match matched {
        OverpassMatch::Matched { mean_aod, count } => {
            writeln!(s, "ground {}", num(mean_aod)).unwrap();
            writeln!(s, "ground_count {count}").unwrap();
            writeln!(s, "gap_seconds absent").unwrap();
        }
        OverpassMatch::Absent { gap_seconds } => {
            writeln!(s, "ground absent").unwrap();
            writeln!(s, "ground_count 0").unwrap();
            writeln!(s, "gap_seconds {}", gap_seconds.map_or("absent".into(), |g| g.to_string())).unwrap();
        }
    }
    write_text(out, &s, outcome)
}
