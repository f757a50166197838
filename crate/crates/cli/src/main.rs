use std::path::PathBuf;
use std::process::ExitCode;

use aod_cli::commands::{self, GeorefSettings, Invocation};
use aod_cli::config::{ConfigFile, ForwardSettings, CONFIG_ENV};
use aod_cli::error::{CliError, CliResult, EXIT_NOT_CONVERGED};
use aod_core::validation::{MIN_CLEAR_FRACTION, OVERPASS_WINDOW_SECONDS};
use clap::{Parser, Subcommand};

/// Bayesian retrieval of aerosol optical depth from multi-angle radiances.
///
/// Exit codes: 0 success, 2 configuration error, 3 I/O or parse error,
/// 4 convergence warning (outputs are still written).
#[derive(Parser)]
#[command(name = "aodret", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a radiance block and its true aerosol state.
    Simulate {
        /// Settings file with a `[simulate]` table; defaults to $AODRET_CONFIG.
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample the posterior of a block and summarize it.
    Retrieve {
        block: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Settings file with a `[retrieve]` table; defaults to $AODRET_CONFIG.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the patch-parallel sampler.
        #[arg(long)]
        parallel: bool,
        #[arg(long)]
        chains: Option<usize>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        thinning: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Maximum number of worker threads.
        #[arg(long)]
        workers: Option<usize>,
        /// Radiance table to use as the forward model.
        #[arg(long, conflicts_with = "surrogate")]
        table: Option<PathBuf>,
        /// Use the built-in surrogate forward model.
        #[arg(long)]
        surrogate: bool,
    },
    /// Convergence diagnostics of chain files from the same block.
    Diagnose {
        #[arg(required = true)]
        chains: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        max_lag: usize,
        #[arg(long, default_value_t = 1.1)]
        rhat_threshold: f64,
    },
    /// Average a grid onto a coarser one.
    Aggregate {
        input: PathBuf,
        #[arg(long)]
        factor: usize,
        #[arg(long)]
        column: Option<String>,
        #[arg(long, default_value_t = MIN_CLEAR_FRACTION)]
        min_clear_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// RMS difference and correlation of two grids.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        column_a: Option<String>,
        #[arg(long)]
        column_b: Option<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the per-cell difference grid.
        #[arg(long)]
        diff_out: Option<PathBuf>,
    },
    /// Pair a retrieved grid with ground-station records at an overpass.
    Validate {
        grid: PathBuf,
        /// CSV with columns timestamp, wavelength_nm, aod, angstrom_exponent.
        #[arg(long)]
        records: PathBuf,
        /// Overpass time, RFC 3339.
        #[arg(long)]
        overpass: String,
        #[arg(long, allow_negative_numbers = true)]
        station_lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        station_lon: f64,
        /// lat0,lon0,lat_per_row,lat_per_col,lon_per_row,lon_per_col
        #[arg(long, allow_hyphen_values = true)]
        georef: String,
        #[arg(long, default_value_t = OVERPASS_WINDOW_SECONDS)]
        window: i64,
        #[arg(long, default_value_t = 558.0)]
        wavelength: f64,
        #[arg(long)]
        column: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate the surrogate forward model.
    MakeTable {
        #[arg(long, default_value_t = aod_core::forward::DEFAULT_CHANNELS)]
        channels: usize,
        #[arg(long, default_value_t = aod_core::forward::DEFAULT_COMPONENTS)]
        components: usize,
        #[arg(long, default_value_t = 31)]
        nodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat the run recorded in a manifest.
    Rerun {
        manifest: PathBuf,
        /// Verify that every output matches its recorded digest.
        #[arg(long)]
        check: bool,
    },
}

fn load_config(explicit: Option<PathBuf>) -> CliResult<ConfigFile> {
    let path = explicit.or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
    match path {
        Some(p) => ConfigFile::from_toml(&commands::read_text(&p)?).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", p.display())),
            other => other,
        }),
        None => Ok(ConfigFile::default()),
    }
}

fn parse_georef(s: &str) -> CliResult<GeorefSettings> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::config(format!("georef `{s}` must be six comma-separated numbers")))?;
    let [lat0, lon0, lat_per_row, lat_per_col, lon_per_row, lon_per_col] = v[..] else {
        return Err(CliError::config(format!("georef `{s}` must be six comma-separated numbers")));
    };
    Ok(GeorefSettings {
        lat0,
        lon0,
        lat_per_row,
        lat_per_col,
        lon_per_row,
        lon_per_col,
    })
}

fn invocation(command: Command) -> CliResult<Option<Invocation>> {
    let inv = match command {
        Command::Simulate { config, out_dir, seed } => {
            let mut settings = load_config(config)?.simulate.unwrap_or_default();
            if let Some(s) = seed {
                settings.seed = s;
            }
            Invocation::Simulate { settings, out_dir }
        }
        Command::Retrieve {
            block,
            out_dir,
            config,
            parallel,
            chains,
            iterations,
            burn_in,
            thinning,
            seed,
            workers,
            table,
            surrogate,
        } => {
            let mut settings = load_config(config)?.retrieve.unwrap_or_default();
            settings.parallel |= parallel;
            macro_rules! set {
                ($($flag:ident),*) => {$(if let Some(v) = $flag { settings.$flag = v; })*};
            }
            set!(chains, iterations, burn_in, thinning, seed, workers);
            if let Some(path) = table {
                settings.forward = ForwardSettings::Table { path };
            } else if surrogate {
                settings.forward = ForwardSettings::Surrogate;
            }
            Invocation::Retrieve { block, settings, out_dir }
        }
        Command::Diagnose {
            chains,
            out,
            max_lag,
            rhat_threshold,
        } => Invocation::Diagnose {
            chains,
            max_lag,
            rhat_threshold,
            out,
        },
        Command::Aggregate {
            input,
            factor,
            column,
            min_clear_fraction,
            out,
        } => Invocation::Aggregate {
            input,
            column,
            factor,
            min_clear_fraction,
            out,
        },
        Command::Compare {
            a,
            b,
            column_a,
            column_b,
            out,
            diff_out,
        } => Invocation::Compare {
            a,
            b,
            column_a,
            column_b,
            out,
            diff_out,
        },
        Command::Validate {
            grid,
            records,
            overpass,
            station_lat,
            station_lon,
            georef,
            window,
            wavelength,
            column,
            out,
        } => Invocation::Validate {
            grid,
            column,
            records,
            overpass,
            station_lat,
            station_lon,
            georef: parse_georef(&georef)?,
            window_seconds: window,
            wavelength_nm: wavelength,
            out,
        },
        Command::MakeTable {
            channels,
            components,
            nodes,
            out,
        } => Invocation::MakeTable {
            channels,
            components,
            nodes,
            out,
        },
        Command::Rerun { .. } => return Ok(None),
    };
    Ok(Some(inv))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Rerun { manifest, check } => commands::rerun(&manifest, check),
        command => invocation(command).and_then(|inv| commands::run(&inv.expect("not a rerun"))),
    };
    match result {
        Ok(outcome) if outcome.convergence_warning => {
            eprintln!("warning: chains did not converge; outputs are flagged");
            ExitCode::from(EXIT_NOT_CONVERGED as u8)
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
