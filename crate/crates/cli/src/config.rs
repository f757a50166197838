//! Run settings, read from TOML files and recorded verbatim in manifests.

use std::path::PathBuf;

use aod_core::forward::SurrogateParams;
use aod_core::lattice::PatchSpec;
use aod_core::model::HyperpriorConstants;
use aod_core::parallel::{RoundConfig, SummarySource};
use aod_core::sampler::{ChainConfig, Sigma2Update};
use aod_core::simgen::{CloudRect, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default settings file.
pub const CONFIG_ENV: &str = "AODRET_CONFIG";

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, what: &str) -> CliResult<T> {
    toml::from_str(text).map_err(|e| CliError::config(format!("invalid {what}: {}", e.to_string().trim_end())))
}

/// A settings file: optional `[simulate]` and `[retrieve]` tables.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub simulate: Option<SimSettings>,
    pub retrieve: Option<RetrieveSettings>,
}

impl ConfigFile {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        parse_toml(text, "config")
    }
}

/// Forward model selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ForwardSettings {
    /// Deterministic MISR-like surrogate sized to the block.
    Surrogate,
    /// Radiance table file.
    Table { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSettings {
    /// Half-open row range `[start, end)`.
    pub rows: [usize; 2],
    pub cols: [usize; 2],
}

/// Settings of `simulate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSettings {
    pub rows: usize,
    pub cols: usize,
    pub resolution_km: f64,
    pub channels: usize,
    pub kappa: f64,
    pub alpha: Vec<f64>,
    pub noise_fraction: f64,
    pub center: f64,
    pub seed: u64,
    pub per_component: bool,
    pub clouds: Vec<CloudSettings>,
}

impl Default for SimSettings {
    fn default() -> Self {
        let d = SimConfig::default();
        Self {
            rows: d.rows,
            cols: d.cols,
            resolution_km: d.resolution_km,
            channels: aod_core::forward::DEFAULT_CHANNELS,
            kappa: d.kappa,
            alpha: d.alpha,
            noise_fraction: d.noise_fraction,
            center: d.center,
            seed: d.seed,
            per_component: d.per_component,
            clouds: Vec::new(),
        }
    }
}

impl SimSettings {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        parse_toml(text, "simulation config")
    }

    pub fn sim_config(&self) -> CliResult<SimConfig> {
        if self.rows == 0 || self.cols == 0 {
            return Err(CliError::config("rows and cols must be at least 1"));
        }
        if self.channels == 0 {
            return Err(CliError::config("channels must be at least 1"));
        }
        let config = SimConfig {
            rows: self.rows,
            cols: self.cols,
            resolution_km: self.resolution_km,
            clouds: self
                .clouds
                .iter()
                .map(|c| CloudRect {
                    rows: c.rows[0]..c.rows[1],
                    cols: c.cols[0]..c.cols[1],
                })
                .collect(),
            kappa: self.kappa,
            alpha: self.alpha.clone(),
            noise_fraction: self.noise_fraction,
            center: self.center,
            seed: self.seed,
            per_component: self.per_component,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn surrogate(&self) -> CliResult<SurrogateParams> {
        Ok(SurrogateParams::misr_like(self.channels, self.alpha.len())?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sigma2Kernel {
    Conjugate,
    MetropolisHastings,
}

/// Sampler tuning, mirroring [`ChainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub adapt_acceptance: bool,
    pub acceptance_band: [f64; 2],
    pub adapt_interval: usize,
    pub alpha_step: f64,
    pub tau_scale: f64,
    pub theta_local_weight: f64,
    pub theta_concentration: f64,
    pub shift_move: bool,
    pub shift_step: f64,
    pub sigma2_update: Sigma2Kernel,
    pub sigma2_floor: f64,
    pub kappa_shape: f64,
    pub kappa_rate: f64,
    pub nu0: f64,
    pub s0_sq: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        let c = ChainConfig::default();
        Self {
            adapt_acceptance: c.adapt_acceptance,
            acceptance_band: [c.acceptance_band.0, c.acceptance_band.1],
            adapt_interval: c.adapt_interval,
            alpha_step: c.alpha_step,
            tau_scale: c.tau_scale,
            theta_local_weight: c.theta_local_weight,
            theta_concentration: c.theta_concentration,
            shift_move: c.shift_move,
            shift_step: c.shift_step,
            sigma2_update: Sigma2Kernel::Conjugate,
            sigma2_floor: c.sigma2_floor,
            kappa_shape: c.priors.kappa_shape,
            kappa_rate: c.priors.kappa_rate,
            nu0: c.priors.nu0,
            s0_sq: c.priors.s0_sq,
        }
    }
}

/// Settings of `retrieve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieveSettings {
    pub iterations: usize,
    pub burn_in: usize,
    pub thinning: usize,
    pub seed: u64,
    pub chains: usize,
    pub workers: usize,
    pub parallel: bool,
    /// Patch arrangement `[rows, cols]` of the parallel sampler.
    pub patch_grid: [usize; 2],
    /// Patch size `[height, width]` in pixels.
    pub patch_size: [usize; 2],
    pub min_overlap: usize,
    pub iterations_per_round: usize,
    /// Log-posterior R-hat at or above which the run is flagged.
    pub rhat_threshold: f64,
    /// Per-pixel R-hat at or above which a pixel is marked failed.
    pub pixel_rhat_threshold: f64,
    pub acf_max_lag: usize,
    pub forward: ForwardSettings,
    pub sampler: SamplerSettings,
}

impl Default for RetrieveSettings {
    fn default() -> Self {
        let c = ChainConfig::default();
        let p = PatchSpec::default();
        Self {
            iterations: c.iterations,
            burn_in: c.burn_in,
            thinning: c.thinning,
            seed: c.seed,
            chains: 1,
            workers: 1,
            parallel: false,
            patch_grid: [p.grid_rows, p.grid_cols],
            patch_size: [p.height, p.width],
            min_overlap: p.min_overlap,
            iterations_per_round: RoundConfig::DEFAULT_ITERATIONS_PER_ROUND,
            rhat_threshold: 1.1,
            pixel_rhat_threshold: 1.2,
            acf_max_lag: 50,
            forward: ForwardSettings::Surrogate,
            sampler: SamplerSettings::default(),
        }
    }
}

impl RetrieveSettings {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        parse_toml(text, "retrieval config")
    }

    pub fn chain_config(&self) -> CliResult<ChainConfig> {
        let s = &self.sampler;
        let config = ChainConfig {
            iterations: self.iterations,
            burn_in: self.burn_in,
            thinning: self.thinning,
            seed: self.seed,
            stream: 0,
            adapt_acceptance: s.adapt_acceptance,
            acceptance_band: (s.acceptance_band[0], s.acceptance_band[1]),
            adapt_interval: s.adapt_interval,
            alpha_step: s.alpha_step,
            tau_scale: s.tau_scale,
            theta_local_weight: s.theta_local_weight,
            theta_concentration: s.theta_concentration,
            shift_move: s.shift_move,
            shift_step: s.shift_step,
            sigma2_update: match s.sigma2_update {
                Sigma2Kernel::Conjugate => Sigma2Update::Conjugate,
                Sigma2Kernel::MetropolisHastings => Sigma2Update::MetropolisHastings,
            },
            sigma2_floor: s.sigma2_floor,
            priors: HyperpriorConstants {
                kappa_shape: s.kappa_shape,
                kappa_rate: s.kappa_rate,
                nu0: s.nu0,
                s0_sq: s.s0_sq,
            },
            fixed: Default::default(),
        };
        config.validate()?;
        if self.chains == 0 {
            return Err(CliError::config("chains must be at least 1"));
        }
        if self.workers == 0 {
            return Err(CliError::config("workers must be at least 1"));
        }
        if !(self.rhat_threshold > 1.0 && self.pixel_rhat_threshold > 1.0) {
            return Err(CliError::config("rhat_threshold and pixel_rhat_threshold must exceed 1"));
        }
        Ok(config)
    }

    pub fn patch_spec(&self) -> PatchSpec {
        PatchSpec {
            grid_rows: self.patch_grid[0],
            grid_cols: self.patch_grid[1],
            height: self.patch_size[0],
            width: self.patch_size[1],
            min_overlap: self.min_overlap,
        }
    }

    pub fn round_config(&self) -> CliResult<RoundConfig> {
        if self.iterations_per_round == 0 {
            return Err(CliError::config("iterations_per_round must be at least 1"));
        }
        Ok(RoundConfig {
            iterations_per_round: self.iterations_per_round,
            rounds: self.iterations.div_ceil(self.iterations_per_round),
            workers: self.workers,
            summaries: SummarySource::default(),
        })
    }
}
