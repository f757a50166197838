//! Fine-resolution aerosol optical depth (AOD) retrieval.
//!
//! The engine infers a per-pixel AOD field `tau` and per-pixel aerosol mixing
//! vectors `theta` from multi-channel top-of-atmosphere radiances. The model is
//! hierarchical:
//!
//! ```text
//! L_p | tau_p, theta_p ~ N(L_rt(tau_p, theta_p), diag(sigma2))
//! tau | kappa          ~ intrinsic first-order GMRF(kappa)
//! theta_p | alpha      ~ Dirichlet(alpha)
//! sigma2_c             ~ 1 / sigma2_c
//! kappa                ~ 1 / kappa
//! alpha                ~ exp(sum_m (1 - alpha_m))
//! ```
//!
//! Inference runs a Metropolis-within-Gibbs sampler over the whole block
//! ([`sampler::run_chain`]) or over overlapping patches that periodically
//! exchange global summary statistics ([`parallel::run_parallel`]).

pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod forward;
pub mod lattice;
pub mod model;
pub mod parallel;
pub mod sampler;
pub mod simgen;
pub mod validation;

pub use error::{Error, Result};
pub use forward::{ForwardModel, RadianceTable, Surrogate, SurrogateParams, TauSupport};
pub use lattice::{Adjacency, BlockGrid, PatchLayout, PatchSpec};
pub use model::{AerosolState, HyperState, RadianceBlock};
pub use sampler::{ChainConfig, ChainInit, ChainRecord};
