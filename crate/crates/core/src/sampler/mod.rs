//! Gradient-based MCMC over any differentiable log density.
//!
//! [`sample`] runs independent NUTS chains with dual-averaging step-size
//! adaptation and a windowed diagonal metric during warmup. Chain `c` draws
//! from the stream `config.seed.derive(c)`, so results do not depend on how
//! chains are scheduled across threads.

mod adapt;
pub mod diagnostics;
mod nuts;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::RngSeed;
use crate::model::{LatentVector, PriorSet};

pub use nuts::MAX_DELTA_H;

use adapt::{DualAveraging, VarianceEstimator, WindowSchedule};
use nuts::{find_reasonable_step_size, Hamiltonian, Nuts, Point};

/// A log density (up to a constant) with its gradient, over unconstrained
/// coordinates.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Writes the gradient into `gradient` and returns the log density.
    /// Non-finite values are allowed and are treated as zero density.
    fn log_density_gradient(&self, position: &[f64], gradient: &mut [f64]) -> f64;

    /// Maps an unconstrained position to the reported (natural) space.
    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        out.copy_from_slice(position);
    }
}

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
    #[error("chain {chain}: initialization failed: {reason}")]
    Initialization { chain: usize, reason: String },
    #[error(
        "chain {chain}: all {draws} draws were divergent (step size {step_size:.3e}, \
         mean tree depth {mean_tree_depth:.2})"
    )]
    SamplingFailure {
        chain: usize,
        draws: usize,
        step_size: f64,
        mean_tree_depth: f64,
    },
    #[error("diagnostics unavailable: {0}")]
    Diagnostics(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_draws: usize,
    pub sampling_draws: usize,
    pub target_accept: f64,
    pub max_tree_depth: usize,
    pub seed: u64,
    /// `None` starts from a heuristic search around 1.0.
    pub initial_step_size: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_draws: 500,
            sampling_draws: 500,
            target_accept: 0.8,
            max_tree_depth: 10,
            seed: 0,
            initial_step_size: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidConfig(m));
        if self.chains == 0 {
            return bad("chains must be at least 1".into());
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad(format!("target_accept must be in (0, 1), got {}", self.target_accept));
        }
        if self.warmup_draws == 0 || self.sampling_draws == 0 {
            return bad("warmup_draws and sampling_draws must be at least 1".into());
        }
        if !(1..=15).contains(&self.max_tree_depth) {
            return bad(format!("max_tree_depth must be in [1, 15], got {}", self.max_tree_depth));
        }
        if let Some(eps) = self.initial_step_size {
            if !(eps > 0.0 && eps.is_finite()) {
                return bad(format!("initial_step_size must be positive, got {eps}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DrawStats {
    pub divergent: bool,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub accept_stat: f64,
    pub energy: f64,
}

/// Post-warmup draws of one chain, in constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleChain {
    pub chain_id: usize,
    dim: usize,
    draws: Vec<f64>,
    pub stats: Vec<DrawStats>,
}

impl SampleChain {
    /// Draws without sampler statistics, row-major by draw.
    #[cfg(test)]
    pub(crate) fn from_draws(chain_id: usize, dim: usize, draws: Vec<f64>) -> Self {
        let stats = DrawStats {
            divergent: false,
            tree_depth: 0,
            n_leapfrog: 0,
            step_size: f64::NAN,
            accept_stat: f64::NAN,
            energy: f64::NAN,
        };
        Self {
            chain_id,
            dim,
            stats: vec![stats; draws.len() / dim],
            draws,
        }
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn draw(&self, i: usize) -> &[f64] {
        &self.draws[i * self.dim..(i + 1) * self.dim]
    }

    pub fn draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.chunks_exact(self.dim)
    }

    /// Trace of variable `j`.
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws().map(|d| d[j]).collect()
    }

    pub fn divergences(&self) -> usize {
        self.stats.iter().filter(|s| s.divergent).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub rhat: Vec<f64>,
    pub ess_bulk: Vec<f64>,
    /// ESS of the raw draws, for Monte Carlo standard errors of means.
    pub ess_mean: Vec<f64>,
    /// Variables whose draws are all identical; their R-hat and ESS are NaN.
    pub degenerate: Vec<bool>,
    pub divergences: usize,
    pub total_draws: usize,
    pub mean_tree_depth: f64,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> f64 {
        self.rhat.iter().copied().fold(f64::NAN, f64::max)
    }

    pub fn divergence_rate(&self) -> f64 {
        self.divergences as f64 / self.total_draws.max(1) as f64
    }
}

/// Split R-hat and ESS per variable plus divergence totals.
pub fn diagnostics(chains: &[SampleChain]) -> Result<Diagnostics, SamplerError> {
    if chains.len() < 2 {
        return Err(SamplerError::Diagnostics(format!(
            "R-hat needs at least 2 chains, got {}",
            chains.len()
        )));
    }
    let n = chains[0].len();
    let dim = chains[0].dim();
    if chains.iter().any(|c| c.len() != n || c.dim() != dim) {
        return Err(SamplerError::Diagnostics("chains differ in length or dimension".into()));
    }
    if n < 4 {
        return Err(SamplerError::Diagnostics(format!("need at least 4 draws per chain, got {n}")));
    }
    let mut rhat = Vec::with_capacity(dim);
    let mut ess_bulk = Vec::with_capacity(dim);
    let mut ess_mean = Vec::with_capacity(dim);
    let mut degenerate = Vec::with_capacity(dim);
    for j in 0..dim {
        let traces: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        let r = diagnostics::rank_normalized_rhat(&traces);
        rhat.push(r);
        ess_bulk.push(diagnostics::bulk_ess(&traces));
        ess_mean.push(diagnostics::mean_ess(&traces));
        degenerate.push(r.is_nan());
    }
    let total_draws = n * chains.len();
    let depth_sum: usize = chains.iter().flat_map(|c| &c.stats).map(|s| s.tree_depth).sum();
    Ok(Diagnostics {
        rhat,
        ess_bulk,
        ess_mean,
        degenerate,
        divergences: chains.iter().map(SampleChain::divergences).sum(),
        total_draws,
        mean_tree_depth: depth_sum as f64 / total_draws as f64,
    })
}

#[derive(Debug, Clone)]
pub struct SampleOutput {
    pub chains: Vec<SampleChain>,
    /// `None` for single-chain runs.
    pub diagnostics: Option<Diagnostics>,
}

/// Draws a starting point from the priors (unconstrained coordinates).
pub fn initialize(priors: &PriorSet, seed: RngSeed) -> LatentVector {
    priors.sample_latent(&mut seed.rng())
}

/// Runs `config.chains` chains. `inits` holds either one starting point per
/// chain or a single point, which every chain then perturbs by a uniform
/// jitter in `[-1, 1]` per coordinate.
pub fn sample<T: LogDensity>(
    target: &T,
    config: &SamplerConfig,
    inits: &[Vec<f64>],
) -> Result<SampleOutput, SamplerError> {
    config.validate()?;
    let dim = target.dim();
    if inits.len() != 1 && inits.len() != config.chains {
        return Err(SamplerError::InvalidConfig(format!(
            "expected 1 or {} initial points, got {}",
            config.chains,
            inits.len()
        )));
    }
    if let Some(bad) = inits.iter().find(|q| q.len() != dim) {
        return Err(SamplerError::InvalidConfig(format!(
            "initial point has dimension {}, target has {dim}",
            bad.len()
        )));
    }
    let seed = RngSeed(config.seed);
    let chains: Vec<SampleChain> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed.derive(c as u64).rng();
            let init = if inits.len() == 1 && config.chains > 1 {
                inits[0]
                    .iter()
                    .map(|q| q + rng.random_range(-1.0..1.0))
                    .collect()
            } else {
                inits[c.min(inits.len() - 1)].clone()
            };
            run_chain(target, config, c, init, &mut rng)
        })
        .collect::<Result<_, _>>()?;
    let diagnostics = if chains.len() >= 2 {
        Some(diagnostics(&chains)?)
    } else {
        None
    };
    Ok(SampleOutput { chains, diagnostics })
}

fn run_chain<T: LogDensity, R: Rng>(
    target: &T,
    config: &SamplerConfig,
    chain_id: usize,
    init: Vec<f64>,
    rng: &mut R,
) -> Result<SampleChain, SamplerError> {
    let dim = target.dim();
    let mut point = Point::new(target, init);
    if !point.is_finite() {
        return Err(SamplerError::Initialization {
            chain: chain_id,
            reason: format!("log density {} or its gradient is not finite", point.logp),
        });
    }
    let mut inv_mass = vec![1.0; dim];
    let init_error = |reason: &str| SamplerError::Initialization {
        chain: chain_id,
        reason: reason.to_string(),
    };
    let mut step_size = {
        let ham = Hamiltonian { target, inv_mass: &inv_mass };
        find_reasonable_step_size(&ham, &point, config.initial_step_size.unwrap_or(1.0), rng)
            .ok_or_else(|| init_error("no usable step size"))?
    };
    let mut dual = DualAveraging::new(config.target_accept);
    dual.restart(step_size);
    let mut schedule = WindowSchedule::new(config.warmup_draws);
    let mut estimator = VarianceEstimator::new(dim);

    for _ in 0..config.warmup_draws {
        let info = Nuts {
            ham: Hamiltonian { target, inv_mass: &inv_mass },
            step_size,
            max_depth: config.max_tree_depth,
        }
        .transition(&mut point, rng);
        step_size = dual.update(info.accept_stat);
        if let Some(var) = schedule.observe(&mut estimator, &point.q) {
            inv_mass = var;
            let ham = Hamiltonian { target, inv_mass: &inv_mass };
            step_size = find_reasonable_step_size(&ham, &point, step_size, rng)
                .ok_or_else(|| init_error("no usable step size after metric update"))?;
            dual.restart(step_size);
        }
    }
    step_size = dual.final_step_size();

    let nuts = Nuts {
        ham: Hamiltonian { target, inv_mass: &inv_mass },
        step_size,
        max_depth: config.max_tree_depth,
    };
    let mut draws = Vec::with_capacity(config.sampling_draws * dim);
    let mut stats = Vec::with_capacity(config.sampling_draws);
    let mut constrained = vec![0.0; dim];
    for _ in 0..config.sampling_draws {
        let info = nuts.transition(&mut point, rng);
        target.constrain(&point.q, &mut constrained);
        draws.extend_from_slice(&constrained);
        stats.push(DrawStats {
            divergent: info.divergent,
            tree_depth: info.depth,
            n_leapfrog: info.n_leapfrog,
            step_size,
            accept_stat: info.accept_stat,
            energy: info.energy,
        });
    }
    if stats.iter().all(|s| s.divergent) {
        return Err(SamplerError::SamplingFailure {
            chain: chain_id,
            draws: stats.len(),
            step_size,
            mean_tree_depth: stats.iter().map(|s| s.tree_depth as f64).sum::<f64>()
                / stats.len() as f64,
        });
    }
    Ok(SampleChain {
        chain_id,
        dim,
        draws,
        stats,
    })
}
