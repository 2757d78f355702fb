//! The iterative estimation loop.
//!
//! Measurements accumulate in a per-anchor buffer. Once every anchor holds at
//! least `min_batch` samples, [`EstimatorState::step`] samples the posterior
//! under the current priors, records a [`PosteriorSummary`], clears the
//! buffer, and derives the next round's priors from that summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{sample_batch, ChannelError, MeasurementBatch, RngSeed};
use crate::model::{initial_priors, updated_priors, ModelError, PositionModel, PriorSet};
use crate::sampler::{self, SampleChain, SamplerConfig, SamplerError};
use crate::scenario::{Anchor, Scenario};

/// Stream tags for [`RngSeed::derive`] inside a campaign.
pub const MEASUREMENT_STREAM: u64 = 0x6d65_6173;
pub const SAMPLER_STREAM: u64 = 0x6e75_7473;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("unknown anchor id {0}")]
    UnknownAnchor(u32),
    #[error("non-finite measurement for anchor {0}")]
    NonFinite(u32),
    #[error("round {round}: sampler failed: {source}")]
    Sampler {
        round: usize,
        #[source]
        source: SamplerError,
    },
    #[error("round {round}: {source}")]
    Model {
        round: usize,
        #[source]
        source: ModelError,
    },
    #[error("round {round}: posterior of {variable} is degenerate (std {std})")]
    DegeneratePosterior {
        round: usize,
        variable: String,
        std: f64,
    },
    #[error("round {round}: measurements not ready")]
    NotReady { round: usize },
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSummary {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub q05: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q95: f64,
    pub rhat: f64,
    pub ess: f64,
}

/// Posterior of one round in natural units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub round_index: usize,
    pub anchor_ids: Vec<u32>,
    pub variables: Vec<VariableSummary>,
    pub divergences: usize,
    pub mean_tree_depth: f64,
    pub step_size: f64,
}

impl PosteriorSummary {
    pub fn variable(&self, name: &str) -> Option<&VariableSummary> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn x(&self) -> &VariableSummary {
        self.variable("x").expect("summaries always carry x")
    }

    pub fn y(&self) -> &VariableSummary {
        self.variable("y").expect("summaries always carry y")
    }
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Summarizes pooled chain draws. `names` follows the chain's column order.
pub fn summarize(
    round_index: usize,
    anchor_ids: Vec<u32>,
    names: &[String],
    chains: &[SampleChain],
) -> Result<PosteriorSummary, EstimatorError> {
    let diag = if chains.len() >= 2 {
        Some(sampler::diagnostics(chains).map_err(|source| EstimatorError::Sampler {
            round: round_index,
            source,
        })?)
    } else {
        None
    };
    let mut variables = Vec::with_capacity(names.len());
    for (j, name) in names.iter().enumerate() {
        let mut all: Vec<f64> = chains.iter().flat_map(|c| c.column(j)).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        if !(std > 0.0 && std.is_finite()) {
            return Err(EstimatorError::DegeneratePosterior {
                round: round_index,
                variable: name.clone(),
                std,
            });
        }
        all.sort_by(f64::total_cmp);
        variables.push(VariableSummary {
            name: name.clone(),
            mean,
            std,
            q05: quantile(&all, 0.05),
            q25: quantile(&all, 0.25),
            q50: quantile(&all, 0.50),
            q75: quantile(&all, 0.75),
            q95: quantile(&all, 0.95),
            rhat: diag.as_ref().map_or(f64::NAN, |d| d.rhat[j]),
            ess: diag.as_ref().map_or(f64::NAN, |d| d.ess_bulk[j]),
        });
    }
    let total: usize = chains.iter().map(SampleChain::len).sum();
    let depth: usize = chains.iter().flat_map(|c| &c.stats).map(|s| s.tree_depth).sum();
    Ok(PosteriorSummary {
        round_index,
        anchor_ids,
        variables,
        divergences: chains.iter().map(SampleChain::divergences).sum(),
        mean_tree_depth: depth as f64 / total.max(1) as f64,
        step_size: chains.first().and_then(|c| c.stats.first()).map_or(f64::NAN, |s| s.step_size),
    })
}

pub const HISTORY_CSV_HEADER: [&str; 12] = [
    "round", "variable", "mean", "std", "q05", "q25", "q50", "q75", "q95", "rhat", "ess",
    "divergences",
];

/// One row per round and variable.
pub fn write_history_csv<W: std::io::Write>(
    out: W,
    history: &[PosteriorSummary],
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| std::io::Error::other(e.to_string());
    w.write_record(HISTORY_CSV_HEADER).map_err(io)?;
    for s in history {
        for v in &s.variables {
            w.write_record([
                s.round_index.to_string(),
                v.name.clone(),
                v.mean.to_string(),
                v.std.to_string(),
                v.q05.to_string(),
                v.q25.to_string(),
                v.q50.to_string(),
                v.q75.to_string(),
                v.q95.to_string(),
                v.rhat.to_string(),
                v.ess.to_string(),
                s.divergences.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()
}

/// JSON array of per-round summaries. Non-finite diagnostics become `null`.
pub fn history_to_json(history: &[PosteriorSummary]) -> String {
    serde_json::to_string_pretty(history).expect("summaries serialize")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Per-anchor sample count that triggers an estimation.
    pub min_batch: usize,
    pub max_rounds: usize,
    pub inflation: f64,
    /// Replaces the default first-round priors when set.
    pub initial_priors: Option<PriorSet>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            min_batch: 250,
            max_rounds: 20,
            inflation: 2.0,
            initial_priors: None,
        }
    }
}

/// A completed round: its summary and the raw chains behind it.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub summary: PosteriorSummary,
    pub chains: Vec<SampleChain>,
    pub priors: PriorSet,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    /// Some anchor has fewer than `min_batch` buffered samples.
    NotReady,
    Estimated(Box<RoundOutput>),
    /// `max_rounds` estimations have already been made.
    Complete,
}

#[derive(Debug, Clone)]
pub struct EstimatorState {
    anchors: Vec<Anchor>,
    round: usize,
    priors: PriorSet,
    history: Vec<PosteriorSummary>,
    buffer: BTreeMap<u32, Vec<f64>>,
    config: EstimatorConfig,
}

impl EstimatorState {
    pub fn new(scenario: &Scenario, config: EstimatorConfig) -> Result<Self, EstimatorError> {
        if config.min_batch == 0 {
            return Err(EstimatorError::InvalidConfig("min_batch must be at least 1".into()));
        }
        if !(config.inflation > 0.0 && config.inflation.is_finite()) {
            return Err(EstimatorError::InvalidConfig(format!(
                "inflation must be positive, got {}",
                config.inflation
            )));
        }
        let priors = match &config.initial_priors {
            Some(p) => {
                p.validate().map_err(|source| EstimatorError::Model { round: 1, source })?;
                let ids: Vec<u32> = p.anchors.iter().map(|a| a.anchor_id).collect();
                let expected: Vec<u32> = scenario.anchors().iter().map(|a| a.id).collect();
                if ids != expected {
                    return Err(EstimatorError::InvalidConfig(format!(
                        "initial priors cover anchors {ids:?}, scenario has {expected:?}"
                    )));
                }
                p.clone()
            }
            None => initial_priors(scenario),
        };
        Ok(Self {
            anchors: scenario.anchors().to_vec(),
            round: 1,
            priors,
            history: Vec::new(),
            buffer: scenario.anchors().iter().map(|a| (a.id, Vec::new())).collect(),
            config,
        })
    }

    /// Index of the next estimation, starting at 1.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn priors(&self) -> &PriorSet {
        &self.priors
    }

    pub fn history(&self) -> &[PosteriorSummary] {
        &self.history
    }

    pub fn buffered(&self, anchor_id: u32) -> usize {
        self.buffer.get(&anchor_id).map_or(0, Vec::len)
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Appends samples to the buffer. Either every id is known and all
    /// samples are appended, or nothing changes.
    pub fn push_measurements(
        &mut self,
        partial: &BTreeMap<u32, Vec<f64>>,
    ) -> Result<(), EstimatorError> {
        for (&id, samples) in partial {
            if !self.buffer.contains_key(&id) {
                return Err(EstimatorError::UnknownAnchor(id));
            }
            if samples.iter().any(|v| !v.is_finite()) {
                return Err(EstimatorError::NonFinite(id));
            }
        }
        for (id, samples) in partial {
            if let Some(buf) = self.buffer.get_mut(id) {
                buf.extend_from_slice(samples);
            }
        }
        Ok(())
    }

    pub fn is_ready(&self) -> bool {
        self.buffer.values().all(|b| b.len() >= self.config.min_batch)
    }

    /// Runs one estimation if the buffer is full enough.
    ///
    /// The batch holds the first `n` buffered samples of every anchor, where
    /// `n` is the smallest per-anchor count. Round `k` samples with seed
    /// `RngSeed(sampler.seed).derive(k)`.
    pub fn step(&mut self, sampler: &SamplerConfig) -> Result<StepOutcome, EstimatorError> {
        if self.history.len() >= self.config.max_rounds {
            return Ok(StepOutcome::Complete);
        }
        if !self.is_ready() {
            return Ok(StepOutcome::NotReady);
        }
        let round = self.round;
        let n = self.buffer.values().map(Vec::len).min().unwrap_or(0);
        let per_anchor = self
            .buffer
            .iter()
            .map(|(&id, v)| (id, v[..n].to_vec()))
            .collect();
        let batch = MeasurementBatch::new(round, per_anchor)?;
        let model = PositionModel::new(self.priors.clone(), &batch, &self.anchors)
            .map_err(|source| EstimatorError::Model { round, source })?;

        let seed = RngSeed(sampler.seed).derive(round as u64);
        let inits: Vec<Vec<f64>> = (0..sampler.chains)
            .map(|c| sampler::initialize(&self.priors, seed.derive(1 << 32 | c as u64)).0)
            .collect();
        let config = SamplerConfig {
            seed: seed.0,
            ..sampler.clone()
        };
        let out = sampler::sample(&model, &config, &inits)
            .map_err(|source| EstimatorError::Sampler { round, source })?;
        let anchor_ids: Vec<u32> = self.priors.anchors.iter().map(|a| a.anchor_id).collect();
        let summary = summarize(round, anchor_ids, model.layout().names(), &out.chains)?;
        let next = updated_priors(&summary, self.config.inflation)
            .map_err(|source| EstimatorError::Model { round, source })?;

        let used = std::mem::replace(&mut self.priors, next);
        self.history.push(summary.clone());
        self.buffer.values_mut().for_each(Vec::clear);
        self.round += 1;
        Ok(StepOutcome::Estimated(Box::new(RoundOutput {
            summary,
            chains: out.chains,
            priors: used,
        })))
    }
}

/// Settings for a closed-loop simulated campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSpec {
    pub rounds: usize,
    pub samples_per_round: usize,
    pub estimator: EstimatorConfig,
}

impl CampaignSpec {
    pub fn new(rounds: usize, samples_per_round: usize) -> Self {
        Self {
            rounds,
            samples_per_round,
            estimator: EstimatorConfig {
                min_batch: samples_per_round,
                max_rounds: rounds,
                ..Default::default()
            },
        }
    }
}

/// Drives an estimator through `spec.rounds` rounds, pulling each round's
/// samples from `source` and handing every completed round to `observe`.
///
/// The sampler seed is replaced by `seed.derive(SAMPLER_STREAM)`, so a
/// campaign is fully determined by `(scenario, spec, sampler, seed, source)`.
pub fn run_rounds<S, O>(
    scenario: &Scenario,
    spec: &CampaignSpec,
    sampler: &SamplerConfig,
    seed: RngSeed,
    mut source: S,
    mut observe: O,
) -> Result<Vec<PosteriorSummary>, EstimatorError>
where
    S: FnMut(usize) -> Result<BTreeMap<u32, Vec<f64>>, EstimatorError>,
    O: FnMut(&RoundOutput),
{
    if spec.rounds == 0 {
        return Err(EstimatorError::InvalidConfig("rounds must be at least 1".into()));
    }
    let mut state = EstimatorState::new(
        scenario,
        EstimatorConfig {
            max_rounds: spec.rounds,
            ..spec.estimator.clone()
        },
    )?;
    let sampler = SamplerConfig {
        seed: seed.derive(SAMPLER_STREAM).0,
        ..sampler.clone()
    };
    for round in 1..=spec.rounds {
        let samples = source(round)?;
        state.push_measurements(&samples)?;
        match state.step(&sampler)? {
            StepOutcome::Estimated(out) => observe(&out),
            StepOutcome::NotReady => return Err(EstimatorError::NotReady { round }),
            StepOutcome::Complete => break,
        }
    }
    Ok(state.history)
}

/// Fresh simulated measurements for round `round` of a campaign seeded by
/// `seed`.
pub fn simulated_round(
    scenario: &Scenario,
    samples_per_round: usize,
    seed: RngSeed,
    round: usize,
) -> Result<MeasurementBatch, EstimatorError> {
    let stream = seed.derive(MEASUREMENT_STREAM).derive(round as u64);
    Ok(sample_batch(scenario, samples_per_round, stream)?.with_round(round))
}

/// Closed-loop simulation with default estimator settings: fresh measurements
/// each round, `min_batch = samples_per_round`, inflation 2.
pub fn run_campaign(
    scenario: &Scenario,
    rounds: usize,
    samples_per_round: usize,
    sampler: &SamplerConfig,
    seed: RngSeed,
) -> Result<Vec<PosteriorSummary>, EstimatorError> {
    let spec = CampaignSpec::new(rounds, samples_per_round);
    run_spec(scenario, &spec, sampler, seed)
}

/// Like [`run_campaign`] with explicit estimator settings.
pub fn run_spec(
    scenario: &Scenario,
    spec: &CampaignSpec,
    sampler: &SamplerConfig,
    seed: RngSeed,
) -> Result<Vec<PosteriorSummary>, EstimatorError> {
    run_rounds(
        scenario,
        spec,
        sampler,
        seed,
        |round| {
            simulated_round(scenario, spec.samples_per_round, seed, round)
                .map(MeasurementBatch::into_per_anchor)
        },
        |_| {},
    )
}
