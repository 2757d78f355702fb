//! Run configuration: a TOML file whose every key has a default.
//!
//! Validation errors name the dotted key and, when the key appears in the
//! file, its line number.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::GridSpec;
use crate::estimator::{CampaignSpec, EstimatorConfig};
use crate::model::{initial_priors, FixedChannel, PriorSet, PriorSpec};
use crate::sampler::SamplerConfig;
use crate::scenario::{corner_anchors, Anchor, ChannelParams, Position, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}{location}: {reason}")]
    Invalid {
        key: String,
        location: String,
        reason: String,
    },
    #[error("missing section [{0}]")]
    MissingSection(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorEntry {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub length: f64,
    pub width: f64,
    pub target: [f64; 2],
    /// Defaults to one anchor per corner.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchors: Option<Vec<AnchorEntry>>,
    pub channel: ChannelParams,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            length: 100.0,
            width: 100.0,
            target: [25.0, 25.0],
            anchors: None,
            channel: ChannelParams::default(),
        }
    }
}

/// First-round priors applied to every anchor, replacing the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelPriors {
    pub rho0: PriorSpec,
    pub eta: PriorSpec,
    pub sigma: PriorSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    pub rounds: usize,
    pub samples_per_round: usize,
    pub min_batch: usize,
    pub inflation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub initial_priors: Option<ChannelPriors>,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        Self {
            rounds: 20,
            samples_per_round: 250,
            min_batch: 250,
            inflation: 2.0,
            initial_priors: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CampaignSection {
    pub replications: usize,
    /// Replicate `r` runs with seed `base_seed + r`.
    pub base_seed: u64,
    /// Worker threads; 0 uses the available parallelism.
    pub workers: usize,
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            replications: 50,
            base_seed: 0,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub directory: PathBuf,
    /// Formats of the per-replicate posterior histories.
    pub formats: Vec<Format>,
    pub kde_rounds: Vec<usize>,
    pub kde_resolution: usize,
    /// Raw chain draws of every round, per replicate.
    pub dump_draws: bool,
    /// Simulated measurements, per replicate, in the replay schema.
    pub measurements: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            directory: PathBuf::from("results"),
            formats: vec![Format::Csv, Format::Json],
            kde_rounds: vec![1, 6, 20],
            kde_resolution: 200,
            dump_draws: false,
            measurements: false,
        }
    }
}

/// Known channel parameters in model convention: `mu = rho0 + eta log10(D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedChannelSection {
    pub rho0: f64,
    pub eta: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub samples_per_anchor: usize,
    pub resolution: usize,
    /// Independent batches, seeded `base_seed + t`.
    pub trials: usize,
    /// Trials that must agree for an overall pass.
    pub min_pass: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed_channel: Option<FixedChannelSection>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            samples_per_anchor: 250,
            resolution: 200,
            trials: 10,
            min_pass: 9,
            fixed_channel: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub estimator: EstimatorSection,
    pub sampler: SamplerConfig,
    pub campaign: CampaignSection,
    pub output: OutputSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSection>,
}

/// A parsed config together with the text it came from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    pub source: String,
    pub path: PathBuf,
}

impl LoadedConfig {
    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&source, path)
    }

    pub fn parse(source: &str, path: &Path) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(source).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string().trim_end().to_string(),
        })?;
        let loaded = Self {
            config,
            source: source.to_string(),
            path: path.to_path_buf(),
        };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.config.validate().map_err(|(key, reason)| ConfigError::Invalid {
            location: match locate_key(&self.source, &key) {
                Some(line) => format!(" ({}:{line})", self.path.display()),
                None => String::new(),
            },
            key,
            reason,
        })
    }
}

/// 1-based line of a dotted key such as `estimator.inflation`.
pub fn locate_key(source: &str, key: &str) -> Option<usize> {
    // a bare name refers to a whole section
    let (section, leaf) = key.rsplit_once('.').unwrap_or((key, ""));
    let mut current = String::new();
    let mut header_line = None;
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            current = t.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == leaf {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

type Invalid = (String, String);

fn check(ok: bool, key: &str, reason: impl FnOnce() -> String) -> Result<(), Invalid> {
    if ok {
        Ok(())
    } else {
        Err((key.to_string(), reason()))
    }
}

impl RunConfig {
    /// Semantic checks; returns the offending dotted key and the reason.
    pub fn validate(&self) -> Result<(), Invalid> {
        self.scenario().map_err(|e| ("scenario".to_string(), e))?;
        let est = &self.estimator;
        check(est.rounds >= 1, "estimator.rounds", || "must be at least 1".into())?;
        check(est.samples_per_round >= 1, "estimator.samples_per_round", || {
            "must be at least 1".into()
        })?;
        check(est.min_batch >= 1, "estimator.min_batch", || "must be at least 1".into())?;
        check(
            est.min_batch <= est.samples_per_round,
            "estimator.min_batch",
            || {
                format!(
                    "{} exceeds samples_per_round {}; no round could ever run",
                    est.min_batch, est.samples_per_round
                )
            },
        )?;
        check(
            est.inflation > 0.0 && est.inflation.is_finite(),
            "estimator.inflation",
            || format!("must be positive, got {}", est.inflation),
        )?;
        if let Some(p) = &est.initial_priors {
            for (name, spec) in [("rho0", p.rho0), ("eta", p.eta), ("sigma", p.sigma)] {
                let key = format!("estimator.initial_priors.{name}");
                spec.validate().map_err(|r| (key.clone(), r))?;
                if name == "sigma" {
                    check(matches!(spec, PriorSpec::HalfNormal { .. }), &key, || {
                        "noise scale prior must be half_normal".into()
                    })?;
                }
            }
        }
        if let Err(e) = self.sampler.validate() {
            let reason = match e {
                crate::sampler::SamplerError::InvalidConfig(m) => m,
                other => other.to_string(),
            };
            // messages lead with the field name
            let field = reason.split_whitespace().next().unwrap_or_default();
            return Err((format!("sampler.{field}"), reason));
        }
        check(self.campaign.replications >= 1, "campaign.replications", || {
            "must be at least 1".into()
        })?;
        let out = &self.output;
        check(out.kde_resolution >= 2, "output.kde_resolution", || {
            "must be at least 2".into()
        })?;
        check(
            out.kde_rounds.iter().all(|&k| k >= 1),
            "output.kde_rounds",
            || "rounds are 1-based".into(),
        )?;
        if let Some(o) = &self.oracle {
            check(o.samples_per_anchor >= 1, "oracle.samples_per_anchor", || {
                "must be at least 1".into()
            })?;
            check(o.resolution >= 4, "oracle.resolution", || "must be at least 4".into())?;
            check(o.trials >= 1, "oracle.trials", || "must be at least 1".into())?;
            check(o.min_pass <= o.trials, "oracle.min_pass", || {
                format!("{} exceeds trials {}", o.min_pass, o.trials)
            })?;
            if let Some(f) = &o.fixed_channel {
                check(
                    f.sigma > 0.0 && f.rho0.is_finite() && f.eta.is_finite(),
                    "oracle.fixed_channel.sigma",
                    || "sigma must be positive and all values finite".into(),
                )?;
            }
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<Scenario, String> {
        let s = &self.scenario;
        let anchors: Vec<Anchor> = match &s.anchors {
            Some(list) => list.iter().map(|a| Anchor::new(a.id, a.x, a.y)).collect(),
            None => corner_anchors(s.length, s.width),
        };
        Scenario::new(
            s.length,
            s.width,
            anchors,
            Position::new(s.target[0], s.target[1]),
            s.channel,
        )
        .map_err(|e| e.to_string())
    }

    pub fn initial_priors(&self, scenario: &Scenario) -> PriorSet {
        let mut priors = initial_priors(scenario);
        if let Some(p) = &self.estimator.initial_priors {
            for a in &mut priors.anchors {
                a.rho0 = p.rho0;
                a.eta = p.eta;
                a.sigma = p.sigma;
            }
        }
        priors
    }

    pub fn campaign_spec(&self, scenario: &Scenario) -> CampaignSpec {
        CampaignSpec {
            rounds: self.estimator.rounds,
            samples_per_round: self.estimator.samples_per_round,
            estimator: self.estimator_config(scenario),
        }
    }

    pub fn estimator_config(&self, scenario: &Scenario) -> EstimatorConfig {
        EstimatorConfig {
            min_batch: self.estimator.min_batch,
            max_rounds: self.estimator.rounds,
            inflation: self.estimator.inflation,
            initial_priors: self
                .estimator
                .initial_priors
                .map(|_| self.initial_priors(scenario)),
        }
    }

    pub fn kde_grid(&self) -> GridSpec {
        GridSpec::floor_plan(
            self.scenario.length,
            self.scenario.width,
            self.output.kde_resolution,
        )
    }

    /// Fixed channel for every anchor, or the name of the missing section.
    pub fn fixed_channels(&self, scenario: &Scenario) -> Result<Vec<FixedChannel>, ConfigError> {
        let f = self
            .oracle
            .as_ref()
            .and_then(|o| o.fixed_channel)
            .ok_or_else(|| ConfigError::MissingSection("oracle.fixed_channel".into()))?;
        Ok(scenario
            .anchors()
            .iter()
            .map(|a| FixedChannel {
                anchor_id: a.id,
                rho0: f.rho0,
                eta: f.eta,
                sigma: f.sigma,
            })
            .collect())
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs serialize")
    }
}
