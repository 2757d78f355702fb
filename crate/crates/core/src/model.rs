//! The localization Bayesian network: priors, the distance and mean-power
//! nodes, and a Gaussian likelihood per anchor.
//!
//! Latent variables are laid out as `[x, y, (rho0_i, eta_i, sigma_i) for each
//! anchor]`. The sampler works on an unconstrained copy of that vector:
//! uniform variables go through a scaled logit, half-normal variables through
//! a log, and normal variables are left alone. Log densities drop every
//! additive constant that does not depend on the latent values.
//!
//! The mean received power at anchor `i` is `rho0_i + eta_i * log10(D_i)`, so
//! with the simulator's positive path-loss magnitude the learned `eta_i` is
//! negative.

use std::collections::BTreeMap;
use std::f64::consts::LN_10;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::MeasurementBatch;
use crate::estimator::PosteriorSummary;
use crate::sampler::LogDensity;
use crate::scenario::{Anchor, Position, Scenario};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("latent vector has length {found}, layout expects {expected}")]
    LayoutMismatch { expected: usize, found: usize },
    #[error("anchor mismatch: {0}")]
    AnchorMismatch(String),
    #[error("{variable} = {value} is outside the prior support")]
    OutOfSupport { variable: String, value: f64 },
    #[error("invalid prior for {variable}: {reason}")]
    InvalidPrior { variable: String, reason: String },
    #[error("missing value for {0}")]
    MissingValue(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("prior set serialization: {0}")]
    Serialization(String),
}

/// Prior family for one latent variable, parameters in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform { lo: f64, hi: f64 },
    Normal { mean: f64, std: f64 },
    HalfNormal { scale: f64 },
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), String> {
        match *self {
            PriorSpec::Uniform { lo, hi } if lo.is_finite() && hi.is_finite() && lo < hi => Ok(()),
            PriorSpec::Uniform { lo, hi } => Err(format!("uniform needs lo < hi, got ({lo}, {hi})")),
            PriorSpec::Normal { mean, std } if mean.is_finite() && std.is_finite() && std > 0.0 => {
                Ok(())
            }
            PriorSpec::Normal { mean, std } => {
                Err(format!("normal needs finite mean and std > 0, got ({mean}, {std})"))
            }
            PriorSpec::HalfNormal { scale } if scale.is_finite() && scale > 0.0 => Ok(()),
            PriorSpec::HalfNormal { scale } => Err(format!("half-normal needs scale > 0, got {scale}")),
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            PriorSpec::Uniform { lo, hi } => x > lo && x < hi,
            PriorSpec::Normal { .. } => x.is_finite(),
            PriorSpec::HalfNormal { .. } => x > 0.0 && x.is_finite(),
        }
    }

    /// Log density in natural units, up to a constant.
    pub fn log_density(&self, x: f64) -> f64 {
        if !self.in_support(x) {
            return f64::NEG_INFINITY;
        }
        match *self {
            PriorSpec::Uniform { .. } => 0.0,
            PriorSpec::Normal { mean, std } => {
                let u = (x - mean) / std;
                -0.5 * u * u
            }
            PriorSpec::HalfNormal { scale } => {
                let u = x / scale;
                -0.5 * u * u
            }
        }
    }

    fn dlog_density(&self, x: f64) -> f64 {
        match *self {
            PriorSpec::Uniform { .. } => 0.0,
            PriorSpec::Normal { mean, std } => -(x - mean) / (std * std),
            PriorSpec::HalfNormal { scale } => -x / (scale * scale),
        }
    }

    pub fn constrain(&self, z: f64) -> f64 {
        match *self {
            PriorSpec::Uniform { lo, hi } => lo + (hi - lo) * sigmoid(z),
            PriorSpec::Normal { .. } => z,
            PriorSpec::HalfNormal { .. } => z.exp(),
        }
    }

    pub fn unconstrain(&self, x: f64) -> Option<f64> {
        if !self.in_support(x) {
            return None;
        }
        Some(match *self {
            PriorSpec::Uniform { lo, hi } => ((x - lo) / (hi - x)).ln(),
            PriorSpec::Normal { .. } => x,
            PriorSpec::HalfNormal { .. } => x.ln(),
        })
    }

    /// Returns `(x, dx/dz, log|dx/dz|, d log|dx/dz| / dz)` at `z`.
    fn transform(&self, z: f64) -> (f64, f64, f64, f64) {
        match *self {
            PriorSpec::Uniform { lo, hi } => {
                let w = hi - lo;
                let s = sigmoid(z);
                let log_jac = w.ln() - softplus(-z) - softplus(z);
                (lo + w * s, w * s * (1.0 - s), log_jac, 1.0 - 2.0 * s)
            }
            PriorSpec::Normal { .. } => (z, 1.0, 0.0, 0.0),
            PriorSpec::HalfNormal { .. } => {
                let x = z.exp();
                (x, x, z, 1.0)
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            PriorSpec::Uniform { lo, hi } => loop {
                let x = lo + (hi - lo) * rng.random::<f64>();
                if x > lo && x < hi {
                    break x;
                }
            },
            PriorSpec::Normal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + std * z
            }
            PriorSpec::HalfNormal { scale } => loop {
                let z: f64 = StandardNormal.sample(rng);
                let x = scale * z.abs();
                if x > 0.0 {
                    break x;
                }
            },
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorPriors {
    pub anchor_id: u32,
    pub rho0: PriorSpec,
    pub eta: PriorSpec,
    pub sigma: PriorSpec,
}

/// One prior per latent variable, in latent-vector order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub x: PriorSpec,
    pub y: PriorSpec,
    pub anchors: Vec<AnchorPriors>,
}

impl PriorSet {
    pub fn dim(&self) -> usize {
        2 + 3 * self.anchors.len()
    }

    pub fn specs(&self) -> Vec<PriorSpec> {
        let mut out = Vec::with_capacity(self.dim());
        out.push(self.x);
        out.push(self.y);
        for a in &self.anchors {
            out.extend([a.rho0, a.eta, a.sigma]);
        }
        out
    }

    pub fn layout(&self) -> LatentLayout {
        LatentLayout::new(self.anchors.iter().map(|a| a.anchor_id))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, spec) in self.layout().names().iter().zip(self.specs()) {
            spec.validate().map_err(|reason| ModelError::InvalidPrior {
                variable: name.clone(),
                reason,
            })?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        serde_json::to_string_pretty(self).map_err(|e| ModelError::Serialization(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let set: PriorSet =
            serde_json::from_str(text).map_err(|e| ModelError::Serialization(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    /// Maps unconstrained coordinates back to natural units.
    pub fn constrain(&self, v: &LatentVector) -> Result<Vec<f64>, ModelError> {
        check_len(self.dim(), v.len())?;
        Ok(self
            .specs()
            .iter()
            .zip(v.values())
            .map(|(s, &z)| s.constrain(z))
            .collect())
    }

    /// Draws one point from the priors, returned in unconstrained space.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> LatentVector {
        LatentVector(
            self.specs()
                .iter()
                .map(|s| {
                    let x = s.sample(rng);
                    s.unconstrain(x).expect("prior draws lie in the support")
                })
                .collect(),
        )
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), ModelError> {
    if expected != found {
        return Err(ModelError::LayoutMismatch { expected, found });
    }
    Ok(())
}

/// Names of the latent variables in vector order.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentLayout {
    names: Vec<String>,
}

impl LatentLayout {
    pub fn new(anchor_ids: impl IntoIterator<Item = u32>) -> Self {
        let mut names = vec!["x".to_string(), "y".to_string()];
        for id in anchor_ids {
            names.push(format!("rho0_{id}"));
            names.push(format!("eta_{id}"));
            names.push(format!("sigma_{id}"));
        }
        Self { names }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Latent variables in unconstrained coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogDensityResult {
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

/// Maps named natural-unit values into the unconstrained latent vector.
pub fn unconstrain(
    priors: &PriorSet,
    constrained: &BTreeMap<String, f64>,
) -> Result<LatentVector, ModelError> {
    let layout = priors.layout();
    let mut out = Vec::with_capacity(layout.len());
    for (name, spec) in layout.names().iter().zip(priors.specs()) {
        let value = *constrained
            .get(name)
            .ok_or_else(|| ModelError::MissingValue(name.clone()))?;
        let z = spec.unconstrain(value).ok_or_else(|| ModelError::OutOfSupport {
            variable: name.clone(),
            value,
        })?;
        out.push(z);
    }
    Ok(LatentVector(out))
}

/// Inverse of [`unconstrain`].
pub fn constrain(
    priors: &PriorSet,
    v: &LatentVector,
) -> Result<BTreeMap<String, f64>, ModelError> {
    let values = priors.constrain(v)?;
    Ok(priors.layout().names().iter().cloned().zip(values).collect())
}

pub const INITIAL_RHO0: PriorSpec = PriorSpec::Normal { mean: 0.0, std: 100.0 };
pub const INITIAL_ETA: PriorSpec = PriorSpec::Normal { mean: 0.0, std: 100.0 };
pub const INITIAL_SIGMA: PriorSpec = PriorSpec::HalfNormal { scale: 10.0 };

/// First-round priors: flat position over the floor plan and weak channel
/// priors for every anchor.
pub fn initial_priors(scenario: &Scenario) -> PriorSet {
    PriorSet {
        x: PriorSpec::Uniform { lo: 0.0, hi: scenario.length() },
        y: PriorSpec::Uniform { lo: 0.0, hi: scenario.width() },
        anchors: scenario
            .anchors()
            .iter()
            .map(|a| AnchorPriors {
                anchor_id: a.id,
                rho0: INITIAL_RHO0,
                eta: INITIAL_ETA,
                sigma: INITIAL_SIGMA,
            })
            .collect(),
    }
}

/// Turns a posterior summary into the next round's priors.
///
/// Every variable becomes `Normal(mean, inflation * std)` except the noise
/// scales, which stay half-normal with scale `mean + inflation * std`.
pub fn updated_priors(
    summary: &PosteriorSummary,
    inflation: f64,
) -> Result<PriorSet, ModelError> {
    if !(inflation > 0.0 && inflation.is_finite()) {
        return Err(ModelError::ContractViolation(format!(
            "inflation must be positive, got {inflation}"
        )));
    }
    let stat = |name: &str| -> Result<(f64, f64), ModelError> {
        let v = summary
            .variable(name)
            .ok_or_else(|| ModelError::ContractViolation(format!("summary lacks {name}")))?;
        if !(v.std > 0.0 && v.std.is_finite() && v.mean.is_finite()) {
            return Err(ModelError::ContractViolation(format!(
                "posterior of {name} has mean {} and std {}",
                v.mean, v.std
            )));
        }
        Ok((v.mean, v.std))
    };
    let normal = |name: &str| -> Result<PriorSpec, ModelError> {
        let (mean, std) = stat(name)?;
        Ok(PriorSpec::Normal { mean, std: inflation * std })
    };
    let mut anchors = Vec::with_capacity(summary.anchor_ids.len());
    for &id in &summary.anchor_ids {
        let (sigma_mean, sigma_std) = stat(&format!("sigma_{id}"))?;
        anchors.push(AnchorPriors {
            anchor_id: id,
            rho0: normal(&format!("rho0_{id}"))?,
            eta: normal(&format!("eta_{id}"))?,
            sigma: PriorSpec::HalfNormal {
                scale: sigma_mean + inflation * sigma_std,
            },
        });
    }
    Ok(PriorSet {
        x: normal("x")?,
        y: normal("y")?,
        anchors,
    })
}

/// Per-anchor data reduced to count, mean and centered sum of squares.
///
/// `sum_k (r_k - mu)^2 = m2 + n (mean - mu)^2` exactly, which keeps the
/// likelihood O(1) per anchor regardless of batch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SufficientStats {
    pub n: f64,
    pub mean: f64,
    pub m2: f64,
}

impl SufficientStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut n = 0.0;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for &v in samples {
            n += 1.0;
            let delta = v - mean;
            mean += delta / n;
            m2 += delta * (v - mean);
        }
        Self { n, mean, m2 }
    }
}

/// Gaussian log-likelihood of one anchor's samples and its partials with
/// respect to `(mu, sigma)`.
fn anchor_log_lik(stats: &SufficientStats, mu: f64, sigma: f64) -> (f64, f64, f64) {
    if stats.n == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let resid = stats.mean - mu;
    let ss = stats.m2 + stats.n * resid * resid;
    let inv_var = 1.0 / (sigma * sigma);
    let ll = -stats.n * sigma.ln() - 0.5 * ss * inv_var;
    let d_mu = stats.n * resid * inv_var;
    let d_sigma = -stats.n / sigma + ss * inv_var / sigma;
    (ll, d_mu, d_sigma)
}

/// `log10(D)` and its partials with respect to the target coordinates.
fn log_distance(x: f64, y: f64, anchor: &Position) -> (f64, f64, f64) {
    let dx = x - anchor.x;
    let dy = y - anchor.y;
    let d2 = dx * dx + dy * dy;
    let scale = 1.0 / (LN_10 * d2);
    (0.5 * d2.ln() / LN_10, dx * scale, dy * scale)
}

#[derive(Debug, Clone)]
struct AnchorData {
    position: Position,
    stats: SufficientStats,
}

fn anchor_data(
    anchor_ids: &[u32],
    batch: &MeasurementBatch,
    anchors: &[Anchor],
) -> Result<Vec<AnchorData>, ModelError> {
    if batch.per_anchor().len() != anchor_ids.len() {
        return Err(ModelError::AnchorMismatch(format!(
            "batch covers {} anchors, model has {}",
            batch.per_anchor().len(),
            anchor_ids.len()
        )));
    }
    anchor_ids
        .iter()
        .map(|&id| {
            let anchor = anchors
                .iter()
                .find(|a| a.id == id)
                .ok_or_else(|| ModelError::AnchorMismatch(format!("no anchor with id {id}")))?;
            let samples = batch
                .samples(id)
                .ok_or_else(|| ModelError::AnchorMismatch(format!("batch lacks anchor {id}")))?;
            Ok(AnchorData {
                position: anchor.position,
                stats: SufficientStats::from_samples(samples),
            })
        })
        .collect()
}

/// Full model: target position plus per-anchor channel parameters.
#[derive(Debug, Clone)]
pub struct PositionModel {
    priors: PriorSet,
    specs: Vec<PriorSpec>,
    data: Vec<AnchorData>,
}

impl PositionModel {
    pub fn new(
        priors: PriorSet,
        batch: &MeasurementBatch,
        anchors: &[Anchor],
    ) -> Result<Self, ModelError> {
        priors.validate()?;
        let ids: Vec<u32> = priors.anchors.iter().map(|a| a.anchor_id).collect();
        let data = anchor_data(&ids, batch, anchors)?;
        let specs = priors.specs();
        Ok(Self { priors, specs, data })
    }

    pub fn priors(&self) -> &PriorSet {
        &self.priors
    }

    pub fn layout(&self) -> LatentLayout {
        self.priors.layout()
    }

    pub fn log_posterior(&self, v: &LatentVector) -> Result<LogDensityResult, ModelError> {
        check_len(self.dim(), v.len())?;
        let mut gradient = vec![0.0; self.dim()];
        let log_density = self.evaluate(v.values(), &mut gradient);
        Ok(LogDensityResult { log_density, gradient })
    }

    fn evaluate(&self, z: &[f64], grad: &mut [f64]) -> f64 {
        // prior and Jacobian of one coordinate; d/d(natural) goes to `grad`
        let prior = |i: usize, grad: &mut [f64]| {
            let spec = &self.specs[i];
            let (v, dvdz, log_jac, dlog_jac) = spec.transform(z[i]);
            grad[i] = spec.dlog_density(v);
            (v, spec.log_density(v) + log_jac, dvdz, dlog_jac)
        };
        let (x, lp_x, dx, jx) = prior(0, grad);
        let (y, lp_y, dy, jy) = prior(1, grad);
        let mut lp = lp_x + lp_y;
        for (j, anchor) in self.data.iter().enumerate() {
            let base = 2 + 3 * j;
            let (rho0, lp_r, dr, jr) = prior(base, grad);
            let (eta, lp_e, de, je) = prior(base + 1, grad);
            let (sigma, lp_s, ds, js) = prior(base + 2, grad);
            let (l, dl_dx, dl_dy) = log_distance(x, y, &anchor.position);
            let (ll, d_mu, d_sigma) = anchor_log_lik(&anchor.stats, rho0 + eta * l, sigma);
            lp += lp_r + lp_e + lp_s + ll;
            grad[0] += d_mu * eta * dl_dx;
            grad[1] += d_mu * eta * dl_dy;
            grad[base] = (grad[base] + d_mu) * dr + jr;
            grad[base + 1] = (grad[base + 1] + d_mu * l) * de + je;
            grad[base + 2] = (grad[base + 2] + d_sigma) * ds + js;
        }
        grad[0] = grad[0] * dx + jx;
        grad[1] = grad[1] * dy + jy;
        lp
    }
}

impl LogDensity for PositionModel {
    fn dim(&self) -> usize {
        self.specs.len()
    }

    fn log_density_gradient(&self, position: &[f64], gradient: &mut [f64]) -> f64 {
        self.evaluate(position, gradient)
    }

    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        for ((o, s), &z) in out.iter_mut().zip(&self.specs).zip(position) {
            *o = s.constrain(z);
        }
    }
}

/// Log posterior and gradient of the full model at `v`.
pub fn log_posterior(
    priors: &PriorSet,
    batch: &MeasurementBatch,
    anchors: &[Anchor],
    v: &LatentVector,
) -> Result<LogDensityResult, ModelError> {
    PositionModel::new(priors.clone(), batch, anchors)?.log_posterior(v)
}

/// Known channel parameters for one anchor, in the model's sign convention
/// (`mu = rho0 + eta * log10(D)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedChannel {
    pub anchor_id: u32,
    pub rho0: f64,
    pub eta: f64,
    pub sigma: f64,
}

impl FixedChannel {
    /// The simulator's ground truth expressed in model convention.
    pub fn from_truth(scenario: &Scenario) -> Vec<FixedChannel> {
        let ch = scenario.channel();
        scenario
            .anchors()
            .iter()
            .map(|a| FixedChannel {
                anchor_id: a.id,
                rho0: ch.rho0,
                eta: -ch.eta,
                sigma: ch.sigma_shadow,
            })
            .collect()
    }
}

/// Reduced model with the channel parameters clamped: only `(x, y)` is latent.
#[derive(Debug, Clone)]
pub struct ClampedChannelModel {
    x: PriorSpec,
    y: PriorSpec,
    channels: Vec<FixedChannel>,
    data: Vec<AnchorData>,
}

impl ClampedChannelModel {
    pub fn new(
        x: PriorSpec,
        y: PriorSpec,
        channels: Vec<FixedChannel>,
        batch: &MeasurementBatch,
        anchors: &[Anchor],
    ) -> Result<Self, ModelError> {
        for (name, spec) in [("x", x), ("y", y)] {
            spec.validate().map_err(|reason| ModelError::InvalidPrior {
                variable: name.into(),
                reason,
            })?;
        }
        if let Some(c) = channels.iter().find(|c| !(c.sigma > 0.0)) {
            return Err(ModelError::ContractViolation(format!(
                "fixed sigma for anchor {} must be positive",
                c.anchor_id
            )));
        }
        let ids: Vec<u32> = channels.iter().map(|c| c.anchor_id).collect();
        let data = anchor_data(&ids, batch, anchors)?;
        Ok(Self { x, y, channels, data })
    }

    /// Log posterior of `(x, y)` in natural units, up to a constant.
    pub fn log_density_at(&self, x: f64, y: f64) -> f64 {
        let mut lp = self.x.log_density(x) + self.y.log_density(y);
        for (c, d) in self.channels.iter().zip(&self.data) {
            let (l, _, _) = log_distance(x, y, &d.position);
            lp += anchor_log_lik(&d.stats, c.rho0 + c.eta * l, c.sigma).0;
        }
        lp
    }
}

impl LogDensity for ClampedChannelModel {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_gradient(&self, position: &[f64], gradient: &mut [f64]) -> f64 {
        let (x, dx, lj_x, dlj_x) = self.x.transform(position[0]);
        let (y, dy, lj_y, dlj_y) = self.y.transform(position[1]);
        let mut lp = self.x.log_density(x) + self.y.log_density(y) + lj_x + lj_y;
        let mut gx = self.x.dlog_density(x);
        let mut gy = self.y.dlog_density(y);
        for (c, d) in self.channels.iter().zip(&self.data) {
            let (l, dl_dx, dl_dy) = log_distance(x, y, &d.position);
            let (ll, d_mu, _) = anchor_log_lik(&d.stats, c.rho0 + c.eta * l, c.sigma);
            lp += ll;
            gx += d_mu * c.eta * dl_dx;
            gy += d_mu * c.eta * dl_dy;
        }
        gradient[0] = gx * dx + dlj_x;
        gradient[1] = gy * dy + dlj_y;
        lp
    }

    fn constrain(&self, position: &[f64], out: &mut [f64]) {
        out[0] = self.x.constrain(position[0]);
        out[1] = self.y.constrain(position[1]);
    }
}
