//! Evaluation quantities: RMSE over replications, 2-D kernel density
//! estimates of position draws, and an exact grid posterior for the
//! clamped-channel model used to validate the sampler.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::MeasurementBatch;
use crate::estimator::PosteriorSummary;
use crate::model::{ClampedChannelModel, FixedChannel, ModelError, PriorSpec, SufficientStats};
use crate::sampler::{self, diagnostics::mean_ess, SampleChain, SamplerConfig, SamplerError};
use crate::scenario::{Anchor, Position};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no replications to aggregate")]
    Empty,
    #[error("replication {index} has {found} rounds, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("need at least 2 samples for a density estimate, got {0}")]
    TooFewSamples(usize),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("round {round} of replication {index} lacks {variable}")]
    MissingVariable {
        index: usize,
        round: usize,
        variable: &'static str,
    },
    #[error("fixed channel list does not match the anchors: {0}")]
    FixedChannel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("csv output: {0}")]
    Io(#[from] std::io::Error),
}

/// RMSE of the posterior-mean coordinates per round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseCurve {
    pub rmse_x: Vec<f64>,
    pub rmse_y: Vec<f64>,
    pub replications: usize,
}

impl RmseCurve {
    pub fn rounds(&self) -> usize {
        self.rmse_x.len()
    }

    /// RMSE at 1-based `round`.
    pub fn at(&self, round: usize) -> (f64, f64) {
        (self.rmse_x[round - 1], self.rmse_y[round - 1])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "coord", "rmse_m", "n_reps"])
            .map_err(csv_io)?;
        let reps = self.replications.to_string();
        for (k, (rx, ry)) in self.rmse_x.iter().zip(&self.rmse_y).enumerate() {
            let round = (k + 1).to_string();
            w.write_record([round.as_str(), "x", &rx.to_string(), &reps])
                .map_err(csv_io)?;
            w.write_record([round.as_str(), "y", &ry.to_string(), &reps])
                .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> std::io::Error {
    std::io::Error::other(e.to_string())
}

pub fn rmse_curve(
    histories: &[Vec<PosteriorSummary>],
    truth: Position,
) -> Result<RmseCurve, AnalysisError> {
    let first = histories.first().ok_or(AnalysisError::Empty)?;
    let rounds = first.len();
    let mut sx = vec![0.0; rounds];
    let mut sy = vec![0.0; rounds];
    for (index, h) in histories.iter().enumerate() {
        if h.len() != rounds {
            return Err(AnalysisError::LengthMismatch {
                index,
                expected: rounds,
                found: h.len(),
            });
        }
        for (k, s) in h.iter().enumerate() {
            let mean = |variable: &'static str| {
                s.variable(variable)
                    .map(|v| v.mean)
                    .ok_or(AnalysisError::MissingVariable {
                        index,
                        round: k + 1,
                        variable,
                    })
            };
            sx[k] += (mean("x")? - truth.x).powi(2);
            sy[k] += (mean("y")? - truth.y).powi(2);
        }
    }
    let n = histories.len() as f64;
    Ok(RmseCurve {
        rmse_x: sx.into_iter().map(|s| (s / n).sqrt()).collect(),
        rmse_y: sy.into_iter().map(|s| (s / n).sqrt()).collect(),
        replications: histories.len(),
    })
}

/// Rectangular lattice; values live at cell centres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Cells per axis.
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: usize) -> Self {
        Self { x_min, x_max, y_min, y_max, resolution }
    }

    pub fn floor_plan(length: f64, width: f64, resolution: usize) -> Self {
        Self::new(0.0, length, 0.0, width, resolution)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(AnalysisError::InvalidGrid(format!(
                "extents [{}, {}] x [{}, {}]",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        if self.resolution < 2 {
            return Err(AnalysisError::InvalidGrid(format!(
                "resolution {} below 2",
                self.resolution
            )));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / self.resolution as f64
    }

    pub fn dy(&self) -> f64 {
        (self.y_max - self.y_min) / self.resolution as f64
    }

    pub fn x_centres(&self) -> Vec<f64> {
        (0..self.resolution)
            .map(|i| self.x_min + (i as f64 + 0.5) * self.dx())
            .collect()
    }

    pub fn y_centres(&self) -> Vec<f64> {
        (0..self.resolution)
            .map(|j| self.y_min + (j as f64 + 0.5) * self.dy())
            .collect()
    }

    fn with_resolution(&self, resolution: usize) -> Self {
        Self { resolution, ..*self }
    }
}

/// Density values on a [`GridSpec`], row-major with `y` as the row index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDensity {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl GridDensity {
    fn normalized(grid: GridSpec, mut values: Vec<f64>) -> Result<Self, AnalysisError> {
        let total: f64 = values.iter().sum::<f64>() * grid.dx() * grid.dy();
        if !(total > 0.0 && total.is_finite()) {
            return Err(AnalysisError::InvalidGrid(
                "no probability mass falls on the grid".into(),
            ));
        }
        values.iter_mut().for_each(|v| *v /= total);
        Ok(Self { grid, values })
    }

    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.grid.resolution + ix]
    }

    /// Riemann sum over the grid.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx() * self.grid.dy()
    }

    /// Cell centre with the largest density; the first one on ties.
    pub fn argmax(&self) -> Position {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        let r = self.grid.resolution;
        Position::new(
            self.grid.x_centres()[best % r],
            self.grid.y_centres()[best / r],
        )
    }

    fn marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let r = self.grid.resolution;
        let mut mx = vec![0.0; r];
        let mut my = vec![0.0; r];
        for iy in 0..r {
            for ix in 0..r {
                let p = self.at(ix, iy) * self.grid.dx() * self.grid.dy();
                mx[ix] += p;
                my[iy] += p;
            }
        }
        (mx, my)
    }

    pub fn mean(&self) -> Position {
        let (mx, my) = self.marginals();
        Position::new(
            moment(&self.grid.x_centres(), &mx, 0.0, 1),
            moment(&self.grid.y_centres(), &my, 0.0, 1),
        )
    }

    /// Marginal standard deviations of `x` and `y`.
    pub fn std(&self) -> (f64, f64) {
        let (mx, my) = self.marginals();
        let m = self.mean();
        (
            moment(&self.grid.x_centres(), &mx, m.x, 2).sqrt(),
            moment(&self.grid.y_centres(), &my, m.y, 2).sqrt(),
        )
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "density"]).map_err(csv_io)?;
        let xs = self.grid.x_centres();
        for (iy, y) in self.grid.y_centres().iter().enumerate() {
            let ys = y.to_string();
            for (ix, x) in xs.iter().enumerate() {
                w.write_record([x.to_string(), ys.clone(), self.at(ix, iy).to_string()])
                    .map_err(csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn moment(centres: &[f64], weights: &[f64], about: f64, power: i32) -> f64 {
    centres
        .iter()
        .zip(weights)
        .map(|(c, w)| w * (c - about).powi(power))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeGrid {
    pub density: GridDensity,
    /// Kernel standard deviations along `x` and `y`.
    pub bandwidth: [f64; 2],
    /// Set when a Scott's-rule bandwidth fell below the floor and was raised.
    pub bandwidth_floored: bool,
    pub samples: usize,
}

impl KdeGrid {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("kde grids serialize")
    }
}

/// Kernels are truncated this many bandwidths from each sample.
const KERNEL_REACH: f64 = 6.0;

fn sample_std(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Per-sample kernel weights on one axis: first cell index and weights.
fn axis_kernel(v: f64, centres: &[f64], h: f64) -> (usize, Vec<f64>) {
    let lo = centres.partition_point(|&c| c < v - KERNEL_REACH * h);
    let hi = centres.partition_point(|&c| c <= v + KERNEL_REACH * h);
    let w = centres[lo..hi]
        .iter()
        .map(|c| (-0.5 * ((c - v) / h).powi(2)).exp())
        .collect();
    (lo, w)
}

/// Product Gaussian KDE of `(xs[k], ys[k])` normalized over `grid`.
///
/// Bandwidths default to Scott's rule `std * n^(-1/6)` per axis and never go
/// below one cell width.
pub fn kde_2d(
    xs: &[f64],
    ys: &[f64],
    grid: GridSpec,
    bandwidth: Option<[f64; 2]>,
) -> Result<KdeGrid, AnalysisError> {
    grid.validate()?;
    let n = xs.len().min(ys.len());
    if n < 2 || xs.len() != ys.len() {
        return Err(AnalysisError::TooFewSamples(n));
    }
    let floor = [grid.dx(), grid.dy()];
    let rule = bandwidth.unwrap_or_else(|| {
        let factor = (n as f64).powf(-1.0 / 6.0);
        [sample_std(xs) * factor, sample_std(ys) * factor]
    });
    let mut floored = false;
    let mut h = [0.0; 2];
    for k in 0..2 {
        h[k] = if rule[k] >= floor[k] {
            rule[k]
        } else {
            floored = true;
            floor[k]
        };
    }
    let (cx, cy) = (grid.x_centres(), grid.y_centres());
    let r = grid.resolution;
    let mut values = vec![0.0; r * r];
    for (&x, &y) in xs.iter().zip(ys) {
        let (x0, wx) = axis_kernel(x, &cx, h[0]);
        let (y0, wy) = axis_kernel(y, &cy, h[1]);
        for (j, wyj) in wy.iter().enumerate() {
            let row = &mut values[(y0 + j) * r + x0..(y0 + j) * r + x0 + wx.len()];
            for (v, wxi) in row.iter_mut().zip(&wx) {
                *v += wyj * wxi;
            }
        }
    }
    Ok(KdeGrid {
        density: GridDensity::normalized(grid, values)?,
        bandwidth: h,
        bandwidth_floored: floored,
        samples: n,
    })
}

/// Exact posterior of `(x, y)` with known channel parameters and a flat
/// prior over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OraclePosterior {
    pub density: GridDensity,
    pub mean: Position,
    pub std: (f64, f64),
    pub argmax: Position,
}

pub fn grid_posterior_oracle(
    batch: &MeasurementBatch,
    anchors: &[Anchor],
    fixed: &[FixedChannel],
    grid: GridSpec,
) -> Result<OraclePosterior, AnalysisError> {
    grid.validate()?;
    let mut terms = Vec::with_capacity(fixed.len());
    for c in fixed {
        let anchor = anchors
            .iter()
            .find(|a| a.id == c.anchor_id)
            .ok_or_else(|| AnalysisError::FixedChannel(format!("no anchor {}", c.anchor_id)))?;
        let samples = batch
            .samples(c.anchor_id)
            .ok_or_else(|| AnalysisError::FixedChannel(format!("batch lacks {}", c.anchor_id)))?;
        if !(c.sigma > 0.0) {
            return Err(AnalysisError::FixedChannel(format!(
                "sigma of anchor {} must be positive",
                c.anchor_id
            )));
        }
        terms.push((anchor.position, *c, SufficientStats::from_samples(samples)));
    }
    if terms.len() != batch.per_anchor().len() {
        return Err(AnalysisError::FixedChannel(
            "every measured anchor needs fixed parameters".into(),
        ));
    }
    let (cx, cy) = (grid.x_centres(), grid.y_centres());
    let rows: Vec<Vec<f64>> = cy
        .par_iter()
        .map(|&y| {
            cx.iter()
                .map(|&x| {
                    terms
                        .iter()
                        .map(|(p, c, s)| {
                            let d = ((x - p.x).powi(2) + (y - p.y).powi(2)).sqrt();
                            let mu = c.rho0 + c.eta * d.log10();
                            -0.5 * (s.m2 + s.n * (s.mean - mu).powi(2)) / (c.sigma * c.sigma)
                        })
                        .sum::<f64>()
                })
                .collect()
        })
        .collect();
    let log_values: Vec<f64> = rows.into_iter().flatten().collect();
    let peak = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let density =
        GridDensity::normalized(grid, log_values.iter().map(|v| (v - peak).exp()).collect())?;
    Ok(OraclePosterior {
        mean: density.mean(),
        std: density.std(),
        argmax: density.argmax(),
        density,
    })
}

/// MCMC versus grid oracle on the clamped-channel model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleComparison {
    pub oracle_mean: [f64; 2],
    pub oracle_std: [f64; 2],
    pub mcmc_mean: [f64; 2],
    pub mcmc_std: [f64; 2],
    /// Monte Carlo standard error of the MCMC means.
    pub mcse: [f64; 2],
    /// Shift of the oracle mean when the grid resolution is halved.
    pub grid_error: [f64; 2],
    pub combined_se: [f64; 2],
    /// `|mcmc - oracle| / combined_se`.
    pub z: [f64; 2],
    pub tolerance: f64,
    pub pass: bool,
    pub divergences: usize,
}

/// Agreement threshold in combined standard errors.
pub const ORACLE_TOLERANCE: f64 = 3.0;

/// Compares pooled `(x, y)` draws (columns 0 and 1) with an oracle grid.
pub fn compare_with_oracle(
    chains: &[SampleChain],
    oracle: &OraclePosterior,
    coarse: &OraclePosterior,
) -> OracleComparison {
    let mut cmp = OracleComparison {
        oracle_mean: [oracle.mean.x, oracle.mean.y],
        oracle_std: [oracle.std.0, oracle.std.1],
        mcmc_mean: [0.0; 2],
        mcmc_std: [0.0; 2],
        mcse: [0.0; 2],
        grid_error: [
            (oracle.mean.x - coarse.mean.x).abs(),
            (oracle.mean.y - coarse.mean.y).abs(),
        ],
        combined_se: [0.0; 2],
        z: [0.0; 2],
        tolerance: ORACLE_TOLERANCE,
        pass: true,
        divergences: chains.iter().map(SampleChain::divergences).sum(),
    };
    for j in 0..2 {
        let per_chain: Vec<Vec<f64>> = chains.iter().map(|c| c.column(j)).collect();
        let pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let std = sample_std(&pooled);
        let ess = mean_ess(&per_chain);
        cmp.mcmc_mean[j] = mean;
        cmp.mcmc_std[j] = std;
        cmp.mcse[j] = std / ess.sqrt();
        cmp.combined_se[j] = (cmp.mcse[j].powi(2) + cmp.grid_error[j].powi(2)).sqrt();
        cmp.z[j] = (mean - cmp.oracle_mean[j]).abs() / cmp.combined_se[j];
        cmp.pass &= cmp.z[j] <= ORACLE_TOLERANCE;
    }
    cmp
}

/// Samples the clamped-channel model with a flat prior over `grid` and
/// compares it with the exact grid posterior.
pub fn mcmc_vs_oracle(
    batch: &MeasurementBatch,
    anchors: &[Anchor],
    fixed: &[FixedChannel],
    grid: GridSpec,
    sampler_config: &SamplerConfig,
) -> Result<(OracleComparison, OraclePosterior, Vec<SampleChain>), AnalysisError> {
    let oracle = grid_posterior_oracle(batch, anchors, fixed, grid)?;
    let coarse =
        grid_posterior_oracle(batch, anchors, fixed, grid.with_resolution(grid.resolution / 2))?;
    let x = PriorSpec::Uniform { lo: grid.x_min, hi: grid.x_max };
    let y = PriorSpec::Uniform { lo: grid.y_min, hi: grid.y_max };
    let model = ClampedChannelModel::new(x, y, fixed.to_vec(), batch, anchors)?;
    // start every chain at the grid centre, jittered by the sampler
    let start = vec![vec![0.0, 0.0]];
    let out = sampler::sample(&model, sampler_config, &start)?;
    let cmp = compare_with_oracle(&out.chains, &oracle, &coarse);
    Ok((cmp, oracle, out.chains))
}
