//! Synthetic RSSI generation from the log-distance shadowed path-loss model.
//!
//! All randomness flows from [`RngSeed`]. A seed keys a ChaCha8 stream
//! (`rand_chacha`, expanded from the `u64` with `SeedableRng::seed_from_u64`)
//! and Gaussian shadowing is drawn with `rand_distr`'s ziggurat
//! `StandardNormal`. Both algorithms are platform independent, so a batch is a
//! pure function of `(scenario, count, seed)`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{distance, ChannelParams, Scenario};

/// Distances below this are clamped before taking the logarithm.
pub const DISTANCE_FLOOR: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("distance must be positive, got {0}")]
    NonPositiveDistance(f64),
    #[error("samples_per_anchor must be at least 1")]
    EmptyBatch,
    #[error("anchor {anchor}: expected {expected} samples, found {found}")]
    RaggedBatch {
        anchor: u32,
        expected: usize,
        found: usize,
    },
    #[error("anchor {anchor}: non-finite sample at index {index}")]
    NonFiniteSample { anchor: u32, index: usize },
    #[error("measurement CSV: {0}")]
    Csv(String),
}

/// Seed for every random stream in the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Derives an independent child seed for stream `tag`.
    ///
    /// The split is `splitmix64(seed ^ splitmix64(tag))`, so distinct tags give
    /// decorrelated seeds and the mapping is stable across releases.
    pub fn derive(self, tag: u64) -> RngSeed {
        RngSeed(splitmix64(self.0 ^ splitmix64(tag)))
    }

    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean received power at distance `d`: `rho0 - eta * log10(d)`.
pub fn mean_rss(channel: &ChannelParams, d: f64) -> Result<f64, ChannelError> {
    if !(d > 0.0) {
        return Err(ChannelError::NonPositiveDistance(d));
    }
    Ok(channel.rho0 - channel.eta * d.log10())
}

/// RSSI samples for one estimation round, keyed by anchor id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementBatch {
    round_index: usize,
    samples_per_anchor: usize,
    per_anchor: BTreeMap<u32, Vec<f64>>,
}

impl MeasurementBatch {
    /// Every anchor must carry the same number of finite samples.
    pub fn new(
        round_index: usize,
        per_anchor: BTreeMap<u32, Vec<f64>>,
    ) -> Result<Self, ChannelError> {
        let samples_per_anchor = per_anchor.values().next().map_or(0, Vec::len);
        for (&anchor, samples) in &per_anchor {
            if samples.len() != samples_per_anchor {
                return Err(ChannelError::RaggedBatch {
                    anchor,
                    expected: samples_per_anchor,
                    found: samples.len(),
                });
            }
            if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
                return Err(ChannelError::NonFiniteSample { anchor, index });
            }
        }
        Ok(Self {
            round_index,
            samples_per_anchor,
            per_anchor,
        })
    }

    /// A batch with no samples for any of the given anchors.
    pub fn empty(round_index: usize, anchor_ids: impl IntoIterator<Item = u32>) -> Self {
        Self {
            round_index,
            samples_per_anchor: 0,
            per_anchor: anchor_ids.into_iter().map(|id| (id, Vec::new())).collect(),
        }
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    pub fn with_round(mut self, round_index: usize) -> Self {
        self.round_index = round_index;
        self
    }

    pub fn samples_per_anchor(&self) -> usize {
        self.samples_per_anchor
    }

    pub fn samples(&self, anchor_id: u32) -> Option<&[f64]> {
        self.per_anchor.get(&anchor_id).map(Vec::as_slice)
    }

    pub fn per_anchor(&self) -> &BTreeMap<u32, Vec<f64>> {
        &self.per_anchor
    }

    pub fn into_per_anchor(self) -> BTreeMap<u32, Vec<f64>> {
        self.per_anchor
    }
}

/// Draws `samples_per_anchor` shadowed RSSI values for every anchor.
///
/// Anchors are visited in scenario order and each anchor's samples are drawn
/// consecutively from a single stream keyed by `seed`.
pub fn sample_batch(
    scenario: &Scenario,
    samples_per_anchor: usize,
    seed: RngSeed,
) -> Result<MeasurementBatch, ChannelError> {
    if samples_per_anchor == 0 {
        return Err(ChannelError::EmptyBatch);
    }
    let channel = scenario.channel();
    let mut rng = seed.rng();
    let mut per_anchor = BTreeMap::new();
    for anchor in scenario.anchors() {
        let d = distance(scenario.target(), anchor).max(DISTANCE_FLOOR);
        let mean = mean_rss(&channel, d)?;
        let samples = (0..samples_per_anchor)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + channel.sigma_shadow * z
            })
            .collect();
        per_anchor.insert(anchor.id, samples);
    }
    MeasurementBatch::new(0, per_anchor)
}

pub const CSV_HEADER: [&str; 4] = ["round", "anchor_id", "sample_index", "rssi_dbm"];

/// Writes batches as `round,anchor_id,sample_index,rssi_dbm` rows.
///
/// Values use Rust's shortest round-trip float formatting, so reading the file
/// back reproduces every sample bit for bit.
pub fn write_csv<'a, W: Write>(
    out: W,
    batches: impl IntoIterator<Item = &'a MeasurementBatch>,
) -> Result<(), ChannelError> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| ChannelError::Csv(e.to_string());
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for batch in batches {
        for (anchor, samples) in &batch.per_anchor {
            for (i, v) in samples.iter().enumerate() {
                w.write_record(&[
                    batch.round_index.to_string(),
                    anchor.to_string(),
                    i.to_string(),
                    v.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| ChannelError::Csv(e.to_string()))
}

/// One round's worth of samples as read from a file; not necessarily complete.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSamples {
    pub round: usize,
    pub per_anchor: BTreeMap<u32, Vec<f64>>,
}

/// Reads the strict four-column schema written by [`write_csv`].
///
/// Rows are grouped by round (ascending). Within an anchor, `sample_index`
/// must count up from 0 in file order.
pub fn read_csv<R: Read>(input: R) -> Result<Vec<RoundSamples>, ChannelError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let headers = reader
        .headers()
        .map_err(|e| ChannelError::Csv(e.to_string()))?
        .clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        let extra: Vec<_> = names.iter().filter(|n| !CSV_HEADER.contains(n)).collect();
        return Err(ChannelError::Csv(if extra.is_empty() {
            format!("header row: expected columns {CSV_HEADER:?}, found {names:?}")
        } else {
            format!("header row: unknown column(s) {extra:?}; expected exactly {CSV_HEADER:?}")
        }));
    }

    let mut rounds: BTreeMap<usize, BTreeMap<u32, Vec<f64>>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record.map_err(|e| ChannelError::Csv(format!("line {line}: {e}")))?;
        if record.len() != CSV_HEADER.len() {
            return Err(ChannelError::Csv(format!(
                "line {line}: expected {} fields, found {}",
                CSV_HEADER.len(),
                record.len()
            )));
        }
        let field = |col: usize| record.get(col).unwrap_or("").trim();
        let bad = |col: usize| {
            ChannelError::Csv(format!(
                "line {line}, column {}: cannot parse {:?}",
                CSV_HEADER[col],
                field(col)
            ))
        };
        let round: usize = field(0).parse().map_err(|_| bad(0))?;
        let anchor: u32 = field(1).parse().map_err(|_| bad(1))?;
        let index: usize = field(2).parse().map_err(|_| bad(2))?;
        let value: f64 = field(3).parse().map_err(|_| bad(3))?;
        if !value.is_finite() {
            return Err(bad(3));
        }
        let samples = rounds.entry(round).or_default().entry(anchor).or_default();
        if index != samples.len() {
            return Err(ChannelError::Csv(format!(
                "line {line}, column sample_index: expected {} for round {round} anchor {anchor}, found {index}",
                samples.len()
            )));
        }
        samples.push(value);
    }
    Ok(rounds
        .into_iter()
        .map(|(round, per_anchor)| RoundSamples { round, per_anchor })
        .collect())
}
