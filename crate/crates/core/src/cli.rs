//! Command implementations behind the `bayesloc` binary.
//!
//! Each command returns an exit code: 0 on success, 1 when the run itself
//! failed (every replicate failed, oracle disagreement, unusable data), 2 for
//! configuration or input-schema problems.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{kde_2d, mcmc_vs_oracle, rmse_curve, GridSpec, OracleComparison};
use crate::channel::{read_csv, sample_batch, write_csv, MeasurementBatch, RngSeed};
use crate::config::{ConfigError, Format, LoadedConfig, RunConfig};
use crate::estimator::{
    history_to_json, run_rounds, simulated_round, write_history_csv, EstimatorError,
    EstimatorState, PosteriorSummary, RoundOutput, StepOutcome, MEASUREMENT_STREAM,
    SAMPLER_STREAM,
};
use crate::sampler::{SampleChain, SamplerConfig};
use crate::scenario::Scenario;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => EXIT_USAGE,
            CliError::Runtime(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

/// Command-line settings that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub replications: Option<usize>,
    pub dump_draws: bool,
    pub quiet: bool,
}

/// Reads a config file and applies `overrides`, re-validating the result.
pub fn load_config(path: &Path, overrides: &Overrides) -> Result<LoadedConfig, CliError> {
    let mut loaded = LoadedConfig::read(path)?;
    let c = &mut loaded.config;
    if let Some(dir) = &overrides.output_dir {
        c.output.directory = dir.clone();
    }
    if let Some(seed) = overrides.seed {
        c.campaign.base_seed = seed;
    }
    if let Some(r) = overrides.replications {
        c.campaign.replications = r;
    }
    c.output.dump_draws |= overrides.dump_draws;
    loaded.validate()?;
    Ok(loaded)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    fs::File::create(path).map(BufWriter::new).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    write_text(path, &text)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Pooled `(x, y)` draws keyed by round.
type PositionDraws = BTreeMap<usize, (Vec<f64>, Vec<f64>)>;

/// A replicate or round that did not complete.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub replicate: usize,
    pub seed: u64,
    pub round: Option<usize>,
    pub error: String,
}

fn failed_round(e: &EstimatorError) -> Option<usize> {
    match e {
        EstimatorError::Sampler { round, .. }
        | EstimatorError::Model { round, .. }
        | EstimatorError::DegeneratePosterior { round, .. }
        | EstimatorError::NotReady { round } => Some(*round),
        _ => None,
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    config_sha256: String,
    base_seed: u64,
    replicate_seeds: Vec<u64>,
    completed: usize,
    failed: usize,
    files: Vec<String>,
}

fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Output files common to `simulate` and `replay`.
struct RunOutputs<'a> {
    config: &'a RunConfig,
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> RunOutputs<'a> {
    fn new(config: &'a RunConfig) -> Result<Self, CliError> {
        let dir = config.output.directory.as_path();
        create_dir(dir)?;
        Ok(Self {
            config,
            dir,
            files: Vec::new(),
        })
    }

    fn path(&mut self, relative: String) -> PathBuf {
        let p = self.dir.join(&relative);
        self.files.push(relative);
        p
    }

    fn replicate_dir(&self, index: usize) -> String {
        format!("replicates/rep_{index:03}")
    }

    fn history(&mut self, index: usize, history: &[PosteriorSummary]) -> Result<(), CliError> {
        let rel = self.replicate_dir(index);
        create_dir(&self.dir.join(&rel))?;
        for format in self.config.output.formats.clone() {
            match format {
                Format::Csv => {
                    let p = self.path(format!("{rel}/history.csv"));
                    write_history_csv(create_file(&p)?, history).map_err(runtime)?;
                }
                Format::Json => {
                    let p = self.path(format!("{rel}/history.json"));
                    write_text(&p, &(history_to_json(history) + "\n"))?;
                }
            }
        }
        Ok(())
    }

    fn measurements(&mut self, index: usize, batches: &[MeasurementBatch]) -> Result<(), CliError> {
        let rel = self.replicate_dir(index);
        create_dir(&self.dir.join(&rel))?;
        let p = self.path(format!("{rel}/measurements.csv"));
        write_csv(create_file(&p)?, batches).map_err(runtime)
    }

    fn draws(&mut self, index: usize, out: &RoundOutput) -> Result<(), CliError> {
        let rel = self.replicate_dir(index);
        create_dir(&self.dir.join(&rel))?;
        let round = out.summary.round_index;
        let p = self.path(format!("{rel}/draws_round_{round:03}.csv"));
        write_draws(create_file(&p)?, &out.summary, &out.chains).map_err(io_err(&p))
    }

    /// RMSE over successful histories plus KDEs from `kde_source`.
    fn aggregate(
        &mut self,
        scenario: &Scenario,
        histories: &[Vec<PosteriorSummary>],
        kde_source: Option<&PositionDraws>,
    ) -> Result<(), CliError> {
        if !histories.is_empty() {
            let curve = rmse_curve(histories, scenario.target()).map_err(runtime)?;
            let p = self.path("rmse.csv".into());
            curve.write_csv(create_file(&p)?).map_err(runtime)?;
        }
        if let Some(draws) = kde_source {
            let grid = self.config.kde_grid();
            for (round, (xs, ys)) in draws {
                let kde = kde_2d(xs, ys, grid, None).map_err(runtime)?;
                let p = self.path(format!("kde_round_{round:03}.csv"));
                kde.density.write_csv(create_file(&p)?).map_err(runtime)?;
                let p = self.path(format!("kde_round_{round:03}.json"));
                write_text(&p, &(kde.to_json() + "\n"))?;
            }
        }
        Ok(())
    }

    fn finish(
        mut self,
        command: &str,
        seeds: Vec<u64>,
        failures: &[Failure],
        completed: usize,
    ) -> Result<(), CliError> {
        let p = self.path("failures.json".into());
        write_json(&p, &failures)?;
        let effective = self.config.to_toml();
        let p = self.path("effective_config.toml".into());
        write_text(&p, &effective)?;
        let mut files = std::mem::take(&mut self.files);
        files.push("manifest.json".into());
        files.sort();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config_sha256: sha256_hex(&effective),
            base_seed: self.config.campaign.base_seed,
            replicate_seeds: seeds,
            completed,
            failed: failures.len(),
            files,
        };
        write_json(&self.dir.join("manifest.json"), &manifest)
    }
}

fn write_draws<W: Write>(
    out: W,
    summary: &PosteriorSummary,
    chains: &[SampleChain],
) -> std::io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "chain,draw,variable,value")?;
    for (c, chain) in chains.iter().enumerate() {
        for (i, draw) in chain.draws().enumerate() {
            for (var, v) in summary.variables.iter().zip(draw) {
                writeln!(w, "{c},{i},{},{v}", var.name)?;
            }
        }
    }
    w.flush()
}

/// Pooled `(x, y)` draws of one round.
fn position_draws(chains: &[SampleChain]) -> (Vec<f64>, Vec<f64>) {
    let xs = chains.iter().flat_map(|c| c.column(0)).collect();
    let ys = chains.iter().flat_map(|c| c.column(1)).collect();
    (xs, ys)
}

struct Replicate {
    index: usize,
    seed: u64,
    history: Vec<PosteriorSummary>,
    kde_draws: PositionDraws,
    rounds: Vec<RoundOutput>,
    batches: Vec<MeasurementBatch>,
    error: Option<EstimatorError>,
}

fn run_replicate(config: &RunConfig, scenario: &Scenario, index: usize) -> Replicate {
    let seed = config.campaign.base_seed.wrapping_add(index as u64);
    let spec = config.campaign_spec(scenario);
    let keep_batches = config.output.measurements;
    let keep_rounds = config.output.dump_draws;
    let mut batches = Vec::new();
    let mut rounds = Vec::new();
    let mut kde_draws = BTreeMap::new();
    let result = run_rounds(
        scenario,
        &spec,
        &config.sampler,
        RngSeed(seed),
        |round| {
            let batch = simulated_round(scenario, spec.samples_per_round, RngSeed(seed), round)?;
            if keep_batches {
                batches.push(batch.clone());
            }
            Ok(batch.into_per_anchor())
        },
        |out| {
            let round = out.summary.round_index;
            if config.output.kde_rounds.contains(&round) {
                kde_draws.insert(round, position_draws(&out.chains));
            }
            if keep_rounds {
                rounds.push(out.clone());
            }
        },
    );
    let mut rep = Replicate {
        index,
        seed,
        history: Vec::new(),
        kde_draws,
        rounds,
        batches,
        error: None,
    };
    match result {
        Ok(history) => rep.history = history,
        Err(e) => rep.error = Some(e),
    }
    rep
}

fn progress(quiet: bool, message: impl FnOnce() -> String) {
    if !quiet {
        eprintln!("{}", message());
    }
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(runtime)
}

/// Closed-loop campaigns over `campaign.replications` seeds.
pub fn cmd_simulate(config_path: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    let scenario = config
        .scenario()
        .map_err(|e| CliError::Input(format!("scenario: {e}")))?;
    let n = config.campaign.replications;
    let pool = worker_pool(config.campaign.workers)?;
    let replicates: Vec<Replicate> = pool.install(|| {
        use rayon::prelude::*;
        (0..n)
            .into_par_iter()
            .map(|i| {
                let rep = run_replicate(config, &scenario, i);
                progress(overrides.quiet, || match &rep.error {
                    None => format!("replicate {i}: {} rounds", rep.history.len()),
                    Some(e) => format!("replicate {i}: failed: {e}"),
                });
                rep
            })
            .collect()
    });

    let mut outputs = RunOutputs::new(config)?;
    let mut failures = Vec::new();
    let mut histories = Vec::new();
    let mut kde_source = None;
    for rep in &replicates {
        if !rep.batches.is_empty() {
            outputs.measurements(rep.index, &rep.batches)?;
        }
        for round in &rep.rounds {
            outputs.draws(rep.index, round)?;
        }
        match &rep.error {
            None => {
                outputs.history(rep.index, &rep.history)?;
                histories.push(rep.history.clone());
                kde_source.get_or_insert(&rep.kde_draws);
            }
            Some(e) => failures.push(Failure {
                replicate: rep.index,
                seed: rep.seed,
                round: failed_round(e),
                error: e.to_string(),
            }),
        }
    }
    outputs.aggregate(&scenario, &histories, kde_source)?;
    let seeds = replicates.iter().map(|r| r.seed).collect();
    let completed = histories.len();
    outputs.finish("simulate", seeds, &failures, completed)?;
    progress(overrides.quiet, || {
        format!("{completed} of {n} replicates completed")
    });
    Ok(if completed == 0 { EXIT_FAILURE } else { EXIT_OK })
}

#[derive(Debug, Serialize)]
struct OracleTrial {
    seed: u64,
    comparison: OracleComparison,
    oracle_argmax: [f64; 2],
    argmax_error_m: f64,
}

#[derive(Debug, Serialize)]
struct OracleReport {
    truth: [f64; 2],
    resolution: usize,
    samples_per_anchor: usize,
    trials: Vec<OracleTrial>,
    passed: usize,
    required: usize,
    pass: bool,
}

/// MCMC on the clamped-channel model against the exact grid posterior.
pub fn cmd_oracle(config_path: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    let scenario = config
        .scenario()
        .map_err(|e| CliError::Input(format!("scenario: {e}")))?;
    let oracle_cfg = config
        .oracle
        .clone()
        .ok_or_else(|| ConfigError::MissingSection("oracle.fixed_channel".into()))?;
    let fixed = config.fixed_channels(&scenario)?;
    let grid = GridSpec::floor_plan(scenario.length(), scenario.width(), oracle_cfg.resolution);
    let truth = scenario.target();
    let mut trials = Vec::new();
    let mut first_grid = None;
    for t in 0..oracle_cfg.trials {
        let seed = config.campaign.base_seed.wrapping_add(t as u64);
        let batch = sample_batch(
            &scenario,
            oracle_cfg.samples_per_anchor,
            RngSeed(seed).derive(MEASUREMENT_STREAM),
        )
        .map_err(runtime)?;
        let sampler = SamplerConfig {
            seed: RngSeed(seed).derive(SAMPLER_STREAM).0,
            ..config.sampler.clone()
        };
        let (comparison, oracle, _) =
            mcmc_vs_oracle(&batch, scenario.anchors(), &fixed, grid, &sampler).map_err(runtime)?;
        progress(overrides.quiet, || {
            format!(
                "trial {t}: z = ({:.2}, {:.2}) {}",
                comparison.z[0],
                comparison.z[1],
                if comparison.pass { "pass" } else { "FAIL" }
            )
        });
        trials.push(OracleTrial {
            seed,
            oracle_argmax: [oracle.argmax.x, oracle.argmax.y],
            argmax_error_m: oracle.argmax.distance_to(&truth),
            comparison,
        });
        first_grid.get_or_insert(oracle.density);
    }
    let passed = trials.iter().filter(|t| t.comparison.pass).count();
    let report = OracleReport {
        truth: [truth.x, truth.y],
        resolution: oracle_cfg.resolution,
        samples_per_anchor: oracle_cfg.samples_per_anchor,
        passed,
        required: oracle_cfg.min_pass,
        pass: passed >= oracle_cfg.min_pass,
        trials,
    };
    let dir = config.output.directory.as_path();
    create_dir(dir)?;
    if let Some(density) = first_grid {
        let p = dir.join("oracle_grid.csv");
        density.write_csv(create_file(&p)?).map_err(runtime)?;
    }
    write_json(&dir.join("oracle_report.json"), &report)?;
    progress(overrides.quiet, || {
        format!("{passed} of {} trials agree", report.trials.len())
    });
    Ok(if report.pass { EXIT_OK } else { EXIT_FAILURE })
}

/// Runs the estimator on recorded measurements, one push per file round.
pub fn cmd_replay(csv_path: &Path, config_path: &Path, overrides: &Overrides) -> Result<i32, CliError> {
    let loaded = load_config(config_path, overrides)?;
    let config = &loaded.config;
    let scenario = config
        .scenario()
        .map_err(|e| CliError::Input(format!("scenario: {e}")))?;
    let file = fs::File::open(csv_path).map_err(|e| {
        CliError::Input(format!("cannot read {}: {e}", csv_path.display()))
    })?;
    let rounds = read_csv(file)
        .map_err(|e| CliError::Input(format!("{}: {e}", csv_path.display())))?;

    let mut state = EstimatorState::new(&scenario, config.estimator_config(&scenario))
        .map_err(|e| CliError::Input(e.to_string()))?;
    let base_seed = config.campaign.base_seed;
    let sampler = SamplerConfig {
        seed: RngSeed(base_seed).derive(SAMPLER_STREAM).0,
        ..config.sampler.clone()
    };
    let mut outputs = RunOutputs::new(config)?;
    let mut failures = Vec::new();
    let mut kde_draws = BTreeMap::new();
    for samples in &rounds {
        state.push_measurements(&samples.per_anchor).map_err(|e| {
            CliError::Input(format!("{} round {}: {e}", csv_path.display(), samples.round))
        })?;
        let round = state.round();
        match state.step(&sampler) {
            Ok(StepOutcome::Estimated(out)) => {
                if config.output.kde_rounds.contains(&round) {
                    kde_draws.insert(round, position_draws(&out.chains));
                }
                if config.output.dump_draws {
                    outputs.draws(0, &out)?;
                }
                progress(overrides.quiet, || format!("round {round} estimated"));
            }
            Ok(StepOutcome::NotReady) => failures.push(Failure {
                replicate: 0,
                seed: base_seed,
                round: Some(round),
                error: format!(
                    "file round {}: fewer than {} samples for some anchor; buffered for the next round",
                    samples.round, config.estimator.min_batch
                ),
            }),
            Ok(StepOutcome::Complete) => {
                progress(overrides.quiet, || {
                    format!("file round {} ignored: all rounds done", samples.round)
                });
            }
            Err(e) => failures.push(Failure {
                replicate: 0,
                seed: base_seed,
                round: failed_round(&e).or(Some(round)),
                error: e.to_string(),
            }),
        }
    }
    let history = state.history().to_vec();
    outputs.history(0, &history)?;
    let histories: Vec<Vec<PosteriorSummary>> = if history.is_empty() {
        Vec::new()
    } else {
        vec![history]
    };
    outputs.aggregate(&scenario, &histories, Some(&kde_draws))?;
    let completed = histories.len();
    outputs.finish("replay", vec![base_seed], &failures, completed)?;
    Ok(if failures.is_empty() && completed > 0 {
        EXIT_OK
    } else {
        EXIT_FAILURE
    })
}
