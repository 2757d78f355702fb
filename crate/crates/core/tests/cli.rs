use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use bayesloc::cli::{cmd_oracle, cmd_replay, cmd_simulate, Overrides, EXIT_FAILURE, EXIT_OK};
use tempfile::TempDir;

/// Small but complete: two replicates, two rounds, short chains.
const QUICK: &str = "\
[estimator]
rounds = 2
samples_per_round = 60
min_batch = 60

[sampler]
warmup_draws = 150
sampling_draws = 150

[campaign]
replications = 2
base_seed = 11

[output]
kde_rounds = [1, 2]
kde_resolution = 40
measurements = true
";

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn quiet(out: &Path) -> Overrides {
    Overrides {
        output_dir: Some(out.to_path_buf()),
        quiet: true,
        ..Overrides::default()
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bayesloc"))
}

/// Relative paths of every file under `root`, sorted.
fn files(root: &Path) -> Vec<PathBuf> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn assert_same_csvs(a: &Path, b: &Path) {
    let fa: Vec<_> = files(a).into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    let fb: Vec<_> = files(b).into_iter().filter(|p| p.extension().is_some_and(|e| e == "csv")).collect();
    assert_eq!(fa, fb);
    assert!(!fa.is_empty());
    for f in &fa {
        assert!(fs::read(a.join(f)).unwrap() == fs::read(b.join(f)).unwrap(), "{} differs", f.display());
    }
}

#[test]
fn simulate_writes_the_run_layout() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", QUICK);
    let out = tmp.path().join("out");
    assert_eq!(cmd_simulate(&cfg, &quiet(&out)).unwrap(), EXIT_OK);
    for f in [
        "rmse.csv",
        "kde_round_001.csv",
        "kde_round_002.json",
        "failures.json",
        "manifest.json",
        "effective_config.toml",
        "replicates/rep_000/history.csv",
        "replicates/rep_001/history.json",
        "replicates/rep_001/measurements.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["replicate_seeds"], serde_json::json!([11, 12]));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    // nothing outside the output directory besides the config itself
    let mut top: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    top.sort();
    assert_eq!(top, ["out", "run.toml"]);
}

#[test]
fn single_round_single_replicate() {
    let tmp = TempDir::new().unwrap();
    let text = QUICK
        .replace("rounds = 2", "rounds = 1")
        .replace("replications = 2", "replications = 1");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let out = tmp.path().join("out");
    assert_eq!(cmd_simulate(&cfg, &quiet(&out)).unwrap(), EXIT_OK);
    let history = fs::read_to_string(out.join("replicates/rep_000/history.csv")).unwrap();
    let rounds: Vec<&str> = history.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    // one summary: x, y and three channel variables per anchor
    assert_eq!(rounds.len(), 14);
    assert!(rounds.iter().all(|r| *r == "1"));
    assert!(!out.join("replicates/rep_001").exists());
    let rmse = fs::read_to_string(out.join("rmse.csv")).unwrap();
    assert_eq!(rmse.lines().count(), 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", QUICK);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    cmd_simulate(&cfg, &quiet(&a)).unwrap();
    cmd_simulate(&cfg, &quiet(&b)).unwrap();
    assert_same_csvs(&a, &b);
    for f in ["replicates/rep_000/history.json", "kde_round_001.json", "failures.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    // rerunning from the dumped effective config reproduces the outputs
    let c = tmp.path().join("c");
    cmd_simulate(&a.join("effective_config.toml"), &quiet(&c)).unwrap();
    assert_same_csvs(&a, &c);
}

#[test]
fn replay_of_a_simulated_dump_reproduces_the_history() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", QUICK);
    let sim = tmp.path().join("sim");
    cmd_simulate(&cfg, &quiet(&sim)).unwrap();
    let rep = tmp.path().join("replay");
    let csv = sim.join("replicates/rep_000/measurements.csv");
    // replicate 0 of a campaign runs with the base seed
    assert_eq!(cmd_replay(&csv, &cfg, &quiet(&rep)).unwrap(), EXIT_OK);
    for f in ["history.csv", "history.json"] {
        let f = format!("replicates/rep_000/{f}");
        assert_eq!(fs::read(sim.join(&f)).unwrap(), fs::read(rep.join(&f)).unwrap());
    }
}

#[test]
fn replay_of_a_truncated_file_records_not_ready() {
    let tmp = TempDir::new().unwrap();
    let text = QUICK.replace("rounds = 2", "rounds = 1");
    let cfg = write_config(tmp.path(), "run.toml", &text);
    let sim = tmp.path().join("sim");
    cmd_simulate(&cfg, &quiet(&sim)).unwrap();
    let full = fs::read_to_string(sim.join("replicates/rep_000/measurements.csv")).unwrap();
    // drop the last sample of the last anchor
    let mut lines: Vec<&str> = full.lines().collect();
    lines.pop();
    let truncated = write_config(tmp.path(), "short.csv", &(lines.join("\n") + "\n"));
    let rep = tmp.path().join("replay");
    assert_eq!(cmd_replay(&truncated, &cfg, &quiet(&rep)).unwrap(), EXIT_FAILURE);
    let failures: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(failures[0]["round"], 1);
    assert!(failures[0]["error"].as_str().unwrap().contains("fewer than 60"));
}

#[test]
fn replay_rejects_an_unknown_column() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", QUICK);
    let csv = write_config(
        tmp.path(),
        "m.csv",
        "round,anchor_id,sample_index,rssi_dbm,channel\n1,0,0,-70.0,11\n",
    );
    let out = bin()
        .args(["--quiet", "--output-dir"])
        .arg(tmp.path().join("out"))
        .arg("replay")
        .args([&csv, &cfg])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("channel") && err.contains("header"), "{err}");
}

#[test]
fn replay_reports_the_bad_row() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", QUICK);
    let csv = write_config(
        tmp.path(),
        "m.csv",
        "round,anchor_id,sample_index,rssi_dbm\n1,0,0,-70.0\n1,0,1,loud\n",
    );
    let out = bin()
        .arg("--quiet")
        .arg("replay")
        .args([&csv, &cfg])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("rssi_dbm"), "{err}");
}

#[test]
fn invalid_config_exits_2_with_key_and_line() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "[sampler]\nchains = 4\ntarget_accept = 1.5\n");
    let out = bin().arg("simulate").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sampler.target_accept") && err.contains("run.toml:3"), "{err}");
}

#[test]
fn oracle_without_fixed_channel_exits_2() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "[oracle]\ntrials = 1\nmin_pass = 1\n");
    let out = bin()
        .arg("--output-dir")
        .arg(tmp.path().join("out"))
        .arg("oracle")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[oracle.fixed_channel]"));
}

#[test]
fn noiseless_oracle_peaks_at_the_truth() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        "[scenario]\ntarget = [31.3, 62.7]\n[scenario.channel]\nsigma_shadow = 0.0\n\
         [sampler]\nwarmup_draws = 200\nsampling_draws = 200\n\
         [oracle]\ntrials = 1\nmin_pass = 0\nresolution = 200\n\
         [oracle.fixed_channel]\nrho0 = -40.0\neta = -30.0\nsigma = 2.0\n",
    );
    let out = tmp.path().join("out");
    cmd_oracle(&cfg, &quiet(&out)).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("oracle_report.json")).unwrap()).unwrap();
    let err = report["trials"][0]["argmax_error_m"].as_f64().unwrap();
    // one cell of a 200 x 200 grid over 100 m is 0.5 m
    assert!(err <= 0.5, "argmax {} m from truth", err);
    let grid = fs::read_to_string(out.join("oracle_grid.csv")).unwrap();
    assert_eq!(grid.lines().next(), Some("x,y,density"));
    assert_eq!(grid.lines().count(), 200 * 200 + 1);
}
