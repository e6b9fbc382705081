//! Experiment runner: executes scenarios, sweeps, training and evaluation,
//! and writes artifact directories.
//!
//! An artifact directory holds:
//!
//! - `manifest.json`: tool version, scenario name and hash, master seed,
//!   seeds, settings and the list of files written;
//! - `scenario.toml`: the fully resolved scenario;
//! - `runs.csv`: one row per episode plus `mean` and `ci95` rows per setting;
//! - `care/<setting>.csv`: the mean breakage-normalized care matrix;
//! - `logs/<setting>/seed<k>_ep<e>.jsonl`: episode logs, as selected by `[output] logs`.
//!
//! Nothing time-dependent is written, so the same scenario and master seed
//! reproduce the directory byte for byte.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{run_episode_with_ids, Assignment, EngineError, World};
use crate::layout::TileMap;
use crate::learner::{
    sample_match, train, AssignmentMode, Checkpoint, LearnerError, Population, TrainingCurves,
};
use crate::log::{EpisodeLog, LogError, Replay};
use crate::metrics::{
    aggregate_with, average_metrics, write_care_csv, write_runs_csv, MetricsError, MetricsSummary, RowValues, RunRow,
    SocialMetrics,
};
use crate::policies::{make_policy, Policy, PolicyError};
use crate::rng;
use crate::scenario::{ConfigError, Grid, LogMode, Scenario};

/// Environment variable that overrides `[run] master_seed`.
pub const SEED_ENV: &str = "SUPPLY_SEED";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl RunnerError {
    /// Process exit code: 2 for configuration errors, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunnerError::Config(_) => 2,
            RunnerError::Learner(LearnerError::BadConfig(_) | LearnerError::ConfigMismatch) => 2,
            _ => 3,
        }
    }
}

/// Reads [`SEED_ENV`] if set.
pub fn seed_override() -> Result<Option<u64>, ConfigError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| ConfigError::BadValue {
            key: SEED_ENV.into(),
            value: v,
            reason: "expected an unsigned integer".into(),
        }),
        Err(_) => Ok(None),
    }
}

/// Loads a scenario file and applies [`SEED_ENV`].
pub fn load_scenario(path: &Path) -> Result<Scenario, ConfigError> {
    let mut scn = Scenario::load(path)?;
    if let Some(seed) = seed_override()? {
        scn.run.master_seed = seed;
    }
    Ok(scn)
}

/// Seed of episode `episode` of seed `seed` under `master`.
pub fn episode_seed(master: u64, seed: u64, episode: usize) -> u64 {
    rng::derive_seed(rng::derive_seed(master, seed), episode as u64)
}

/// Extra inputs for [`execute`].
#[derive(Default, Clone, Copy)]
pub struct ExecOptions<'a> {
    /// Where to write artifacts; nothing is written when `None`.
    pub out: Option<&'a Path>,
    /// Population for `learned:<k>` policies, or for sampling whole
    /// matches when the scenario lists no policies.
    pub population: Option<&'a Population>,
    /// Learned policies pick their most likely action instead of sampling.
    pub greedy: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub seed: u64,
    pub episode: usize,
    pub episode_seed: u64,
    pub metrics: SocialMetrics,
    pub log: Option<EpisodeLog>,
}

#[derive(Debug, Clone)]
pub struct SettingReport {
    pub label: String,
    pub scenario: Scenario,
    pub results: Vec<EpisodeResult>,
    /// `None` for a single episode.
    pub summary: Option<MetricsSummary>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub settings: Vec<SettingReport>,
    pub files: Vec<String>,
}

fn learned_index(name: &str) -> Option<usize> {
    name.strip_prefix("learned:").and_then(|k| k.parse::<usize>().ok())
}

/// The match for one episode: population ids per slot, slot-to-center map
/// and policies.
fn episode_match(
    scn: &Scenario,
    n: usize,
    seed: u64,
    opts: &ExecOptions,
) -> Result<(Option<Vec<usize>>, Assignment, Vec<Box<dyn Policy>>), RunnerError> {
    let mut rng = rng::episode_rng(rng::derive_seed(seed, 0x0A55_1647));
    if scn.agents.policies.is_empty() {
        let pop = opts
            .population
            .ok_or_else(|| ConfigError::Invalid("[agents] policies is empty and no population was given".into()))?;
        let m = sample_match(pop.size(), n, scn.agents.assignment, &mut rng);
        let policies = m.members.iter().map(|&i| Box::new(pop.policy(i, opts.greedy)) as Box<dyn Policy>).collect();
        return Ok((Some(m.agent_ids()), m.assignment, policies));
    }
    let assignment = match scn.agents.assignment {
        AssignmentMode::Fixed => Assignment::identity(n),
        AssignmentMode::Random => sample_match(n, n, AssignmentMode::Random, &mut rng).assignment,
    };
    let mut policies: Vec<Box<dyn Policy>> = Vec::with_capacity(n);
    for name in &scn.agents.policies {
        if let Some(k) = learned_index(name) {
            let pop = opts.population.ok_or_else(|| {
                ConfigError::Invalid(format!("policy `{name}` needs a checkpoint (use the eval command)"))
            })?;
            if k == 0 || k > pop.size() {
                return Err(ConfigError::Invalid(format!("`{name}`: population has {} members", pop.size())).into());
            }
            policies.push(Box::new(pop.policy(k - 1, opts.greedy)));
        } else {
            policies.push(make_policy(name, scn.agents.reciprocity_window)?);
        }
    }
    Ok((None, assignment, policies))
}

/// Runs every seed and episode of one scenario setting in parallel.
pub fn run_setting(scn: &Scenario, opts: &ExecOptions) -> Result<Vec<EpisodeResult>, RunnerError> {
    let world = World::build(scn.env_spec()?)?;
    let n = world.num_centers();
    for name in &scn.agents.policies {
        if learned_index(name).is_none() {
            make_policy(name, scn.agents.reciprocity_window)?;
        }
    }
    let jobs: Vec<(u64, usize)> =
        scn.run.seeds.iter().flat_map(|&s| (0..scn.run.episodes).map(move |e| (s, e))).collect();
    jobs.par_iter()
        .map(|&(seed, episode)| {
            let es = episode_seed(scn.run.master_seed, seed, episode);
            let (ids, assignment, mut policies) = episode_match(scn, n, es, opts)?;
            let log = run_episode_with_ids(&world, &assignment, ids, &mut policies, es)?;
            let metrics = aggregate_with(&log, scn.output.norm)?;
            let keep = match scn.output.logs {
                LogMode::All => true,
                LogMode::First => episode == 0,
                LogMode::None => false,
            };
            Ok(EpisodeResult { seed, episode, episode_seed: es, metrics, log: keep.then_some(log) })
        })
        .collect()
}

/// Turns a setting label into a file name component.
pub fn file_label(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

fn setting_label(scn: &Scenario, setting: &[(String, String)]) -> String {
    if setting.is_empty() {
        if scn.name.is_empty() {
            "default".to_string()
        } else {
            scn.name.clone()
        }
    } else {
        setting.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }
}

/// Runs every setting of `grid` (a single setting when the grid is empty)
/// and writes artifacts when `opts.out` is set.
pub fn execute(scn: &Scenario, grid: &Grid, opts: &ExecOptions) -> Result<Report, RunnerError> {
    let mut settings = Vec::new();
    for setting in grid.settings() {
        let mut s = scn.clone();
        for (k, v) in &setting {
            s.apply(k, v)?;
        }
        s.validate()?;
        let results = run_setting(&s, opts)?;
        let summary = if results.len() >= 2 {
            Some(average_metrics(&results.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())?)
        } else {
            None
        };
        settings.push(SettingReport { label: setting_label(scn, &setting), scenario: s, results, summary });
    }
    let mut report = Report { settings, files: Vec::new() };
    if let Some(out) = opts.out {
        report.files = write_artifacts(scn, &report, out, "run")?;
    }
    Ok(report)
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    scenario: &'a str,
    preset: Option<&'a str>,
    config_hash: String,
    master_seed: u64,
    seeds: &'a [u64],
    episodes: usize,
    settings: Vec<&'a str>,
    files: Vec<String>,
}

fn write_manifest(scn: &Scenario, command: &str, settings: Vec<&str>, files: &[String], out: &Path) -> Result<(), RunnerError> {
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        scenario: &scn.name,
        preset: scn.preset.as_deref(),
        config_hash: scn.hash(),
        master_seed: scn.run.master_seed,
        seeds: &scn.run.seeds,
        episodes: scn.run.episodes,
        settings,
        files: files.to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| RunnerError::Io(e.into()))?;
    text.push('\n');
    std::fs::write(out.join("manifest.json"), text)?;
    Ok(())
}

fn write_artifacts(scn: &Scenario, report: &Report, out: &Path, command: &str) -> Result<Vec<String>, RunnerError> {
    std::fs::create_dir_all(out)?;
    let mut files = Vec::new();
    std::fs::write(out.join("scenario.toml"), scn.to_toml())?;
    files.push("scenario.toml".to_string());

    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for s in &report.settings {
        let label = file_label(&s.label);
        for r in &s.results {
            rows.push(RunRow {
                label: s.label.clone(),
                run: format!("{}/{}", r.seed, r.episode),
                seed: r.episode_seed.to_string(),
                metrics: RowValues::from(&r.metrics),
            });
            if let Some(log) = &r.log {
                let rel = format!("logs/{label}/seed{}_ep{}.jsonl", r.seed, r.episode);
                std::fs::create_dir_all(out.join("logs").join(&label))?;
                log.save(&out.join(&rel))?;
                files.push(rel);
            }
        }
        let care = match &s.summary {
            Some(sum) => {
                summaries.push((s.label.clone(), sum.clone()));
                sum.care_norm_mean.clone()
            }
            None => s.results[0].metrics.care_norm.clone(),
        };
        std::fs::create_dir_all(out.join("care"))?;
        let rel = format!("care/{label}.csv");
        write_care_csv(std::fs::File::create(out.join(&rel))?, &care)?;
        files.push(rel);
    }
    write_runs_csv(std::fs::File::create(out.join("runs.csv"))?, &rows, &summaries)?;
    files.push("runs.csv".to_string());
    files.sort();
    write_manifest(scn, command, report.settings.iter().map(|s| s.label.as_str()).collect(), &files, out)?;
    Ok(files)
}

/// `run <config>`: the scenario's own `[sweep]` grid, if any.
pub fn run_scenario(path: &Path, out: &Path) -> Result<Report, RunnerError> {
    let scn = load_scenario(path)?;
    execute(&scn, &Grid::from_scenario(&scn), &ExecOptions { out: Some(out), ..ExecOptions::default() })
}

/// `sweep <config> --grid k=v1,v2`: the scenario's grid with command-line
/// parameters added or replaced. An empty grid is an error.
pub fn sweep(path: &Path, grid_args: &[String], out: &Path) -> Result<Report, RunnerError> {
    let scn = load_scenario(path)?;
    let mut grid = Grid::from_scenario(&scn);
    for arg in grid_args {
        grid.parse_arg(arg)?;
    }
    if grid.is_empty() {
        return Err(ConfigError::UnknownParameter("<empty grid>".into()).into());
    }
    execute(&scn, &grid, &ExecOptions { out: Some(out), ..ExecOptions::default() })
}

/// Output of [`train_scenario`].
pub struct TrainReport {
    pub population: Population,
    pub curves: TrainingCurves,
    pub checkpoint: PathBuf,
}

/// `train <config>`: trains a population, writing `checkpoint.bin`,
/// `curves.csv`, `scenario.toml` and `manifest.json`.
pub fn train_scenario(path: &Path, out: &Path) -> Result<TrainReport, RunnerError> {
    let scn = load_scenario(path)?;
    let world = World::build(scn.env_spec()?)?;
    let (population, curves) = train(&world, &scn.train, scn.run.master_seed)?;
    std::fs::create_dir_all(out)?;
    let checkpoint = out.join("checkpoint.bin");
    population.to_checkpoint(&scn.train).save(&checkpoint).map_err(LearnerError::from)?;
    curves.write_csv(std::fs::File::create(out.join("curves.csv"))?)?;
    std::fs::write(out.join("scenario.toml"), scn.to_toml())?;
    let files = vec!["checkpoint.bin".to_string(), "curves.csv".to_string(), "scenario.toml".to_string()];
    write_manifest(&scn, "train", vec![], &files, out)?;
    Ok(TrainReport { population, curves, checkpoint })
}

/// `eval <config> --checkpoint <path>`: frozen evaluation of a trained
/// population. With an empty `[agents] policies` list every episode draws a
/// match from the population; otherwise `learned:<k>` names pick members.
pub fn eval_scenario(path: &Path, checkpoint: &Path, out: &Path, greedy: bool) -> Result<Report, RunnerError> {
    let scn = load_scenario(path)?;
    let ck = Checkpoint::load(checkpoint).map_err(LearnerError::from)?;
    let pop = Population::from_checkpoint(&ck, Some(&scn.train))?;
    let report = execute(&scn, &Grid::default(), &ExecOptions { out: None, population: Some(&pop), greedy })?;
    let files = write_artifacts(&scn, &report, out, "eval")?;
    Ok(Report { files, ..report })
}

/// `replay <log>`: re-simulates a log and returns its ASCII frames. With
/// `map`, the log is checked against that ASCII map instead of the one
/// regenerated from the log's header.
pub fn replay(log_path: &Path, map: Option<&Path>) -> Result<Vec<String>, RunnerError> {
    let log = EpisodeLog::load(log_path)?;
    let replay = match map {
        None => Replay::new(log)?,
        Some(p) => {
            let ascii = std::fs::read_to_string(p)?;
            let tiles = TileMap::from_ascii(&ascii).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            let spec = log.header.env.clone();
            let topology = crate::topology::Topology::try_from(spec.topology.clone()).map_err(EngineError::from)?;
            let world = World { spec, topology: Arc::new(topology), map: Arc::new(tiles) };
            Replay::on_world(log, &world)?
        }
    };
    Ok(replay.frames()?)
}

/// `metrics <logdir>`: aggregates every `*.jsonl` log below `dir` and
/// writes a runs table (with `mean` and `ci95` rows when there are at least
/// two logs) to `w`.
pub fn metrics_dir<W: std::io::Write>(dir: &Path, w: W) -> Result<Vec<SocialMetrics>, RunnerError> {
    let mut paths = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::from)?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "jsonl") {
            paths.push(entry.into_path());
        }
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for p in &paths {
        let log = EpisodeLog::load(p)?;
        let m = crate::metrics::aggregate(&log)?;
        let rel = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().replace('\\', "/");
        rows.push(RunRow {
            label: "logs".into(),
            run: rel,
            seed: log.header.seed.to_string(),
            metrics: RowValues::from(&m),
        });
        all.push(m);
    }
    let summaries = if all.len() >= 2 { vec![("logs".to_string(), average_metrics(&all)?)] } else { Vec::new() };
    write_runs_csv(w, &rows, &summaries)?;
    Ok(all)
}
