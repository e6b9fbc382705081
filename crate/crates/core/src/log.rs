//! Episode logs: one JSON object per line.
//!
//! A file holds a header line, one line per step and a footer line. Each
//! line is an externally tagged record, for example
//! `{"step":{"t":0,"actions":[4,4],"rewards":[0,0],"events":{...}}}`.
//! Logs carry enough to recompute every metric and to re-simulate the
//! episode from its seed and recorded actions.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Action, Assignment, EngineError, EnvSpec, StepEvents, World, WorldState};

pub const LOG_FORMAT: &str = "supplychain-episode";
pub const LOG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported log format `{format}` version {version}")]
    Format { format: String, version: u32 },
    #[error("truncated log: {0}")]
    TruncatedLog(String),
    #[error("log was recorded on a different map (expected {expected}, got {got})")]
    LogMapMismatch { expected: String, got: String },
    #[error("replay diverged at step {t}: {detail}")]
    ReplayDiverged { t: u32, detail: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub map_hash: String,
    pub seed: u64,
    pub assignment: Assignment,
    pub agent_ids: Vec<usize>,
    pub policies: Vec<String>,
    pub env: EnvSpec,
}

impl LogHeader {
    pub fn new(world: &World, state: &WorldState, policies: Vec<String>) -> Self {
        LogHeader {
            format: LOG_FORMAT.to_string(),
            version: LOG_VERSION,
            config_hash: world.spec.hash(),
            map_hash: world.map.content_hash(),
            seed: state.seed(),
            assignment: state.assignment().clone(),
            agent_ids: state.agent_ids().to_vec(),
            policies,
            env: world.spec.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: u32,
    pub actions: Vec<Action>,
    pub rewards: Vec<i32>,
    pub events: StepEvents,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogFooter {
    pub steps: u32,
    pub spawned: u64,
    pub sank: u64,
    pub discarded: u64,
    pub in_flight: u64,
}

impl LogFooter {
    pub fn from_state(state: &WorldState) -> Self {
        let c = state.counters();
        LogFooter {
            steps: state.step_count(),
            spawned: c.spawned,
            sank: c.sank,
            discarded: c.discarded,
            in_flight: state.units_in_flight(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Record {
    Header(LogHeader),
    Step(StepRecord),
    Footer(LogFooter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
    /// `None` when the episode was cut short.
    pub footer: Option<LogFooter>,
}

impl EpisodeLog {
    /// Errors with [`LogError::TruncatedLog`] unless the log covers a whole
    /// episode with consecutive step records.
    pub fn check_complete(&self) -> Result<&LogFooter, LogError> {
        let footer = self.footer.as_ref().ok_or_else(|| LogError::TruncatedLog("missing footer".into()))?;
        let expected = self.header.env.params.episode_length;
        if footer.steps != expected || self.steps.len() != expected as usize {
            return Err(LogError::TruncatedLog(format!(
                "{} step records, footer says {}, episode length {}",
                self.steps.len(),
                footer.steps,
                expected
            )));
        }
        if let Some((i, rec)) = self.steps.iter().enumerate().find(|(i, r)| r.t as usize != *i) {
            return Err(LogError::TruncatedLog(format!("record {i} has t = {}", rec.t)));
        }
        Ok(footer)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        let mut line = |rec: &Record| -> Result<(), LogError> {
            serde_json::to_writer(&mut w, rec).map_err(|e| LogError::Io(e.into()))?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&Record::Header(self.header.clone()))?;
        for s in &self.steps {
            line(&Record::Step(s.clone()))?;
        }
        if let Some(f) = &self.footer {
            line(&Record::Footer(f.clone()))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses a log. A missing footer is not an error here; see
    /// [`EpisodeLog::check_complete`].
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<EpisodeLog, LogError> {
        let mut header = None;
        let mut steps = Vec::new();
        let mut footer = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| LogError::Parse { line: i + 1, message: e.to_string() })?;
            match rec {
                Record::Header(h) if header.is_none() && i == 0 => {
                    if h.format != LOG_FORMAT || h.version != LOG_VERSION {
                        return Err(LogError::Format { format: h.format, version: h.version });
                    }
                    header = Some(h);
                }
                Record::Header(_) => {
                    return Err(LogError::Parse { line: i + 1, message: "unexpected header".into() });
                }
                Record::Step(_) | Record::Footer(_) if header.is_none() => {
                    return Err(LogError::TruncatedLog("missing header".into()));
                }
                Record::Step(_) if footer.is_some() => {
                    return Err(LogError::Parse { line: i + 1, message: "step after footer".into() });
                }
                Record::Step(s) => steps.push(s),
                Record::Footer(f) => footer = Some(f),
            }
        }
        let header = header.ok_or_else(|| LogError::TruncatedLog("empty log".into()))?;
        Ok(EpisodeLog { header, steps, footer })
    }

    pub fn save(&self, path: &Path) -> Result<(), LogError> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<EpisodeLog, LogError> {
        let file = std::fs::File::open(path)?;
        EpisodeLog::read_jsonl(std::io::BufReader::new(file))
    }
}

/// Re-simulates a log step by step and checks every recorded event.
pub struct Replay {
    state: WorldState,
    log: EpisodeLog,
    next: usize,
}

impl Replay {
    /// Rebuilds the environment from the header.
    pub fn new(log: EpisodeLog) -> Result<Replay, LogError> {
        let world = World::build(log.header.env.clone())?;
        Replay::on_world(log, &world)
    }

    /// Replays on a caller-supplied world, which must carry the recorded map.
    pub fn on_world(log: EpisodeLog, world: &World) -> Result<Replay, LogError> {
        log.check_complete()?;
        let got = world.map.content_hash();
        if got != log.header.map_hash {
            return Err(LogError::LogMapMismatch { expected: log.header.map_hash.clone(), got });
        }
        let mut state = world.init(&log.header.assignment, log.header.seed)?;
        state.set_agent_ids(log.header.agent_ids.clone());
        Ok(Replay { state, log, next: 0 })
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Applies the next recorded step. Returns `Ok(false)` at the end.
    pub fn advance(&mut self) -> Result<bool, LogError> {
        let Some(rec) = self.log.steps.get(self.next) else {
            return Ok(false);
        };
        let out = self.state.step(&rec.actions)?;
        if out.events != rec.events {
            return Err(LogError::ReplayDiverged {
                t: rec.t,
                detail: format!("recorded {:?}, simulated {:?}", rec.events, out.events),
            });
        }
        if out.rewards != rec.rewards {
            return Err(LogError::ReplayDiverged { t: rec.t, detail: "rewards differ".into() });
        }
        self.next += 1;
        Ok(true)
    }

    /// Runs to the end, returning the initial frame followed by one frame per step.
    pub fn frames(mut self) -> Result<Vec<String>, LogError> {
        let mut frames = vec![self.state.render()];
        while self.advance()? {
            frames.push(self.state.render());
        }
        let footer = LogFooter::from_state(&self.state);
        if Some(&footer) != self.log.footer.as_ref() {
            return Err(LogError::ReplayDiverged { t: footer.steps, detail: "footer totals differ".into() });
        }
        Ok(frames)
    }
}
