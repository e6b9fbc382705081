//! Scenario files.
//!
//! A scenario is a TOML document. It may name a preset with a top-level
//! `preset = "..."` key; its own tables are then merged over the preset's,
//! table by table, with arrays and scalars replaced wholesale.
//!
//! ```toml
//! preset = "baseline_circular"
//! name = "my-run"
//!
//! [topology]            # either `name = "env1"` or explicit edges
//! num_centers = 4
//! edges = [[1, 2], [2, 3], [3, 4]]
//!
//! [layout]
//! style = "circular"    # circular | linear | branched
//! spacing = 3
//!
//! [env]
//! episode_length = 1000
//! spawn_prob = 0.1
//! break_prob = 0.25
//! repair_time = "inf"   # positive integer or "inf"
//! two_agent_repair = true
//!
//! [agents]
//! policies = ["reciprocal", "reciprocal", "reciprocal", "selfish"]
//! assignment = "fixed"  # fixed | random
//! reciprocity_window = 200
//!
//! [run]
//! master_seed = 0
//! seeds = [0, 1, 2, 3, 4, 5, 6, 7]
//! episodes = 1          # per seed
//!
//! [sweep]               # optional grid, one list per parameter
//! repair_time = [10, 30, 100, 300, "inf"]
//!
//! [train]               # learner settings, see `TrainConfig`
//! total_steps = 500000
//!
//! [output]
//! logs = "first"        # all | first | none
//! norm = "frobenius"    # frobenius | spectral
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{EnvParams, EnvSpec, LayoutSpec, RepairTime};
use crate::layout::LayoutStyle;
use crate::learner::{AssignmentMode, TrainConfig};
use crate::metrics::MatrixNorm;
use crate::policies::DEFAULT_WINDOW;
use crate::topology::TopologySpec;

/// Parameters a sweep grid may vary.
pub const SWEEP_KEYS: [&str; 10] = [
    "repair_time",
    "spacing",
    "style",
    "topology",
    "spawn_prob",
    "break_prob",
    "episode_length",
    "two_agent_repair",
    "reciprocity_window",
    "assignment",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    ConfigParse(String),
    #[error("unknown preset `{0}`")]
    PresetUnknown(String),
    #[error("unknown sweep parameter `{0}` (sweepable: {keys})", keys = SWEEP_KEYS.join(", "))]
    UnknownParameter(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

const BASELINE_CIRCULAR: &str = r#"
name = "baseline_circular"
[topology]
name = "chain4"
[layout]
style = "circular"
[env]
repair_time = "inf"
[agents]
policies = ["reciprocal", "reciprocal", "reciprocal", "reciprocal"]
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
"#;

const SELFISH_SUBSTITUTION: &str = r#"
name = "selfish_substitution"
[topology]
name = "chain4"
[layout]
style = "circular"
[env]
repair_time = "inf"
[agents]
policies = ["reciprocal", "reciprocal", "reciprocal", "selfish"]
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
"#;

const REPAIR_TIME_SWEEP: &str = r#"
name = "repair_time_sweep"
[topology]
name = "chain4"
[layout]
style = "circular"
[agents]
policies = ["reciprocal", "reciprocal", "reciprocal", "reciprocal"]
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
[sweep]
repair_time = [10, 30, 100, 300, "inf"]
"#;

const LINEAR_DISTANCE_SWEEP: &str = r#"
name = "linear_distance_sweep"
[topology]
name = "chain4"
[layout]
style = "linear"
[env]
repair_time = "inf"
[agents]
policies = ["reciprocal", "reciprocal", "reciprocal", "reciprocal"]
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
episodes = 50
[output]
logs = "none"
[sweep]
spacing = [2, 3, 4, 5, 6, 7]
"#;

const BRANCHED: &str = r#"
[layout]
style = "branched"
spacing = 3
[env]
repair_time = "inf"
[agents]
policies = ["carer", "carer", "carer", "carer"]
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
"#;

const SPECIALIZATION: &str = r#"
name = "specialization"
[topology]
name = "chain4"
[layout]
style = "circular"
[agents]
policies = ["carer", "carer", "carer", "carer"]
assignment = "fixed"
[run]
seeds = [0, 1, 2, 3, 4, 5, 6, 7]
[train]
assignment = "fixed"
population_size = 4
total_steps = 2000000
"#;

const LEARNING_SMOKE: &str = r#"
name = "learning_smoke"
[topology]
name = "chain2"
[layout]
style = "linear"
spacing = 2
[agents]
policies = ["random", "random"]
[run]
seeds = [0, 1, 2, 3, 4]
episodes = 10
[train]
population_size = 2
total_steps = 500000
parallel_envs = 16
log_interval = 50000
"#;

/// Names of the built-in presets.
pub const PRESETS: [&str; 9] = [
    "baseline_circular",
    "selfish_substitution",
    "repair_time_sweep",
    "linear_distance_sweep",
    "env1",
    "env2",
    "env3",
    "specialization",
    "learning_smoke",
];

/// The TOML text of a preset.
pub fn preset_text(name: &str) -> Result<String, ConfigError> {
    let text = match name {
        "baseline_circular" => BASELINE_CIRCULAR.to_string(),
        "selfish_substitution" => SELFISH_SUBSTITUTION.to_string(),
        "repair_time_sweep" => REPAIR_TIME_SWEEP.to_string(),
        "linear_distance_sweep" => LINEAR_DISTANCE_SWEEP.to_string(),
        "env1" | "env2" | "env3" => format!("name = \"{name}\"\n[topology]\nname = \"{name}\"\n{BRANCHED}"),
        "specialization" => SPECIALIZATION.to_string(),
        "learning_smoke" => LEARNING_SMOKE.to_string(),
        other => return Err(ConfigError::PresetUnknown(other.to_string())),
    };
    Ok(text)
}

/// Built-in topologies: `chain<N>` for `N` in 1..=9 and the three
/// branch and merge graphs `env1`, `env2`, `env3`.
pub fn named_topology(name: &str) -> Option<TopologySpec> {
    let (n, edges): (usize, Vec<[usize; 2]>) = match name {
        "env1" => (4, vec![[1, 2], [1, 3], [3, 4]]),
        "env2" => (4, vec![[1, 2], [2, 3], [2, 4]]),
        "env3" => (4, vec![[1, 2], [1, 3], [2, 4], [3, 4]]),
        _ => {
            let n: usize = name.strip_prefix("chain")?.parse().ok()?;
            if !(1..=9).contains(&n) {
                return None;
            }
            (n, (1..n).map(|i| [i, i + 1]).collect())
        }
    };
    Some(TopologySpec { num_centers: n, edges })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_centers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<[usize; 2]>>,
}

impl TopologySection {
    pub fn resolve(&self) -> Result<TopologySpec, ConfigError> {
        match (&self.name, self.num_centers, &self.edges) {
            (Some(name), None, None) => named_topology(name).ok_or_else(|| ConfigError::BadValue {
                key: "topology.name".into(),
                value: name.clone(),
                reason: "expected chain1..chain9, env1, env2 or env3".into(),
            }),
            (None, Some(n), edges) => Ok(TopologySpec { num_centers: n, edges: edges.clone().unwrap_or_default() }),
            _ => Err(ConfigError::Invalid("[topology] needs either `name` or `num_centers` with `edges`".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentsSection {
    pub policies: Vec<String>,
    pub assignment: AssignmentMode,
    pub reciprocity_window: u32,
}

impl Default for AgentsSection {
    fn default() -> Self {
        AgentsSection { policies: Vec::new(), assignment: AssignmentMode::Fixed, reciprocity_window: DEFAULT_WINDOW }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub episodes: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { master_seed: 0, seeds: vec![0], episodes: 1 }
    }
}

/// Which episode logs to write.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogMode {
    All,
    /// The first episode of each seed.
    #[default]
    First,
    None,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub logs: LogMode,
    pub norm: MatrixNorm,
}

fn default_layout() -> LayoutSpec {
    LayoutSpec { style: LayoutStyle::Circular, spacing: 3 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub topology: TopologySection,
    #[serde(default = "default_layout")]
    pub layout: LayoutSpec,
    #[serde(default)]
    pub env: EnvParams,
    #[serde(default)]
    pub agents: AgentsSection,
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub sweep: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// Recursively merges `over` into `base`; tables merge, everything else is replaced.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl Scenario {
    /// Parses a scenario, resolving its preset.
    pub fn parse(text: &str) -> Result<Scenario, ConfigError> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::ConfigParse(e.to_string()))?;
        let mut table = match user.get("preset") {
            Some(toml::Value::String(p)) => {
                let base = preset_text(p)?;
                let mut t: toml::Table = base.parse().expect("presets parse");
                t.insert("preset".into(), toml::Value::String(p.clone()));
                t
            }
            Some(other) => return Err(ConfigError::ConfigParse(format!("preset must be a string, got {other}"))),
            None => toml::Table::new(),
        };
        // A topology is either named or explicit, so the user's table
        // replaces the preset's instead of merging into it.
        if let Some(t) = user.get("topology") {
            table.insert("topology".into(), t.clone());
        }
        merge(&mut table, user);
        let scn: Scenario = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::ConfigParse(e.to_string()))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn load(path: &Path) -> Result<Scenario, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let mut scn = Scenario::parse(&text)?;
        // A file that does not name itself is named after its stem, even
        // when it extends a preset.
        let named = text.parse::<toml::Table>().is_ok_and(|t| t.contains_key("name"));
        if !named {
            scn.name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(scn)
    }

    pub fn preset(name: &str) -> Result<Scenario, ConfigError> {
        Scenario::parse(&format!("preset = \"{name}\""))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let topo = self.topology.resolve()?;
        if self.run.seeds.is_empty() {
            return Err(ConfigError::Invalid("[run] seeds must not be empty".into()));
        }
        if self.run.episodes == 0 {
            return Err(ConfigError::Invalid("[run] episodes must be positive".into()));
        }
        if !self.agents.policies.is_empty() && self.agents.policies.len() != topo.num_centers {
            return Err(ConfigError::Invalid(format!(
                "{} policies for {} centers",
                self.agents.policies.len(),
                topo.num_centers
            )));
        }
        self.env.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for key in self.sweep.keys() {
            if !SWEEP_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownParameter(key.clone()));
            }
        }
        Ok(())
    }

    pub fn env_spec(&self) -> Result<EnvSpec, ConfigError> {
        Ok(EnvSpec { topology: self.topology.resolve()?, layout: self.layout, params: self.env.clone() })
    }

    /// Hex SHA-256 of the resolved scenario as JSON.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("scenario serializes")))
    }

    /// The resolved scenario as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Sets one sweepable parameter from its text form.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue { key: key.to_string(), value: value.to_string(), reason };
        match key {
            "repair_time" => self.env.repair_time = value.parse::<RepairTime>().map_err(bad)?,
            "spacing" => self.layout.spacing = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
            "style" => self.layout.style = value.parse().map_err(bad)?,
            "topology" => {
                named_topology(value).ok_or_else(|| bad("expected chain1..chain9, env1, env2 or env3".into()))?;
                self.topology = TopologySection { name: Some(value.to_string()), ..TopologySection::default() };
            }
            "spawn_prob" => self.env.spawn_prob = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "break_prob" => self.env.break_prob = value.parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            "episode_length" => {
                self.env.episode_length = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "two_agent_repair" => {
                self.env.two_agent_repair = value.parse().map_err(|e: std::str::ParseBoolError| bad(e.to_string()))?
            }
            "reciprocity_window" => {
                self.agents.reciprocity_window = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?
            }
            "assignment" => self.agents.assignment = value.parse().map_err(bad)?,
            other => return Err(ConfigError::UnknownParameter(other.to_string())),
        }
        Ok(())
    }
}

/// A parameter grid: parameters in declaration order, each with its values
/// in text form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Grid(pub Vec<(String, Vec<String>)>);

impl Grid {
    /// Reads the `[sweep]` table.
    pub fn from_scenario(scn: &Scenario) -> Grid {
        Grid(
            scn.sweep
                .iter()
                .map(|(k, vs)| (k.clone(), vs.iter().map(value_text).collect()))
                .collect(),
        )
    }

    /// Parses `key=v1,v2,...`.
    pub fn parse_arg(&mut self, arg: &str) -> Result<(), ConfigError> {
        let (key, values) = arg
            .split_once('=')
            .ok_or_else(|| ConfigError::ConfigParse(format!("grid argument `{arg}` is not key=v1,v2")))?;
        let key = key.trim();
        if !SWEEP_KEYS.contains(&key) {
            return Err(ConfigError::UnknownParameter(key.to_string()));
        }
        let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(ConfigError::BadValue { key: key.into(), value: String::new(), reason: "no values".into() });
        }
        self.0.retain(|(k, _)| k != key);
        self.0.push((key.to_string(), values));
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// All settings of the cross product, first parameter varying slowest.
    pub fn settings(&self) -> Vec<Vec<(String, String)>> {
        let mut out: Vec<Vec<(String, String)>> = vec![Vec::new()];
        for (k, vs) in &self.0 {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    vs.iter().map(move |v| {
                        let mut s = prefix.clone();
                        s.push((k.clone(), v.clone()));
                        s
                    })
                })
                .collect();
        }
        out
    }
}

fn value_text(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}
