//! The simulation core.
//!
//! One call to [`WorldState::step`] applies, in this order:
//!
//! 1. agent movement (contested cells go to a uniformly drawn winner);
//! 2. two-agent repairs of broken centers;
//! 3. self-repair, each broken center independently with `1 / repair_time`;
//! 4. processing by owners standing on their center tile, followed by the
//!    breakage roll;
//! 5. unit flow, downstream cells first, discarding units whose next cell
//!    is occupied;
//! 6. spawning at empty source cells;
//! 7. the step counter increment.
//!
//! All randomness comes from one [`EpisodeRng`] stream following the draw
//! protocol in [`crate::rng`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layout::{generate_layout, validate_tilemap, Diagnostic, LayoutError, LayoutStyle, Tile, TileMap};
use crate::log::{EpisodeLog, LogFooter, LogHeader, StepRecord};
use crate::policies::{Policy, PolicyContext, PolicyError};
use crate::rng::{self, EpisodeRng};
use crate::topology::{Topology, TopologyError, TopologySpec};

/// Side length of the square observation window.
pub const OBS_SIZE: usize = 13;
/// Bytes in one observation (`13 x 13 x 3`, channel last).
pub const OBS_LEN: usize = OBS_SIZE * OBS_SIZE * 3;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("assignment must map every slot to a distinct center in 1..={0}")]
    BadAssignment(usize),
    #[error("map does not realize the topology: {0}")]
    MapTopologyMismatch(String),
    #[error("invalid map: {0:?}")]
    InvalidMap(Vec<Diagnostic>),
    #[error("episode is over")]
    EpisodeOver,
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("invalid parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Self-repair period. `Infinite` disables self-repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RepairTime {
    Finite(u32),
    Infinite,
}

impl RepairTime {
    /// Per-step self-repair probability.
    pub fn probability(self) -> Option<f64> {
        match self {
            RepairTime::Finite(t) => Some(1.0 / t as f64),
            RepairTime::Infinite => None,
        }
    }
}

impl fmt::Display for RepairTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RepairTime::Finite(t) => write!(f, "{t}"),
            RepairTime::Infinite => write!(f, "inf"),
        }
    }
}

impl std::str::FromStr for RepairTime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "infinity" | "∞" => Ok(RepairTime::Infinite),
            other => other
                .parse::<u32>()
                .map(RepairTime::Finite)
                .map_err(|_| format!("repair time must be a positive integer or \"inf\", got `{other}`")),
        }
    }
}

impl Serialize for RepairTime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            RepairTime::Finite(t) => s.serialize_u32(*t),
            RepairTime::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for RepairTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(t) if t >= 1 && t <= u32::MAX as i64 => Ok(RepairTime::Finite(t as u32)),
            Raw::Int(t) => Err(serde::de::Error::custom(format!("repair time must be >= 1, got {t}"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvParams {
    pub episode_length: u32,
    pub spawn_prob: f64,
    pub break_prob: f64,
    pub repair_time: RepairTime,
    pub two_agent_repair: bool,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            episode_length: 1000,
            spawn_prob: 0.10,
            break_prob: 0.25,
            repair_time: RepairTime::Infinite,
            two_agent_repair: true,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if !(0.0..=1.0).contains(&self.spawn_prob) {
            return Err(EngineError::BadParams(format!("spawn_prob {} not in [0, 1]", self.spawn_prob)));
        }
        if !(0.0..=1.0).contains(&self.break_prob) {
            return Err(EngineError::BadParams(format!("break_prob {} not in [0, 1]", self.break_prob)));
        }
        if self.repair_time == RepairTime::Finite(0) {
            return Err(EngineError::BadParams("repair_time must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
    Wait,
}

impl Action {
    pub const ALL: [Action; 5] = [Action::Up, Action::Down, Action::Left, Action::Right, Action::Wait];

    /// Integer code: 0 up, 1 down, 2 left, 3 right, 4 wait.
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Action> {
        Action::ALL.get(code as usize).copied()
    }

    pub fn delta(self) -> (isize, isize) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
            Action::Wait => (0, 0),
        }
    }
}

impl From<Action> for u8 {
    fn from(a: Action) -> u8 {
        a.code()
    }
}

impl TryFrom<u8> for Action {
    type Error = String;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        Action::from_code(code).ok_or_else(|| format!("action code {code} out of range 0..5"))
    }
}

/// Slot-to-center map; `centers()[slot]` is the center the slot's agent owns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment(Vec<usize>);

impl Assignment {
    pub fn new(centers: Vec<usize>) -> Self {
        Assignment(centers)
    }

    pub fn identity(n: usize) -> Self {
        Assignment((1..=n).collect())
    }

    pub fn centers(&self) -> &[usize] {
        &self.0
    }

    pub fn center_of(&self, slot: usize) -> usize {
        self.0[slot]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Checks that this is a bijection onto `1..=n`.
    pub fn check(&self, n: usize) -> Result<(), EngineError> {
        let mut seen = vec![false; n + 1];
        if self.0.len() != n {
            return Err(EngineError::BadAssignment(n));
        }
        for &c in &self.0 {
            if c == 0 || c > n || seen[c] {
                return Err(EngineError::BadAssignment(n));
            }
            seen[c] = true;
        }
        Ok(())
    }
}

/// Everything that happened in one step. Agents are identified by the
/// center they own, so `processed = [2]` means the owner of center 2
/// processed a unit.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvents {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub processed: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub broke: Vec<usize>,
    /// Care events `(carer, receiver)`; the owner helping itself is not care.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub repaired: Vec<(usize, usize)>,
    /// Centers fixed by two agents this step.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub manual_repairs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub self_repaired: Vec<usize>,
    /// One entry per source cell, in cell order.
    pub spawned: Vec<u32>,
    pub discarded: u32,
    pub sank: u32,
}

impl StepEvents {
    pub fn spawned_total(&self) -> u32 {
        self.spawned.iter().sum()
    }
}

/// Layout choice stored alongside the topology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSpec {
    pub style: LayoutStyle,
    #[serde(default = "default_spacing")]
    pub spacing: usize,
}

fn default_spacing() -> usize {
    3
}

/// Everything needed to rebuild an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub topology: TopologySpec,
    pub layout: LayoutSpec,
    pub params: EnvParams,
}

impl EnvSpec {
    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("env spec serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// A built environment: topology, generated map and parameters. Shared
/// read-only between episodes.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: EnvSpec,
    pub topology: Arc<Topology>,
    pub map: Arc<TileMap>,
}

impl World {
    pub fn build(spec: EnvSpec) -> Result<World, EngineError> {
        spec.params.validate()?;
        let topology = Topology::try_from(spec.topology.clone())?;
        let map = generate_layout(&topology, spec.layout.style, spec.layout.spacing)?;
        Ok(World { spec, topology: Arc::new(topology), map: Arc::new(map) })
    }

    pub fn num_centers(&self) -> usize {
        self.topology.num_centers()
    }

    pub fn init(&self, assignment: &Assignment, seed: u64) -> Result<WorldState, EngineError> {
        init_episode(self.map.clone(), self.topology.clone(), assignment, self.spec.params.clone(), seed)
    }
}

/// Which part of the map an agent sees.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationMode {
    /// Window centred on the observing agent.
    #[default]
    Egocentric,
    /// Window anchored at the map's top-left corner.
    FullMap,
}

/// Fixed RGB colours of the observation.
pub mod colors {
    pub const WALL: [u8; 3] = [128, 128, 128];
    pub const FLOOR: [u8; 3] = [0, 0, 0];
    pub const PATH: [u8; 3] = [60, 40, 20];
    pub const SOURCE: [u8; 3] = [0, 0, 160];
    pub const SINK: [u8; 3] = [160, 0, 160];
    pub const PROCESSING: [u8; 3] = [100, 100, 0];
    pub const UNIT: [u8; 3] = [255, 200, 0];
    pub const CENTER_TILE: [u8; 3] = [0, 120, 120];
    pub const CENTER_TILE_BROKEN: [u8; 3] = [200, 60, 0];
    pub const OWN_CENTER_TILE: [u8; 3] = [0, 255, 255];
    pub const OWN_CENTER_TILE_BROKEN: [u8; 3] = [255, 100, 0];
    pub const REPAIR_TILE: [u8; 3] = [0, 80, 200];
    pub const OWN_REPAIR_TILE: [u8; 3] = [80, 160, 255];
    pub const SELF: [u8; 3] = [0, 255, 0];
    pub const OTHER_AGENT: [u8; 3] = [255, 0, 0];
}

/// One `13 x 13 x 3` observation, row-major with channels last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observation(pub Vec<u8>);

impl Observation {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * OBS_SIZE + x) * 3;
        [self.0[i], self.0[i + 1], self.0[i + 2]]
    }

    /// Values scaled to `[0, 1]`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64 / 255.0).collect()
    }
}

/// Running totals kept by the engine, for cross-checking log aggregation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Counters {
    pub spawned: u64,
    pub sank: u64,
    pub discarded: u64,
    pub processed: Vec<u64>,
    pub breakages: Vec<u64>,
    /// `care[carer - 1][receiver - 1]`.
    pub care: Vec<Vec<u64>>,
}

/// Result of one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub events: StepEvents,
    /// Per-slot reward.
    pub rewards: Vec<i32>,
}

/// Full mutable episode state.
#[derive(Debug, Clone)]
pub struct WorldState {
    map: Arc<TileMap>,
    topology: Arc<Topology>,
    params: EnvParams,
    step: u32,
    unit_at: Vec<bool>,
    broken: Vec<bool>,
    assignment: Assignment,
    owner_slot: Vec<usize>,
    agent_pos: Vec<usize>,
    agent_at: Vec<Option<usize>>,
    agent_ids: Vec<usize>,
    rng: EpisodeRng,
    counters: Counters,
    seed: u64,
}

/// Builds the initial state: no units, nothing broken, every agent on the
/// spawn cell of its center.
pub fn init_episode(
    map: Arc<TileMap>,
    topology: Arc<Topology>,
    assignment: &Assignment,
    params: EnvParams,
    seed: u64,
) -> Result<WorldState, EngineError> {
    params.validate()?;
    let diags = validate_tilemap(&map);
    if !diags.is_empty() {
        return Err(EngineError::InvalidMap(diags));
    }
    let n = topology.num_centers();
    if map.num_centers() != n {
        return Err(EngineError::MapTopologyMismatch(format!(
            "map has {} centers, topology {}",
            map.num_centers(),
            n
        )));
    }
    if map.derived_edges() != topology.edges() {
        return Err(EngineError::MapTopologyMismatch(format!(
            "map edges {:?} vs topology edges {:?}",
            map.derived_edges(),
            topology.edges()
        )));
    }
    if map.derived_source_centers() != topology.source_centers() {
        return Err(EngineError::MapTopologyMismatch("source centers differ".into()));
    }
    assignment.check(n)?;

    let mut owner_slot = vec![0; n];
    let mut agent_pos = Vec::with_capacity(n);
    let mut agent_at = vec![None; map.num_cells()];
    for (slot, &center) in assignment.centers().iter().enumerate() {
        owner_slot[center - 1] = slot;
        let spawn = map.spawn_cell(center);
        agent_pos.push(spawn);
        agent_at[spawn] = Some(slot);
    }
    let counters = Counters {
        processed: vec![0; n],
        breakages: vec![0; n],
        care: vec![vec![0; n]; n],
        ..Counters::default()
    };
    Ok(WorldState {
        unit_at: vec![false; map.num_cells()],
        broken: vec![false; n],
        assignment: assignment.clone(),
        owner_slot,
        agent_pos,
        agent_at,
        agent_ids: (1..=n).collect(),
        rng: rng::episode_rng(seed),
        counters,
        step: 0,
        params,
        map,
        topology,
        seed,
    })
}

impl WorldState {
    pub fn map(&self) -> &TileMap {
        &self.map
    }

    pub fn map_arc(&self) -> &Arc<TileMap> {
        &self.map
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn step_count(&self) -> u32 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_slots(&self) -> usize {
        self.agent_pos.len()
    }

    pub fn assignment(&self) -> &Assignment {
        &self.assignment
    }

    pub fn center_of(&self, slot: usize) -> usize {
        self.assignment.center_of(slot)
    }

    /// Slot whose agent owns `center`.
    pub fn owner_slot(&self, center: usize) -> usize {
        self.owner_slot[center - 1]
    }

    pub fn agent_pos(&self, slot: usize) -> usize {
        self.agent_pos[slot]
    }

    pub fn agent_at(&self, cell: usize) -> Option<usize> {
        self.agent_at[cell]
    }

    pub fn has_unit(&self, cell: usize) -> bool {
        self.unit_at[cell]
    }

    pub fn is_broken(&self, center: usize) -> bool {
        self.broken[center - 1]
    }

    pub fn broken_centers(&self) -> impl Iterator<Item = usize> + '_ {
        (1..=self.broken.len()).filter(|&c| self.broken[c - 1])
    }

    pub fn units_in_flight(&self) -> u64 {
        self.unit_at.iter().filter(|&&u| u).count() as u64
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    /// Population ids of the agents in each slot (defaults to `1..=n`).
    pub fn agent_ids(&self) -> &[usize] {
        &self.agent_ids
    }

    pub fn set_agent_ids(&mut self, ids: Vec<usize>) {
        assert_eq!(ids.len(), self.num_slots(), "one id per slot");
        self.agent_ids = ids;
    }

    pub fn is_terminal(&self) -> bool {
        self.step >= self.params.episode_length
    }

    /// Places a unit directly, for constructing test situations.
    pub fn place_unit(&mut self, cell: usize) {
        assert!(self.map.tile(cell).is_unit_cell(), "units live on chain cells");
        self.unit_at[cell] = true;
    }

    /// Sets a center's broken flag directly, for constructing test situations.
    pub fn set_broken(&mut self, center: usize, broken: bool) {
        self.broken[center - 1] = broken;
    }

    /// Moves an agent directly. Panics if the cell is not walkable or taken.
    pub fn place_agent(&mut self, slot: usize, cell: usize) {
        assert!(self.map.tile(cell).is_walkable(), "agents walk on floor and tiles");
        let old = self.agent_pos[slot];
        if old == cell {
            return;
        }
        assert!(self.agent_at[cell].is_none(), "cell already occupied");
        self.agent_at[old] = None;
        self.agent_at[cell] = Some(slot);
        self.agent_pos[slot] = cell;
    }

    /// Advances one step with one action per slot.
    pub fn step(&mut self, actions: &[Action]) -> Result<StepOutcome, EngineError> {
        if self.is_terminal() {
            return Err(EngineError::EpisodeOver);
        }
        if actions.len() != self.num_slots() {
            return Err(EngineError::ActionCount { expected: self.num_slots(), got: actions.len() });
        }
        self.move_agents(actions);
        Ok(self.advance())
    }

    /// Travel-contracted step: agents are put straight onto `cells` (one
    /// per slot, walkable and distinct) instead of walking. The remaining
    /// phases run exactly as in [`WorldState::step`].
    pub fn step_teleport(&mut self, cells: &[usize]) -> Result<StepOutcome, EngineError> {
        if self.is_terminal() {
            return Err(EngineError::EpisodeOver);
        }
        if cells.len() != self.num_slots() {
            return Err(EngineError::ActionCount { expected: self.num_slots(), got: cells.len() });
        }
        for &p in &self.agent_pos {
            self.agent_at[p] = None;
        }
        for (slot, &cell) in cells.iter().enumerate() {
            assert!(self.map.tile(cell).is_walkable(), "teleport target must be walkable");
            assert!(self.agent_at[cell].is_none(), "teleport targets must be distinct");
            self.agent_at[cell] = Some(slot);
            self.agent_pos[slot] = cell;
        }
        Ok(self.advance())
    }

    fn move_agents(&mut self, actions: &[Action]) {
        let n = self.num_slots();
        let pos = self.agent_pos.clone();
        let mut target = pos.clone();
        for (slot, &action) in actions.iter().enumerate() {
            let (dx, dy) = action.delta();
            if (dx, dy) == (0, 0) {
                continue;
            }
            if let Some(cell) = self.map.offset(pos[slot], dx, dy) {
                if self.map.tile(cell).is_walkable() {
                    target[slot] = cell;
                }
            }
        }

        let mut claims: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for slot in 0..n {
            if target[slot] != pos[slot] {
                claims.entry(target[slot]).or_default().push(slot);
            }
        }
        for (_, claimants) in claims {
            if claimants.len() > 1 {
                let winner = claimants[rng::choose_index(&mut self.rng, claimants.len())];
                for slot in claimants {
                    if slot != winner {
                        target[slot] = pos[slot];
                    }
                }
            }
        }

        // No swapping through each other.
        for a in 0..n {
            for b in a + 1..n {
                if target[a] == pos[b] && target[b] == pos[a] && target[a] != pos[a] {
                    target[a] = pos[a];
                    target[b] = pos[b];
                }
            }
        }

        // A move into a cell whose occupant stays put is blocked; repeat
        // until no more moves get blocked.
        loop {
            let mut changed = false;
            for slot in 0..n {
                if target[slot] == pos[slot] {
                    continue;
                }
                if let Some(other) = self.agent_at[target[slot]] {
                    if target[other] == pos[other] {
                        target[slot] = pos[slot];
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }

        for &p in &pos {
            self.agent_at[p] = None;
        }
        for (slot, &cell) in target.iter().enumerate() {
            self.agent_at[cell] = Some(slot);
        }
        self.agent_pos = target;
    }

    /// Phases 2 to 7.
    fn advance(&mut self) -> StepOutcome {
        let n = self.topology.num_centers();
        let mut events = StepEvents::default();
        let mut rewards = vec![0i32; self.num_slots()];

        if self.params.two_agent_repair {
            for c in 1..=n {
                if !self.broken[c - 1] {
                    continue;
                }
                let on_center = self.agent_at[self.map.center_tile(c)];
                let on_repair = self.agent_at[self.map.repair_tile(c)];
                if let (Some(a), Some(b)) = (on_center, on_repair) {
                    self.broken[c - 1] = false;
                    events.manual_repairs.push(c);
                    let mut carers: Vec<usize> = [a, b]
                        .iter()
                        .map(|&slot| self.assignment.center_of(slot))
                        .filter(|&k| k != c)
                        .collect();
                    carers.sort_unstable();
                    for k in carers {
                        events.repaired.push((k, c));
                        self.counters.care[k - 1][c - 1] += 1;
                    }
                }
            }
        }

        if let Some(p) = self.params.repair_time.probability() {
            for c in 1..=n {
                if self.broken[c - 1] && rng::bernoulli(&mut self.rng, p) {
                    self.broken[c - 1] = false;
                    events.self_repaired.push(c);
                }
            }
        }

        let mut released = vec![false; self.map.num_cells()];
        for c in 1..=n {
            let cell = self.map.processing_cell(c);
            let owner = self.owner_slot[c - 1];
            if self.unit_at[cell] && !self.broken[c - 1] && self.agent_at[self.map.center_tile(c)] == Some(owner) {
                released[cell] = true;
                events.processed.push(c);
                rewards[owner] += 1;
                self.counters.processed[c - 1] += 1;
                if rng::bernoulli(&mut self.rng, self.params.break_prob) {
                    self.broken[c - 1] = true;
                    events.broke.push(c);
                    self.counters.breakages[c - 1] += 1;
                }
            }
        }

        self.flow_units(&released, &mut events);

        let sources = self.map.source_cells().to_vec();
        events.spawned = vec![0; sources.len()];
        for (i, &cell) in sources.iter().enumerate() {
            if !self.unit_at[cell] && rng::bernoulli(&mut self.rng, self.params.spawn_prob) {
                self.unit_at[cell] = true;
                events.spawned[i] = 1;
            }
        }

        self.counters.spawned += events.spawned_total() as u64;
        self.counters.sank += events.sank as u64;
        self.counters.discarded += events.discarded as u64;
        self.step += 1;
        StepOutcome { events, rewards }
    }

    fn flow_units(&mut self, released: &[bool], events: &mut StepEvents) {
        let map = self.map.clone();
        let mobile = |cell: usize, unit_at: &[bool]| {
            unit_at[cell] && (!matches!(map.tile(cell), Tile::Processing(_)) || released[cell])
        };
        // Lazily drawn successor choice for branch cells.
        let mut branch_choice: BTreeMap<usize, usize> = BTreeMap::new();

        for &target in map.flow_order() {
            if map.tile(target) == Tile::Sink && self.unit_at[target] {
                self.unit_at[target] = false;
                events.sank += 1;
            }
            let mut movers: Vec<usize> = Vec::with_capacity(2);
            for &from in map.predecessors(target) {
                if !mobile(from, &self.unit_at) {
                    continue;
                }
                let succ = map.successors(from);
                let chosen = if succ.len() == 1 {
                    succ[0]
                } else {
                    *branch_choice
                        .entry(from)
                        .or_insert_with(|| succ[rng::choose_index(&mut self.rng, succ.len())])
                };
                if chosen == target {
                    movers.push(from);
                }
            }
            if movers.is_empty() {
                continue;
            }
            if self.unit_at[target] {
                for from in movers {
                    self.unit_at[from] = false;
                    events.discarded += 1;
                }
                continue;
            }
            let winner = if movers.len() == 1 {
                movers[0]
            } else {
                movers[rng::choose_index(&mut self.rng, movers.len())]
            };
            self.unit_at[winner] = false;
            self.unit_at[target] = true;
        }
    }

    /// Renders the `13 x 13` RGB view of `slot`. Cells off the map are wall.
    pub fn observe(&self, slot: usize) -> Observation {
        self.observe_with(slot, ObservationMode::Egocentric)
    }

    pub fn observe_with(&self, slot: usize, mode: ObservationMode) -> Observation {
        let mut data = vec![0u8; OBS_LEN];
        self.observe_into(slot, mode, &mut data);
        Observation(data)
    }

    /// Writes the observation into a caller-provided buffer of [`OBS_LEN`] bytes.
    pub fn observe_into(&self, slot: usize, mode: ObservationMode, out: &mut [u8]) {
        assert_eq!(out.len(), OBS_LEN);
        let own = self.assignment.center_of(slot);
        let me = self.map.pos(self.agent_pos[slot]);
        let half = (OBS_SIZE / 2) as isize;
        let (ox, oy) = match mode {
            ObservationMode::Egocentric => (me.x as isize - half, me.y as isize - half),
            ObservationMode::FullMap => (0, 0),
        };
        for wy in 0..OBS_SIZE {
            for wx in 0..OBS_SIZE {
                let x = ox + wx as isize;
                let y = oy + wy as isize;
                let color = if x < 0 || y < 0 || x as usize >= self.map.width() || y as usize >= self.map.height() {
                    colors::WALL
                } else {
                    self.cell_color(y as usize * self.map.width() + x as usize, slot, own)
                };
                let i = (wy * OBS_SIZE + wx) * 3;
                out[i..i + 3].copy_from_slice(&color);
            }
        }
    }

    fn cell_color(&self, cell: usize, viewer: usize, own: usize) -> [u8; 3] {
        if let Some(slot) = self.agent_at[cell] {
            return if slot == viewer { colors::SELF } else { colors::OTHER_AGENT };
        }
        if self.unit_at[cell] {
            return colors::UNIT;
        }
        match self.map.tile(cell) {
            Tile::Wall => colors::WALL,
            Tile::Floor => colors::FLOOR,
            Tile::Path => colors::PATH,
            Tile::Source => colors::SOURCE,
            Tile::Sink => colors::SINK,
            Tile::Processing(_) => colors::PROCESSING,
            Tile::CenterTile(c) => match (c == own, self.broken[c - 1]) {
                (true, false) => colors::OWN_CENTER_TILE,
                (true, true) => colors::OWN_CENTER_TILE_BROKEN,
                (false, false) => colors::CENTER_TILE,
                (false, true) => colors::CENTER_TILE_BROKEN,
            },
            Tile::RepairTile(c) => {
                if c == own {
                    colors::OWN_REPAIR_TILE
                } else {
                    colors::REPAIR_TILE
                }
            }
        }
    }

    /// Text frame: the map legend plus `o` for units, `*` for a broken
    /// center's tile when nobody stands on it, and `J`, `K`, `L`, ... for
    /// the agents in slots 0, 1, 2, ...
    pub fn render(&self) -> String {
        const AGENTS: &[u8] = b"JKLMNOPQR";
        let map = &self.map;
        let mut out = String::new();
        for y in 0..map.height() {
            for x in 0..map.width() {
                let cell = y * map.width() + x;
                let ch = if let Some(slot) = self.agent_at[cell] {
                    AGENTS.get(slot).map(|&b| b as char).unwrap_or('@')
                } else if self.unit_at[cell] {
                    'o'
                } else if let Tile::CenterTile(c) = map.tile(cell) {
                    if self.broken[c - 1] {
                        '*'
                    } else {
                        map.tile_char(cell)
                    }
                } else {
                    map.tile_char(cell)
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Runs one full episode with the given policies, one per slot.
pub fn run_episode(
    world: &World,
    assignment: &Assignment,
    policies: &mut [Box<dyn Policy>],
    seed: u64,
) -> Result<EpisodeLog, EngineError> {
    run_episode_with_ids(world, assignment, None, policies, seed)
}

/// [`run_episode`] with explicit population ids recorded in the header.
pub fn run_episode_with_ids(
    world: &World,
    assignment: &Assignment,
    agent_ids: Option<Vec<usize>>,
    policies: &mut [Box<dyn Policy>],
    seed: u64,
) -> Result<EpisodeLog, EngineError> {
    let mut state = world.init(assignment, seed)?;
    if policies.len() != state.num_slots() {
        return Err(EngineError::ActionCount { expected: state.num_slots(), got: policies.len() });
    }
    if let Some(ids) = agent_ids {
        state.set_agent_ids(ids);
    }
    let mut policy_rngs: Vec<EpisodeRng> =
        (0..state.num_slots()).map(|slot| rng::episode_rng(rng::policy_seed(seed, slot))).collect();
    for (slot, policy) in policies.iter_mut().enumerate() {
        policy.reset(&PolicyContext::new(&state, slot));
    }

    let header = LogHeader::new(world, &state, policies.iter().map(|p| p.name().to_string()).collect());
    let mut steps = Vec::with_capacity(state.params().episode_length as usize);
    let mut actions = vec![Action::Wait; state.num_slots()];
    while !state.is_terminal() {
        for (slot, policy) in policies.iter_mut().enumerate() {
            actions[slot] = policy.act(&PolicyContext::new(&state, slot), &mut policy_rngs[slot])?;
        }
        let t = state.step_count();
        let outcome = state.step(&actions)?;
        for (slot, policy) in policies.iter_mut().enumerate() {
            policy.observe(&PolicyContext::new(&state, slot), &outcome.events);
        }
        steps.push(StepRecord { t, actions: actions.clone(), rewards: outcome.rewards, events: outcome.events });
    }
    let footer = LogFooter::from_state(&state);
    Ok(EpisodeLog { header, steps, footer: Some(footer) })
}
