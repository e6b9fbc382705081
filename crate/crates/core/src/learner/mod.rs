//! Population training with a synchronous advantage actor-critic.
//!
//! A population of independently parameterized agents is trained by
//! sampling matches, collecting fixed-length unrolls from many environments
//! in parallel, and updating each agent only from the unrolls it played.
//! Collection results are merged in environment order and each agent's
//! gradient is summed in a fixed order, so a run is a pure function of its
//! configuration and master seed regardless of thread count.

pub mod checkpoint;
pub mod network;
pub mod optim;

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{
    run_episode_with_ids, Action, Assignment, EngineError, ObservationMode, World, WorldState, OBS_LEN,
};
use crate::metrics::{format_float, MatrixNorm, MetricsError, SocialMetrics};
use crate::policies::{Policy, PolicyContext, PolicyError};
use crate::rng::{self, EpisodeRng};

pub use checkpoint::{Checkpoint, CheckpointError};
pub use network::{a2c_loss, Architecture, LossWeights, Network, NetworkError, Output, Trace, NUM_ACTIONS};
pub use optim::{RmsProp, RmsPropConfig};

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("non-finite loss for agent {agent} at update {update}")]
    DivergedLoss { agent: usize, update: u64 },
    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// How agents are matched to centers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssignmentMode {
    /// A uniform subset of the population, on a uniform random bijection to centers.
    #[default]
    Random,
    /// Members `0..match_size` every time, member `k` on center `k + 1`.
    Fixed,
}

impl std::str::FromStr for AssignmentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "random" => Ok(AssignmentMode::Random),
            "fixed" => Ok(AssignmentMode::Fixed),
            other => Err(format!("assignment must be random or fixed, got `{other}`")),
        }
    }
}

/// One sampled match: the population member playing each slot and the
/// center each slot owns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Match {
    pub members: Vec<usize>,
    pub assignment: Assignment,
}

impl Match {
    /// Member ids as recorded in logs (1-based).
    pub fn agent_ids(&self) -> Vec<usize> {
        self.members.iter().map(|m| m + 1).collect()
    }
}

/// Draws a match following the single-draw protocol: a partial
/// Fisher-Yates shuffle of the population, then a full shuffle of centers.
pub fn sample_match(population: usize, match_size: usize, mode: AssignmentMode, rng: &mut EpisodeRng) -> Match {
    assert!(match_size <= population, "match larger than population");
    match mode {
        AssignmentMode::Fixed => Match { members: (0..match_size).collect(), assignment: Assignment::identity(match_size) },
        AssignmentMode::Random => {
            let mut pool: Vec<usize> = (0..population).collect();
            for i in 0..match_size {
                let j = i + rng::choose_index(rng, population - i);
                pool.swap(i, j);
            }
            pool.truncate(match_size);
            let mut centers: Vec<usize> = (1..=match_size).collect();
            for i in 0..match_size.saturating_sub(1) {
                let j = i + rng::choose_index(rng, match_size - i);
                centers.swap(i, j);
            }
            Match { members: pool, assignment: Assignment::new(centers) }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub discount: f64,
    pub unroll_length: usize,
    pub entropy_weight: f64,
    pub value_weight: f64,
    /// Unrolls per agent update.
    pub batch_size: usize,
    pub optimizer: RmsPropConfig,
    /// Environment steps over all parallel environments.
    pub total_steps: u64,
    pub parallel_envs: usize,
    pub population_size: usize,
    pub assignment: AssignmentMode,
    pub architecture: Architecture,
    /// Steps between rows of the training curves.
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            discount: 0.99,
            unroll_length: 100,
            entropy_weight: 0.003,
            value_weight: 0.5,
            batch_size: 16,
            optimizer: RmsPropConfig::default(),
            total_steps: 500_000,
            parallel_envs: 16,
            population_size: 8,
            assignment: AssignmentMode::Random,
            architecture: Architecture::default(),
            log_interval: 10_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, match_size: usize) -> Result<(), LearnerError> {
        let bad = |m: &str| Err(LearnerError::BadConfig(m.to_string()));
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must be in (0, 1)");
        }
        if self.unroll_length == 0 || self.batch_size == 0 || self.parallel_envs == 0 || self.log_interval == 0 {
            return bad("unroll_length, batch_size, parallel_envs and log_interval must be positive");
        }
        if self.optimizer.learning_rate < 0.0 || self.entropy_weight < 0.0 || self.value_weight < 0.0 {
            return bad("rates and weights must be non-negative");
        }
        if match_size > self.population_size {
            return bad("population is smaller than a match");
        }
        Ok(())
    }

    /// Hex SHA-256 of the JSON encoding.
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serializes")).into()
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights { value: self.value_weight, entropy: self.entropy_weight }
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub params: Vec<f64>,
    pub optimizer: RmsProp,
    pub updates: u64,
}

#[derive(Debug, Clone)]
pub struct Population {
    pub network: Arc<Network>,
    pub members: Vec<Member>,
}

impl Population {
    pub fn new(arch: Architecture, size: usize, opt: RmsPropConfig, seed: u64) -> Population {
        let network = Network::new(arch);
        let members = (0..size)
            .map(|i| Member {
                params: network.init_params(rng::derive_seed(seed, i as u64)),
                optimizer: RmsProp::new(opt, network.num_params()),
                updates: 0,
            })
            .collect();
        Population { network: Arc::new(network), members }
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            config_hash: cfg.hash(),
            architecture: self.network.architecture().clone(),
            members: self.members.iter().map(|m| m.params.clone()).collect(),
        }
    }

    /// Rebuilds a population for evaluation. When `cfg` is given its hash
    /// must match the one stored in the checkpoint.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: Option<&TrainConfig>) -> Result<Population, LearnerError> {
        if let Some(cfg) = cfg {
            if cfg.hash() != ck.config_hash {
                return Err(LearnerError::ConfigMismatch);
            }
        }
        let network = Network::new(ck.architecture.clone());
        let opt = cfg.map(|c| c.optimizer).unwrap_or_default();
        let members = ck
            .members
            .iter()
            .map(|p| Member { params: p.clone(), optimizer: RmsProp::new(opt, p.len()), updates: 0 })
            .collect();
        Ok(Population { network: Arc::new(network), members })
    }

    /// A frozen policy for member `index`.
    pub fn policy(&self, index: usize, greedy: bool) -> LearnedPolicy {
        LearnedPolicy::new(index + 1, self.network.clone(), Arc::new(self.members[index].params.clone()), greedy)
    }
}

/// Samples an action index from `probs` with one draw.
pub fn sample_action(probs: &[f64; NUM_ACTIONS], rng: &mut EpisodeRng) -> usize {
    let u = rng::draw(rng);
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    NUM_ACTIONS - 1
}

fn greedy_action(probs: &[f64; NUM_ACTIONS]) -> usize {
    let mut best = 0;
    for k in 1..NUM_ACTIONS {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    best
}

fn observe_f64(state: &WorldState, slot: usize, bytes: &mut [u8], out: &mut Vec<f64>) {
    state.observe_into(slot, ObservationMode::Egocentric, bytes);
    out.clear();
    out.extend(bytes.iter().map(|&b| b as f64 / 255.0));
}

/// A network policy reading egocentric observations.
#[derive(Debug, Clone)]
pub struct LearnedPolicy {
    name: String,
    network: Arc<Network>,
    params: Arc<Vec<f64>>,
    greedy: bool,
    bytes: Vec<u8>,
    input: Vec<f64>,
}

impl LearnedPolicy {
    pub fn new(id: usize, network: Arc<Network>, params: Arc<Vec<f64>>, greedy: bool) -> Self {
        LearnedPolicy { name: format!("learned:{id}"), network, params, greedy, bytes: vec![0; OBS_LEN], input: Vec::new() }
    }
}

impl Policy for LearnedPolicy {
    fn name(&self) -> &str {
        &self.name
    }

    fn act(&mut self, ctx: &PolicyContext, rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        observe_f64(ctx.state, ctx.slot, &mut self.bytes, &mut self.input);
        let out = self.network.forward(&self.params, &self.input).map_err(|e| PolicyError::Learned(e.to_string()))?;
        let k = if self.greedy { greedy_action(&out.probs) } else { sample_action(&out.probs, rng) };
        Ok(Action::ALL[k])
    }
}

/// One agent's experience over consecutive steps.
#[derive(Debug, Clone, Default)]
struct Unroll {
    /// Observations before each step, plus the one after the last step.
    obs: Vec<Vec<u8>>,
    actions: Vec<u8>,
    rewards: Vec<f64>,
    /// The episode ended after the last step, so there is nothing to bootstrap.
    terminal: bool,
}

/// Counts for the episode currently running in an actor.
#[derive(Debug, Clone)]
struct EpisodeTally {
    r: Vec<u64>,
    b: Vec<u64>,
    care: DMatrix<f64>,
}

impl EpisodeTally {
    fn new(n: usize) -> Self {
        EpisodeTally { r: vec![0; n], b: vec![0; n], care: DMatrix::zeros(n, n) }
    }
}

struct Actor {
    index: u64,
    state: WorldState,
    current: Match,
    rng: EpisodeRng,
    episodes: u64,
    tally: EpisodeTally,
}

impl Actor {
    fn start(world: &World, index: u64, master: u64, pop: usize, mode: AssignmentMode) -> Result<Actor, LearnerError> {
        let mut rng = rng::episode_rng(rng::derive_seed(master, index));
        let n = world.num_centers();
        let current = sample_match(pop, n, mode, &mut rng);
        let mut state = world.init(&current.assignment, episode_seed(master, index, 0))?;
        state.set_agent_ids(current.agent_ids());
        Ok(Actor { index, state, current, rng, episodes: 0, tally: EpisodeTally::new(n) })
    }

    fn restart(&mut self, world: &World, master: u64, pop: usize, mode: AssignmentMode) -> Result<(), LearnerError> {
        self.episodes += 1;
        let n = world.num_centers();
        self.current = sample_match(pop, n, mode, &mut self.rng);
        self.state = world.init(&self.current.assignment, episode_seed(master, self.index, self.episodes))?;
        self.state.set_agent_ids(self.current.agent_ids());
        self.tally = EpisodeTally::new(n);
        Ok(())
    }

    /// Advances up to `len` steps; returns per-slot unrolls and the metrics
    /// of the episode if it finished.
    fn collect(
        &mut self,
        pop: &Population,
        len: usize,
        world: &World,
    ) -> Result<(Vec<(usize, Unroll)>, Option<SocialMetrics>), LearnerError> {
        let slots = self.state.num_slots();
        let mut unrolls: Vec<Unroll> = vec![Unroll::default(); slots];
        let mut bytes = vec![0u8; OBS_LEN];
        let mut input = Vec::with_capacity(OBS_LEN);
        let mut actions = vec![Action::Wait; slots];
        for _ in 0..len {
            for slot in 0..slots {
                observe_f64(&self.state, slot, &mut bytes, &mut input);
                let params = &pop.members[self.current.members[slot]].params;
                let out = pop.network.forward(params, &input)?;
                let k = sample_action(&out.probs, &mut self.rng);
                actions[slot] = Action::ALL[k];
                unrolls[slot].obs.push(bytes.clone());
                unrolls[slot].actions.push(k as u8);
            }
            let outcome = self.state.step(&actions)?;
            for slot in 0..slots {
                unrolls[slot].rewards.push(outcome.rewards[slot] as f64);
            }
            let e = &outcome.events;
            for &c in &e.processed {
                self.tally.r[c - 1] += 1;
            }
            for &c in &e.broke {
                self.tally.b[c - 1] += 1;
            }
            for &(i, j) in &e.repaired {
                self.tally.care[(i - 1, j - 1)] += 1.0;
            }
            if self.state.is_terminal() {
                break;
            }
        }
        let terminal = self.state.is_terminal();
        for (slot, u) in unrolls.iter_mut().enumerate() {
            self.state.observe_into(slot, ObservationMode::Egocentric, &mut bytes);
            u.obs.push(bytes.clone());
            u.terminal = terminal;
        }
        let finished = if terminal {
            let c = self.state.counters();
            let m = SocialMetrics::from_counts(
                world.topology.as_ref(),
                self.tally.r.clone(),
                self.tally.b.clone(),
                self.tally.care.clone(),
                c.spawned,
                c.sank,
                c.discarded,
                MatrixNorm::Frobenius,
            )?;
            Some(m)
        } else {
            None
        };
        let out = self.current.members.iter().copied().zip(unrolls).collect();
        Ok((out, finished))
    }
}

fn episode_seed(master: u64, actor: u64, episode: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(master ^ 0xE915_0DE5, actor), episode)
}

/// Sums the loss gradient over `batch` into `grad`; returns the summed loss
/// and the summed policy entropy.
fn accumulate_gradient(
    net: &Network,
    params: &[f64],
    batch: &[Unroll],
    cfg: &TrainConfig,
    grad: &mut [f64],
) -> Result<(f64, f64, usize), LearnerError> {
    let mut trace = Trace::default();
    let mut input = Vec::with_capacity(OBS_LEN);
    let (mut loss, mut entropy, mut count) = (0.0, 0.0, 0usize);
    let w = cfg.loss_weights();
    for u in batch {
        let steps = u.actions.len();
        let bootstrap = if u.terminal {
            0.0
        } else {
            input.clear();
            input.extend(u.obs[steps].iter().map(|&b| b as f64 / 255.0));
            net.forward(params, &input)?.value
        };
        let mut returns = vec![0.0; steps];
        let mut g = bootstrap;
        for t in (0..steps).rev() {
            g = u.rewards[t] + cfg.discount * g;
            returns[t] = g;
        }
        for t in 0..steps {
            input.clear();
            input.extend(u.obs[t].iter().map(|&b| b as f64 / 255.0));
            let out = net.forward_traced(params, &input, &mut trace)?;
            let (l, dz, dv) = a2c_loss(&out, u.actions[t] as usize, returns[t], w);
            loss += l;
            entropy += out.entropy();
            count += 1;
            net.backward(params, &input, &trace, &dz, dv, grad);
        }
    }
    Ok((loss, entropy, count))
}

/// Averages the batch gradient and applies one optimizer step.
fn update_member(member: &mut Member, net: &Network, batch: &[Unroll], cfg: &TrainConfig, agent: usize) -> Result<f64, LearnerError> {
    let mut grad = vec![0.0; net.num_params()];
    let (loss, entropy, count) = accumulate_gradient(net, &member.params, batch, cfg, &mut grad)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(LearnerError::DivergedLoss { agent, update: member.updates });
    }
    let scale = 1.0 / count.max(1) as f64;
    for g in &mut grad {
        *g *= scale;
    }
    member.optimizer.step(&mut member.params, &grad);
    member.updates += 1;
    Ok(entropy * scale)
}

/// One row of the training curves: means over the episodes that finished
/// since the previous row.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub episodes: usize,
    pub group_reward: f64,
    pub total_care: f64,
    pub s: f64,
    pub d: f64,
    /// Mean policy entropy over the updates in the interval.
    pub entropy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingCurves {
    pub rows: Vec<CurveRow>,
}

impl TrainingCurves {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), LearnerError> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| LearnerError::Io(e.into());
        out.write_record(["step", "group_reward", "total_care", "S", "D"]).map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.step.to_string(),
                format_float(r.group_reward),
                format_float(r.total_care),
                format_float(r.s),
                format_float(r.d),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Mean group reward over the last `k` rows.
    pub fn tail_reward(&self, k: usize) -> f64 {
        let tail = &self.rows[self.rows.len().saturating_sub(k)..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().map(|r| r.group_reward).sum::<f64>() / tail.len() as f64
    }
}

/// Trains a fresh population on `world`.
pub fn train(world: &World, cfg: &TrainConfig, master_seed: u64) -> Result<(Population, TrainingCurves), LearnerError> {
    let pop = Population::new(cfg.architecture.clone(), cfg.population_size, cfg.optimizer, rng::derive_seed(master_seed, u64::MAX));
    train_population(world, cfg, pop, master_seed)
}

/// Continues training `pop` on `world`.
pub fn train_population(
    world: &World,
    cfg: &TrainConfig,
    mut pop: Population,
    master_seed: u64,
) -> Result<(Population, TrainingCurves), LearnerError> {
    let n = world.num_centers();
    cfg.validate(n)?;
    if pop.size() != cfg.population_size {
        return Err(LearnerError::BadConfig("population size differs from config".into()));
    }
    if cfg.assignment == AssignmentMode::Fixed && n > pop.size() {
        return Err(LearnerError::BadConfig("fixed assignment needs one member per center".into()));
    }
    let mut actors = (0..cfg.parallel_envs as u64)
        .map(|i| Actor::start(world, i, master_seed, pop.size(), cfg.assignment))
        .collect::<Result<Vec<_>, _>>()?;
    let mut buffers: Vec<VecDeque<Unroll>> = vec![VecDeque::new(); pop.size()];
    let mut curves = TrainingCurves::default();
    let mut finished: Vec<SocialMetrics> = Vec::new();
    let mut entropies: Vec<f64> = Vec::new();
    let mut steps = 0u64;
    let mut next_row = cfg.log_interval;

    while steps < cfg.total_steps {
        let results: Vec<_> = actors
            .par_iter_mut()
            .map(|a| {
                let before = a.state.step_count();
                let r = a.collect(&pop, cfg.unroll_length, world);
                (r, (a.state.step_count() - before) as u64)
            })
            .collect();
        for (actor, (res, taken)) in actors.iter_mut().zip(results) {
            let (unrolls, done) = res?;
            steps += taken;
            for (member, u) in unrolls {
                buffers[member].push_back(u);
            }
            if let Some(m) = done {
                finished.push(m);
                actor.restart(world, master_seed, pop.size(), cfg.assignment)?;
            }
        }

        let net = pop.network.clone();
        let updates: Vec<Result<Option<f64>, LearnerError>> = pop
            .members
            .par_iter_mut()
            .zip(buffers.par_iter_mut())
            .enumerate()
            .map(|(agent, (member, buf))| {
                if buf.len() < cfg.batch_size {
                    return Ok(None);
                }
                let batch: Vec<Unroll> = buf.drain(..cfg.batch_size).collect();
                update_member(member, &net, &batch, cfg, agent).map(Some)
            })
            .collect();
        for u in updates {
            if let Some(h) = u? {
                entropies.push(h);
            }
        }

        if steps >= next_row || steps >= cfg.total_steps {
            if !finished.is_empty() || !entropies.is_empty() {
                curves.rows.push(curve_row(steps, &finished, &entropies));
            }
            finished.clear();
            entropies.clear();
            while next_row <= steps {
                next_row += cfg.log_interval;
            }
        }
    }
    Ok((pop, curves))
}

fn curve_row(step: u64, eps: &[SocialMetrics], entropies: &[f64]) -> CurveRow {
    let k = eps.len().max(1) as f64;
    let mean = |f: &dyn Fn(&SocialMetrics) -> f64| eps.iter().map(f).sum::<f64>() / k;
    CurveRow {
        step,
        episodes: eps.len(),
        group_reward: mean(&|m| m.group_reward as f64),
        total_care: mean(&|m| m.total_care()),
        s: mean(&|m| m.s),
        d: mean(&|m| m.d),
        entropy: if entropies.is_empty() { 0.0 } else { entropies.iter().sum::<f64>() / entropies.len() as f64 },
    }
}

/// Evaluates frozen members: `episodes` episodes with matches drawn as in
/// training, episode `k` seeded from `(master_seed, k)`.
pub fn evaluate_population(
    pop: &Population,
    world: &World,
    mode: AssignmentMode,
    episodes: usize,
    master_seed: u64,
    greedy: bool,
) -> Result<Vec<SocialMetrics>, LearnerError> {
    let n = world.num_centers();
    (0..episodes as u64)
        .into_par_iter()
        .map(|k| {
            let seed = rng::derive_seed(master_seed, k);
            let mut rng = rng::episode_rng(rng::derive_seed(seed, 0x0A55_1647));
            let m = sample_match(pop.size(), n, mode, &mut rng);
            let mut policies: Vec<Box<dyn Policy>> =
                m.members.iter().map(|&i| Box::new(pop.policy(i, greedy)) as Box<dyn Policy>).collect();
            let log = run_episode_with_ids(world, &m.assignment, Some(m.agent_ids()), &mut policies, seed)?;
            Ok(crate::metrics::aggregate(&log)?)
        })
        .collect()
}
