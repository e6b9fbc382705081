//! Scripted policies.
//!
//! Scripted agents read the whole [`WorldState`] rather than pixels. They
//! are baselines and evaluation partners, not models of learned behavior.
//!
//! Movement toward a target uses the static walking-distance field of the
//! map and steps around other agents with a breadth-first search when the
//! direct step is blocked.

use std::collections::VecDeque;

use thiserror::Error;

use crate::engine::{Action, StepEvents, WorldState};
use crate::layout::UNREACHABLE;
use crate::rng::{self, EpisodeRng};

/// Default reciprocity window, in steps.
pub const DEFAULT_WINDOW: u32 = 200;

/// Names accepted by [`make_policy`].
pub const SCRIPTED_NAMES: [&str; 5] = ["selfish", "carer", "reciprocal", "random", "wait"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("slot {slot}: no walkable path from cell {from} to cell {to}")]
    NoPath { slot: usize, from: usize, to: usize },
    #[error("unknown policy `{0}` (expected one of selfish, carer, reciprocal, random, wait, learned:<id>)")]
    UnknownPolicy(String),
    #[error("learned policy: {0}")]
    Learned(String),
}

/// What a policy sees when choosing an action.
#[derive(Clone, Copy)]
pub struct PolicyContext<'a> {
    pub state: &'a WorldState,
    pub slot: usize,
}

impl<'a> PolicyContext<'a> {
    pub fn new(state: &'a WorldState, slot: usize) -> Self {
        PolicyContext { state, slot }
    }

    /// The center this slot owns.
    pub fn center(&self) -> usize {
        self.state.center_of(self.slot)
    }

    pub fn pos(&self) -> usize {
        self.state.agent_pos(self.slot)
    }
}

pub trait Policy: Send {
    fn name(&self) -> &str;

    /// Called once before the first step of an episode.
    fn reset(&mut self, _ctx: &PolicyContext) {}

    fn act(&mut self, ctx: &PolicyContext, rng: &mut EpisodeRng) -> Result<Action, PolicyError>;

    /// Called after every step with that step's events.
    fn observe(&mut self, _ctx: &PolicyContext, _events: &StepEvents) {}
}

/// Builds a scripted policy by name.
pub fn make_policy(name: &str, window: u32) -> Result<Box<dyn Policy>, PolicyError> {
    Ok(match name {
        "selfish" => Box::new(Selfish),
        "carer" => Box::new(Carer),
        "reciprocal" => Box::new(Reciprocal::new(window)),
        "random" => Box::new(RandomPolicy),
        "wait" => Box::new(WaitPolicy),
        other => return Err(PolicyError::UnknownPolicy(other.to_string())),
    })
}

/// One step toward `target`, or `Wait` when already there.
pub fn step_toward(ctx: &PolicyContext, target: usize, field: &[u32]) -> Result<Action, PolicyError> {
    let state = ctx.state;
    let map = state.map();
    let pos = ctx.pos();
    if pos == target {
        return Ok(Action::Wait);
    }
    let d = field[pos];
    if d == UNREACHABLE {
        return Err(PolicyError::NoPath { slot: ctx.slot, from: pos, to: target });
    }
    for action in [Action::Up, Action::Down, Action::Left, Action::Right] {
        let (dx, dy) = action.delta();
        if let Some(next) = map.offset(pos, dx, dy) {
            if field[next].checked_add(1) == Some(d) && state.agent_at(next).is_none() {
                return Ok(action);
            }
        }
    }
    Ok(detour(ctx, target).unwrap_or(Action::Wait))
}

/// First move of a shortest path that treats other agents as walls.
fn detour(ctx: &PolicyContext, target: usize) -> Option<Action> {
    let state = ctx.state;
    let map = state.map();
    let start = ctx.pos();
    let mut first: Vec<Option<Action>> = vec![None; map.num_cells()];
    let mut seen = vec![false; map.num_cells()];
    let mut queue = VecDeque::new();
    seen[start] = true;
    queue.push_back(start);
    while let Some(cell) = queue.pop_front() {
        for action in [Action::Up, Action::Down, Action::Left, Action::Right] {
            let (dx, dy) = action.delta();
            let Some(next) = map.offset(cell, dx, dy) else { continue };
            if seen[next] || !map.tile(next).is_walkable() {
                continue;
            }
            let via = first[cell].or(Some(action));
            if next == target {
                return via;
            }
            if state.agent_at(next).is_some() {
                continue;
            }
            seen[next] = true;
            first[next] = via;
            queue.push_back(next);
        }
    }
    None
}

fn go_home(ctx: &PolicyContext) -> Result<Action, PolicyError> {
    let c = ctx.center();
    let map = ctx.state.map();
    step_toward(ctx, map.center_tile(c), map.dist_to_center_tile(c))
}

/// Walks to its own center tile and stays there.
#[derive(Debug, Clone, Copy, Default)]
pub struct Selfish;

impl Policy for Selfish {
    fn name(&self) -> &str {
        "selfish"
    }

    fn act(&mut self, ctx: &PolicyContext, _rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        go_home(ctx)
    }
}

/// Whether this agent should hold its own broken center rather than help.
///
/// Owners of broken centers stay on their center tile so that one helper
/// suffices. When every center is broken that would leave nobody to help,
/// so only the owner of the lowest-index center holds.
fn holds_own(state: &WorldState, own: usize) -> bool {
    if !state.is_broken(own) {
        return false;
    }
    let n = state.topology().num_centers();
    let all_broken = (1..=n).all(|c| state.is_broken(c));
    !all_broken || own == 1
}

/// Shared carer logic: help the nearest broken center accepted by `helps`.
fn care_action(
    ctx: &PolicyContext,
    helps: impl Fn(usize) -> bool,
) -> Result<Action, PolicyError> {
    let state = ctx.state;
    let map = state.map();
    let own = ctx.center();
    let pos = ctx.pos();
    if holds_own(state, own) {
        return go_home(ctx);
    }
    let mut best: Option<(u32, usize, usize, &[u32])> = None;
    for c in state.broken_centers() {
        if c == own || !helps(c) {
            continue;
        }
        let repair = map.repair_tile(c);
        let center = map.center_tile(c);
        if pos == repair || pos == center {
            return Ok(Action::Wait);
        }
        let (target, field) = if state.agent_at(repair).is_none() {
            (repair, map.dist_to_repair_tile(c))
        } else if state.agent_at(center).is_none() {
            (center, map.dist_to_center_tile(c))
        } else {
            continue;
        };
        let d = field[pos];
        if d == UNREACHABLE {
            return Err(PolicyError::NoPath { slot: ctx.slot, from: pos, to: target });
        }
        if best.is_none_or(|(bd, _, _, _)| d < bd) {
            best = Some((d, c, target, field));
        }
    }
    match best {
        Some((_, _, target, field)) => step_toward(ctx, target, field),
        None => go_home(ctx),
    }
}

/// Helps any broken center, otherwise behaves like [`Selfish`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Carer;

impl Policy for Carer {
    fn name(&self) -> &str {
        "carer"
    }

    fn act(&mut self, ctx: &PolicyContext, _rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        care_action(ctx, |_| true)
    }
}

/// Tit-for-tat carer: helps center `j` only if `j`'s owner repaired this
/// agent's center within the last `window` steps, or if this agent's center
/// has never broken.
#[derive(Debug, Clone)]
pub struct Reciprocal {
    window: u32,
    been_broken: bool,
    /// Step at which the owner of each center last repaired mine.
    last_helped_by: Vec<Option<u32>>,
}

impl Reciprocal {
    pub fn new(window: u32) -> Self {
        Reciprocal { window, been_broken: false, last_helped_by: Vec::new() }
    }

    pub fn window(&self) -> u32 {
        self.window
    }

    /// Whether this agent would currently help the owner of `center`.
    pub fn trusts(&self, center: usize, now: u32) -> bool {
        if !self.been_broken {
            return true;
        }
        match self.last_helped_by.get(center - 1).copied().flatten() {
            Some(t) => now.saturating_sub(t) <= self.window,
            None => false,
        }
    }
}

impl Default for Reciprocal {
    fn default() -> Self {
        Reciprocal::new(DEFAULT_WINDOW)
    }
}

impl Policy for Reciprocal {
    fn name(&self) -> &str {
        "reciprocal"
    }

    fn reset(&mut self, ctx: &PolicyContext) {
        self.been_broken = false;
        self.last_helped_by = vec![None; ctx.state.topology().num_centers()];
    }

    fn act(&mut self, ctx: &PolicyContext, _rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        let now = ctx.state.step_count();
        care_action(ctx, |c| self.trusts(c, now))
    }

    fn observe(&mut self, ctx: &PolicyContext, events: &StepEvents) {
        let own = ctx.center();
        if self.last_helped_by.is_empty() {
            self.last_helped_by = vec![None; ctx.state.topology().num_centers()];
        }
        if events.broke.contains(&own) {
            self.been_broken = true;
        }
        // The step counter has already advanced; the repair happened one step earlier.
        let t = ctx.state.step_count().saturating_sub(1);
        for &(carer, receiver) in &events.repaired {
            if receiver == own {
                self.last_helped_by[carer - 1] = Some(t);
            }
        }
    }
}

/// Uniform over the five actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> &str {
        "random"
    }

    fn act(&mut self, _ctx: &PolicyContext, rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        Ok(Action::ALL[rng::choose_index(rng, Action::ALL.len())])
    }
}

/// Always waits.
#[derive(Debug, Clone, Copy, Default)]
pub struct WaitPolicy;

impl Policy for WaitPolicy {
    fn name(&self) -> &str {
        "wait"
    }

    fn act(&mut self, _ctx: &PolicyContext, _rng: &mut EpisodeRng) -> Result<Action, PolicyError> {
        Ok(Action::Wait)
    }
}
