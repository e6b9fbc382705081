//! Independent oracles shared by the integration tests.
//!
//! `QueueSim` models the conveyor as nodes joined by delay lines instead of
//! a cell graph, and agents as abstract "who stands where" facts instead of
//! grid positions. It takes only lane lengths and an evaluation order from
//! a map. `shapley_brute_force` enumerates every ordering of the players.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use supplychain::engine::{EnvParams, StepEvents};
use supplychain::layout::{Tile, TileMap};
use supplychain::rng::{self, EpisodeRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum NodeKind {
    Source,
    Processing(usize),
    Sink,
    Junction,
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    order: usize,
    full: bool,
    /// Incoming links in the map's predecessor order.
    inputs: Vec<usize>,
    outputs: Vec<usize>,
}

/// A delay line from one node to another.
#[derive(Debug, Clone)]
struct Lane {
    from: usize,
    to: usize,
    /// Occupancy of the intermediate cells, upstream first.
    cells: Vec<bool>,
    /// Evaluation order of the first intermediate cell.
    entry_order: usize,
}

#[derive(Debug, Clone, Copy)]
enum Site {
    Node(usize),
    Entry(usize),
}

/// Who stands on a center's two special tiles this step, as center ids of
/// the agents (each agent owns exactly one center).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Presence {
    pub on_center: Option<usize>,
    pub on_repair: Option<usize>,
}

pub struct QueueSim {
    nodes: Vec<Node>,
    lanes: Vec<Lane>,
    sites: Vec<(usize, Site)>,
    sources: Vec<usize>,
    processing: BTreeMap<usize, usize>,
    broken: Vec<bool>,
    params: EnvParams,
    rng: EpisodeRng,
}

pub struct QueueStep {
    pub events: StepEvents,
    /// Reward per center owner.
    pub rewards: Vec<i32>,
}

impl QueueSim {
    pub fn new(map: &TileMap, params: EnvParams, seed: u64) -> QueueSim {
        let n = map.num_centers();
        let order: BTreeMap<usize, usize> = map.flow_order().iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let is_node = |c: usize| {
            matches!(map.tile(c), Tile::Source | Tile::Processing(_) | Tile::Sink)
                || map.successors(c).len() != 1
                || map.predecessors(c).len() != 1
        };
        let mut node_of = BTreeMap::new();
        let mut nodes = Vec::new();
        for c in 0..map.num_cells() {
            if map.tile(c).is_unit_cell() && is_node(c) {
                let kind = match map.tile(c) {
                    Tile::Source => NodeKind::Source,
                    Tile::Processing(k) => NodeKind::Processing(k),
                    Tile::Sink => NodeKind::Sink,
                    _ => NodeKind::Junction,
                };
                node_of.insert(c, nodes.len());
                nodes.push(Node { kind, order: order[&c], full: false, inputs: vec![], outputs: vec![] });
            }
        }
        let mut lanes = Vec::new();
        let mut lane_by_last_cell = BTreeMap::new();
        for (&cell, &a) in &node_of {
            for &s in map.successors(cell) {
                let mut cells = Vec::new();
                let mut cur = s;
                let mut last = cell;
                while !node_of.contains_key(&cur) {
                    cells.push(cur);
                    last = cur;
                    cur = map.successors(cur)[0];
                }
                let id = lanes.len();
                lane_by_last_cell.insert((last, cur), id);
                lanes.push(Lane { from: a, to: node_of[&cur], entry_order: order[&s], cells: vec![false; cells.len()] });
                nodes[a].outputs.push(id);
            }
        }
        for (&cell, &b) in &node_of {
            for &p in map.predecessors(cell) {
                nodes[b].inputs.push(lane_by_last_cell[&(p, cell)]);
            }
        }
        let mut sites: Vec<(usize, Site)> = nodes.iter().enumerate().map(|(i, n)| (n.order, Site::Node(i))).collect();
        for (i, l) in lanes.iter().enumerate() {
            if !l.cells.is_empty() {
                sites.push((l.entry_order, Site::Entry(i)));
            }
        }
        sites.sort_by_key(|s| s.0);
        let sources = map.source_cells().iter().map(|c| node_of[c]).collect();
        let processing = (1..=n).map(|k| (k, node_of[&map.processing_cell(k)])).collect();
        QueueSim { nodes, lanes, sites, sources, processing, broken: vec![false; n], params, rng: rng::episode_rng(seed) }
    }

    pub fn units_in_flight(&self) -> usize {
        self.nodes.iter().filter(|n| n.full).count() + self.lanes.iter().map(|l| l.cells.iter().filter(|&&u| u).count()).sum::<usize>()
    }

    pub fn step(&mut self, presence: &[Presence]) -> QueueStep {
        let n = self.broken.len();
        let mut events = StepEvents::default();
        let mut rewards = vec![0; n];

        if self.params.two_agent_repair {
            for c in 1..=n {
                if let (true, Some(a), Some(b)) = (self.broken[c - 1], presence[c - 1].on_center, presence[c - 1].on_repair) {
                    self.broken[c - 1] = false;
                    events.manual_repairs.push(c);
                    let mut carers: Vec<usize> = [a, b].into_iter().filter(|&k| k != c).collect();
                    carers.sort_unstable();
                    events.repaired.extend(carers.into_iter().map(|k| (k, c)));
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

        let mut released = vec![false; self.nodes.len()];
        for c in 1..=n {
            let node = self.processing[&c];
            if self.nodes[node].full && !self.broken[c - 1] && presence[c - 1].on_center == Some(c) {
                released[node] = true;
                events.processed.push(c);
                rewards[c - 1] += 1;
                if rng::bernoulli(&mut self.rng, self.params.break_prob) {
                    self.broken[c - 1] = true;
                    events.broke.push(c);
                }
            }
        }

        self.flow(&released, &mut events);

        events.spawned = vec![0; self.sources.len()];
        for i in 0..self.sources.len() {
            let s = self.sources[i];
            if !self.nodes[s].full && rng::bernoulli(&mut self.rng, self.params.spawn_prob) {
                self.nodes[s].full = true;
                events.spawned[i] = 1;
            }
        }
        QueueStep { events, rewards }
    }

    fn mobile(&self, node: usize, released: &[bool]) -> bool {
        self.nodes[node].full && (!matches!(self.nodes[node].kind, NodeKind::Processing(_)) || released[node])
    }

    /// Whether the unit at node `a` heads into lane `lane`, drawing the
    /// branch choice the first time it is needed.
    fn heads_into(&mut self, a: usize, lane: usize, choice: &mut BTreeMap<usize, usize>) -> bool {
        let outs = &self.nodes[a].outputs;
        if outs.len() == 1 {
            return outs[0] == lane;
        }
        let k = outs.len();
        let idx = *choice.entry(a).or_insert_with(|| rng::choose_index(&mut self.rng, k));
        self.nodes[a].outputs[idx] == lane
    }

    fn flow(&mut self, released: &[bool], events: &mut StepEvents) {
        let mut choice = BTreeMap::new();
        // Lanes whose last unit lost a merge and stayed put.
        let mut stuck = vec![false; self.lanes.len()];
        for si in 0..self.sites.len() {
            match self.sites[si].1 {
                Site::Node(b) => {
                    if self.nodes[b].kind == NodeKind::Sink && self.nodes[b].full {
                        self.nodes[b].full = false;
                        events.sank += 1;
                    }
                    let mut movers = Vec::new();
                    for li in self.nodes[b].inputs.clone() {
                        let lane = &self.lanes[li];
                        let moving = if let Some(&last) = lane.cells.last() {
                            last
                        } else {
                            let a = lane.from;
                            self.mobile(a, released) && self.heads_into(a, li, &mut choice)
                        };
                        if moving {
                            movers.push(li);
                        }
                    }
                    if !movers.is_empty() {
                        if self.nodes[b].full {
                            for &li in &movers {
                                self.take_head(li);
                                events.discarded += 1;
                            }
                        } else {
                            let w = if movers.len() == 1 { 0 } else { rng::choose_index(&mut self.rng, movers.len()) };
                            for (i, &li) in movers.iter().enumerate() {
                                if i == w {
                                    self.take_head(li);
                                } else if !self.lanes[li].cells.is_empty() {
                                    stuck[li] = true;
                                }
                            }
                            self.nodes[b].full = true;
                        }
                    }
                    for li in self.nodes[b].inputs.clone() {
                        self.shift_lane(li, stuck[li], events);
                    }
                }
                Site::Entry(li) => {
                    let a = self.lanes[li].from;
                    if self.mobile(a, released) && self.heads_into(a, li, &mut choice) {
                        self.nodes[a].full = false;
                        if self.lanes[li].cells[0] {
                            events.discarded += 1;
                        } else {
                            self.lanes[li].cells[0] = true;
                        }
                    }
                }
            }
        }
    }

    /// Removes the unit that leaves lane `li` at its downstream end.
    fn take_head(&mut self, li: usize) {
        let lane = &mut self.lanes[li];
        match lane.cells.last_mut() {
            Some(last) => *last = false,
            None => {
                let a = lane.from;
                self.nodes[a].full = false;
            }
        }
    }

    /// Moves every intermediate unit one cell down the lane. Only the cell
    /// behind a stuck head can be blocked.
    fn shift_lane(&mut self, li: usize, head_stuck: bool, events: &mut StepEvents) {
        let cells = &mut self.lanes[li].cells;
        let k = cells.len();
        for p in (0..k.saturating_sub(1)).rev() {
            if cells[p] {
                cells[p] = false;
                if cells[p + 1] {
                    debug_assert!(head_stuck && p + 1 == k - 1);
                    events.discarded += 1;
                } else {
                    cells[p + 1] = true;
                }
            }
        }
    }
}

/// Shapley value of each player in a cost game, by averaging marginal
/// costs over all orderings. `cost` maps a coalition bitmask to its cost.
pub fn shapley_brute_force(players: usize, cost: impl Fn(u32) -> f64) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..players).collect();
    let mut values = vec![0.0; players];
    let mut count = 0u64;
    permute(&mut perm, 0, &mut |order| {
        let mut set = 0u32;
        for &p in order {
            let before = cost(set);
            set |= 1 << p;
            values[p] += cost(set) - before;
        }
        count += 1;
    });
    values.iter().map(|v| v / count as f64).collect()
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

/// All rooted forests on centers `1..=n` given as parent arrays: center `c`
/// either starts a chain (`None`) or hangs below a lower-numbered center.
/// Every labelled forest appears up to relabelling.
pub fn parent_forests(n: usize) -> Vec<Vec<Option<usize>>> {
    let mut out = vec![vec![]];
    for c in 1..=n {
        let mut next = Vec::new();
        for f in &out {
            let mut a = f.clone();
            a.push(None);
            next.push(a);
            for p in 1..c {
                let mut b = f.clone();
                b.push(Some(p));
                next.push(b);
            }
        }
        out = next;
    }
    out
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use supplychain::engine::{Assignment, EnvSpec, LayoutSpec, RepairTime, World};
use supplychain::layout::LayoutStyle;
use supplychain::topology::TopologySpec;

pub fn world(num_centers: usize, edges: &[[usize; 2]], style: LayoutStyle, spacing: usize, params: EnvParams) -> World {
    let spec = EnvSpec {
        topology: TopologySpec { num_centers, edges: edges.to_vec() },
        layout: LayoutSpec { style, spacing },
        params,
    };
    World::build(spec).expect("valid world")
}

/// Maps the oracle comparison runs on: chains in both styles plus the
/// three branched graphs.
pub fn oracle_worlds() -> Vec<(String, World)> {
    let busy = EnvParams { spawn_prob: 0.4, episode_length: 300, ..EnvParams::default() };
    let repairing = EnvParams { repair_time: RepairTime::Finite(15), episode_length: 300, ..EnvParams::default() };
    vec![
        ("circular4".into(), world(4, &[[1, 2], [2, 3], [3, 4]], LayoutStyle::Circular, 3, busy.clone())),
        ("linear2".into(), world(2, &[[1, 2]], LayoutStyle::Linear, 2, repairing.clone())),
        ("linear3".into(), world(3, &[[1, 2], [2, 3]], LayoutStyle::Linear, 5, busy.clone())),
        ("env1".into(), world(4, &[[1, 2], [1, 3], [3, 4]], LayoutStyle::Branched, 3, busy.clone())),
        ("env2".into(), world(4, &[[1, 2], [2, 3], [2, 4]], LayoutStyle::Branched, 3, repairing)),
        ("env3".into(), world(4, &[[1, 2], [1, 3], [2, 4], [3, 4]], LayoutStyle::Branched, 3, busy)),
    ]
}

/// Drives the engine in teleport mode with a scripted random occupancy and
/// the oracle with the same occupancy, comparing every step. Returns the
/// totals seen, so callers can check the run exercised every rule.
pub fn compare_with_oracle(world: &World, seed: u64) -> Result<OracleTotals, String> {
    let n = world.num_centers();
    let map = world.map.clone();
    let mut state = world.init(&Assignment::identity(n), seed).map_err(|e| e.to_string())?;
    let mut sim = QueueSim::new(&map, world.spec.params.clone(), seed);
    let mut script = ChaCha8Rng::seed_from_u64(seed ^ 0x5C41_9700);
    let specials: BTreeSet<usize> = (1..=n).flat_map(|c| [map.center_tile(c), map.repair_tile(c)]).collect();
    let idle: Vec<usize> = (0..map.num_cells())
        .filter(|&c| map.tile(c) == Tile::Floor && !specials.contains(&c))
        .take(n)
        .collect();
    let mut totals = OracleTotals::default();
    while !state.is_terminal() {
        let mut cells = vec![usize::MAX; n];
        let mut taken = BTreeSet::new();
        for slot in 0..n {
            let own = slot + 1;
            let other = script.gen_range(1..=n);
            let u: f64 = script.gen();
            let want = if u < 0.6 {
                map.center_tile(own)
            } else if u < 0.75 {
                map.repair_tile(other)
            } else if u < 0.85 {
                map.center_tile(other)
            } else {
                idle[slot]
            };
            let cell = if taken.contains(&want) { idle[slot] } else { want };
            taken.insert(cell);
            cells[slot] = cell;
        }
        let mut presence = vec![Presence::default(); n];
        for (slot, &cell) in cells.iter().enumerate() {
            for c in 1..=n {
                if cell == map.center_tile(c) {
                    presence[c - 1].on_center = Some(slot + 1);
                }
                if cell == map.repair_tile(c) {
                    presence[c - 1].on_repair = Some(slot + 1);
                }
            }
        }
        let t = state.step_count();
        let got = state.step_teleport(&cells).map_err(|e| e.to_string())?;
        let want = sim.step(&presence);
        if got.events != want.events {
            return Err(format!("step {t}: engine {:?} oracle {:?}", got.events, want.events));
        }
        if got.rewards != want.rewards {
            return Err(format!("step {t}: rewards {:?} vs {:?}", got.rewards, want.rewards));
        }
        if state.units_in_flight() as usize != sim.units_in_flight() {
            return Err(format!("step {t}: in flight {} vs {}", state.units_in_flight(), sim.units_in_flight()));
        }
        totals.steps += 1;
        totals.processed += got.events.processed.len();
        totals.care += got.events.repaired.len();
        totals.self_repaired += got.events.self_repaired.len();
        totals.discarded += got.events.discarded as usize;
        totals.sank += got.events.sank as usize;
    }
    Ok(totals)
}

#[derive(Debug, Default, Clone, Copy)]
pub struct OracleTotals {
    pub steps: usize,
    pub processed: usize,
    pub care: usize,
    pub self_repaired: usize,
    pub discarded: usize,
    pub sank: usize,
}

pub fn policies(names: &[&str]) -> Vec<Box<dyn supplychain::policies::Policy>> {
    names.iter().map(|n| supplychain::policies::make_policy(n, supplychain::policies::DEFAULT_WINDOW).unwrap()).collect()
}

/// A world drawn at random for fuzzing: graph, style, spacing and parameters.
pub fn fuzz_world(rng: &mut ChaCha8Rng) -> World {
    let params = EnvParams {
        episode_length: rng.gen_range(50..400),
        spawn_prob: rng.gen_range(0.0..1.0),
        break_prob: rng.gen_range(0.0..1.0),
        repair_time: if rng.gen_bool(0.5) { RepairTime::Infinite } else { RepairTime::Finite(rng.gen_range(1..50)) },
        two_agent_repair: rng.gen_bool(0.8),
    };
    let spacing = rng.gen_range(2..6);
    match rng.gen_range(0..5) {
        0 => world(4, &[[1, 2], [2, 3], [3, 4]], LayoutStyle::Circular, spacing, params),
        1 => {
            let n = rng.gen_range(1..5);
            let edges: Vec<[usize; 2]> = (1..n).map(|c| [c, c + 1]).collect();
            world(n, &edges, LayoutStyle::Linear, spacing, params)
        }
        2 => world(4, &[[1, 2], [1, 3], [3, 4]], LayoutStyle::Branched, spacing, params),
        3 => world(4, &[[1, 2], [2, 3], [2, 4]], LayoutStyle::Branched, spacing, params),
        _ => world(4, &[[1, 2], [1, 3], [2, 4], [3, 4]], LayoutStyle::Branched, spacing, params),
    }
}

/// Runs `episodes` fuzz episodes with random policies and checks that
/// units are conserved and that the log's step records add up to its footer.
pub fn conservation_fuzz(episodes: u64, seed: u64) -> Result<(), String> {
    use supplychain::engine::run_episode;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for ep in 0..episodes {
        let world = fuzz_world(&mut rng);
        let n = world.num_centers();
        let mut pols = policies(&vec!["random"; n]);
        let log = run_episode(&world, &Assignment::identity(n), &mut pols, rng.gen()).map_err(|e| e.to_string())?;
        let f = log.footer.clone().ok_or("missing footer")?;
        if f.spawned != f.sank + f.discarded + f.in_flight {
            return Err(format!("episode {ep}: {f:?} does not balance"));
        }
        let spawned: u64 = log.steps.iter().map(|s| s.events.spawned_total() as u64).sum();
        let sank: u64 = log.steps.iter().map(|s| s.events.sank as u64).sum();
        let discarded: u64 = log.steps.iter().map(|s| s.events.discarded as u64).sum();
        if (spawned, sank, discarded) != (f.spawned, f.sank, f.discarded) {
            return Err(format!("episode {ep}: step sums {:?} vs footer {f:?}", (spawned, sank, discarded)));
        }
    }
    Ok(())
}
