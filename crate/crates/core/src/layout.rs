//! Concrete grid realizations of a [`Topology`].
//!
//! Units travel on chain cells (source, path, processing, sink); agents walk
//! on floor, center tiles and repair tiles. The two sets never overlap.
//!
//! ASCII legend used by [`TileMap::to_ascii`] and [`TileMap::from_ascii`]:
//!
//! | char | tile |
//! |------|------|
//! | `#` | wall |
//! | `.` | floor |
//! | `>` `<` `^` `v` | path cell, arrow gives the flow direction |
//! | `+` | branch path cell (two successors) |
//! | `=` | path cell without a known direction |
//! | `S` | source |
//! | `X` | sink |
//! | `1`..`9` | processing cell of center k |
//! | `a`..`i` | center tile of center k |
//! | `A`..`I` | repair tile of center k |

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::topology::Topology;

/// Highest center index a map can carry (one character per center in ASCII).
pub const MAX_CENTERS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Tile {
    Floor,
    Wall,
    Path,
    Processing(usize),
    CenterTile(usize),
    RepairTile(usize),
    Source,
    Sink,
}

impl Tile {
    /// Cells units may occupy.
    pub fn is_unit_cell(self) -> bool {
        matches!(self, Tile::Path | Tile::Processing(_) | Tile::Source | Tile::Sink)
    }

    /// Cells agents may occupy.
    pub fn is_walkable(self) -> bool {
        matches!(self, Tile::Floor | Tile::CenterTile(_) | Tile::RepairTile(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pos {
    pub x: usize,
    pub y: usize,
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutStyle {
    Circular,
    Linear,
    Branched,
}

impl std::str::FromStr for LayoutStyle {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circular" => Ok(LayoutStyle::Circular),
            "linear" => Ok(LayoutStyle::Linear),
            "branched" => Ok(LayoutStyle::Branched),
            other => Err(format!("unknown layout style `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("{style:?} layout needs a chain topology")]
    StyleTopologyMismatch { style: LayoutStyle },
    #[error("spacing {0} is too small, need at least 2")]
    SpacingTooSmall(usize),
    #[error("layouts support at most {MAX_CENTERS} centers, got {0}")]
    TooManyCenters(usize),
    #[error("branched layout cannot realize this topology: {0}")]
    Unsupported(String),
    #[error("ascii map: {0}")]
    Ascii(String),
}

/// One violated [`TileMap`] invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NoCenters,
    MissingProcessingCell(usize),
    DuplicateProcessingCell(usize),
    MissingCenterTile(usize),
    DuplicateCenterTile(usize),
    MissingRepairTile(usize),
    DuplicateRepairTile(usize),
    CenterTileNotAdjacent(usize),
    RepairTileNotAdjacent(usize),
    /// A successor points outside the chain cells.
    BadSuccessor(Pos),
    /// A non-sink chain cell without a successor.
    DeadEnd(Pos),
    /// More than one successor on something other than a path cell, or more than two.
    NotAFunction(Pos),
    FlowCycle,
    NoSource,
    NoSink,
    /// Some chain cell is not on a source-to-sink route.
    DisconnectedFlow,
    /// Center and repair tiles are not all mutually reachable on foot.
    AgentAreaDisconnected,
    NoSpawnCell(usize),
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Per-center cell indices.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CenterAnchor {
    pub processing: Option<usize>,
    pub center_tile: Option<usize>,
    pub repair_tile: Option<usize>,
}

/// A concrete 2-D map. Cells are addressed by index `y * width + x`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TileMap {
    width: usize,
    height: usize,
    tiles: Vec<Tile>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    anchors: Vec<CenterAnchor>,
    spawns: Vec<Option<usize>>,
    sources: Vec<usize>,
    sinks: Vec<usize>,
    flow_order: Vec<usize>,
    flow_acyclic: bool,
    walk_fields: Vec<Vec<u32>>,
}

pub const UNREACHABLE: u32 = u32::MAX;

impl TileMap {
    /// Assembles a map from raw tiles and flow successors. Never fails; use
    /// [`validate_tilemap`] to check the result.
    pub fn from_parts(width: usize, height: usize, tiles: Vec<Tile>, successors: Vec<Vec<usize>>) -> Self {
        assert_eq!(tiles.len(), width * height, "tile count must match dimensions");
        assert_eq!(successors.len(), tiles.len(), "successor table must match tiles");
        let mut successors = successors;
        for s in &mut successors {
            s.sort_unstable();
            s.dedup();
        }
        let mut predecessors = vec![Vec::new(); tiles.len()];
        for (cell, succ) in successors.iter().enumerate() {
            for &s in succ {
                if s < tiles.len() {
                    predecessors[s].push(cell);
                }
            }
        }

        let num_centers = tiles
            .iter()
            .filter_map(|t| match *t {
                Tile::Processing(c) | Tile::CenterTile(c) | Tile::RepairTile(c) => Some(c),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        let mut anchors = vec![CenterAnchor::default(); num_centers];
        for (cell, tile) in tiles.iter().enumerate() {
            match *tile {
                Tile::Processing(c) if c >= 1 => anchors[c - 1].processing.get_or_insert(cell),
                Tile::CenterTile(c) if c >= 1 => anchors[c - 1].center_tile.get_or_insert(cell),
                Tile::RepairTile(c) if c >= 1 => anchors[c - 1].repair_tile.get_or_insert(cell),
                _ => continue,
            };
        }
        let sources = (0..tiles.len()).filter(|&c| tiles[c] == Tile::Source).collect();
        let sinks = (0..tiles.len()).filter(|&c| tiles[c] == Tile::Sink).collect();

        let mut map = TileMap {
            width,
            height,
            tiles,
            successors,
            predecessors,
            anchors,
            spawns: Vec::new(),
            sources,
            sinks,
            flow_order: Vec::new(),
            flow_acyclic: true,
            walk_fields: Vec::new(),
        };
        map.compute_flow_order();
        map.compute_spawns();
        map.compute_walk_fields();
        map
    }

    /// Reverse topological order of the chain cells: every cell appears
    /// before its predecessors, so iterating it moves downstream units first.
    fn compute_flow_order(&mut self) {
        let chain: Vec<usize> = (0..self.tiles.len()).filter(|&c| self.tiles[c].is_unit_cell()).collect();
        let mut outdeg: Vec<usize> = self
            .successors
            .iter()
            .map(|s| s.iter().filter(|&&x| x < self.tiles.len() && self.tiles[x].is_unit_cell()).count())
            .collect();
        let mut ready: BTreeSet<usize> = chain.iter().copied().filter(|&c| outdeg[c] == 0).collect();
        let mut order = Vec::with_capacity(chain.len());
        while let Some(c) = ready.pop_first() {
            order.push(c);
            for &p in &self.predecessors[c] {
                if self.tiles[p].is_unit_cell() {
                    outdeg[p] -= 1;
                    if outdeg[p] == 0 {
                        ready.insert(p);
                    }
                }
            }
        }
        self.flow_acyclic = order.len() == chain.len();
        self.flow_order = order;
    }

    fn compute_spawns(&mut self) {
        let mut taken = BTreeSet::new();
        let mut spawns = Vec::with_capacity(self.anchors.len());
        for anchor in &self.anchors {
            let spawn = anchor.center_tile.and_then(|start| {
                let dist = self.walk_bfs(start);
                dist.iter()
                    .enumerate()
                    .filter(|&(cell, &d)| d != UNREACHABLE && self.tiles[cell] == Tile::Floor && !taken.contains(&cell))
                    .min_by_key(|&(cell, &d)| (d, cell))
                    .map(|(cell, _)| cell)
            });
            if let Some(s) = spawn {
                taken.insert(s);
            }
            spawns.push(spawn);
        }
        self.spawns = spawns;
    }

    fn compute_walk_fields(&mut self) {
        let mut fields = Vec::with_capacity(2 * self.anchors.len());
        for anchor in &self.anchors {
            for target in [anchor.center_tile, anchor.repair_tile] {
                fields.push(match target {
                    Some(t) => self.walk_bfs(t),
                    None => vec![UNREACHABLE; self.tiles.len()],
                });
            }
        }
        self.walk_fields = fields;
    }

    /// Breadth-first walking distances from `start` over agent-walkable cells.
    pub fn walk_bfs(&self, start: usize) -> Vec<u32> {
        let mut dist = vec![UNREACHABLE; self.tiles.len()];
        if !self.tiles[start].is_walkable() {
            return dist;
        }
        dist[start] = 0;
        let mut queue = VecDeque::from([start]);
        while let Some(c) = queue.pop_front() {
            for n in self.neighbors(c) {
                if dist[n] == UNREACHABLE && self.tiles[n].is_walkable() {
                    dist[n] = dist[c] + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Orthogonal neighbours in up, down, left, right order.
    pub fn neighbors(&self, cell: usize) -> impl Iterator<Item = usize> + '_ {
        let Pos { x, y } = self.pos(cell);
        let w = self.width;
        let h = self.height;
        [
            (y > 0).then(|| cell - w),
            (y + 1 < h).then(|| cell + w),
            (x > 0).then(|| cell - 1),
            (x + 1 < w).then(|| cell + 1),
        ]
        .into_iter()
        .flatten()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_cells(&self) -> usize {
        self.tiles.len()
    }

    pub fn num_centers(&self) -> usize {
        self.anchors.len()
    }

    pub fn tile(&self, cell: usize) -> Tile {
        self.tiles[cell]
    }

    pub fn tiles(&self) -> &[Tile] {
        &self.tiles
    }

    pub fn pos(&self, cell: usize) -> Pos {
        Pos { x: cell % self.width, y: cell / self.width }
    }

    pub fn cell(&self, pos: Pos) -> usize {
        pos.y * self.width + pos.x
    }

    /// Cell at `pos + (dx, dy)` if it lies on the map.
    pub fn offset(&self, cell: usize, dx: isize, dy: isize) -> Option<usize> {
        let p = self.pos(cell);
        let x = p.x as isize + dx;
        let y = p.y as isize + dy;
        (x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height)
            .then(|| y as usize * self.width + x as usize)
    }

    pub fn successors(&self, cell: usize) -> &[usize] {
        &self.successors[cell]
    }

    pub fn predecessors(&self, cell: usize) -> &[usize] {
        &self.predecessors[cell]
    }

    pub fn anchor(&self, center: usize) -> CenterAnchor {
        self.anchors[center - 1]
    }

    /// Processing cell of `center`. Panics on maps that fail validation.
    pub fn processing_cell(&self, center: usize) -> usize {
        self.anchors[center - 1].processing.expect("validated map")
    }

    pub fn center_tile(&self, center: usize) -> usize {
        self.anchors[center - 1].center_tile.expect("validated map")
    }

    pub fn repair_tile(&self, center: usize) -> usize {
        self.anchors[center - 1].repair_tile.expect("validated map")
    }

    /// Floor cell where the agent assigned to `center` starts.
    pub fn spawn_cell(&self, center: usize) -> usize {
        self.spawns[center - 1].expect("validated map")
    }

    pub fn source_cells(&self) -> &[usize] {
        &self.sources
    }

    pub fn sink_cells(&self) -> &[usize] {
        &self.sinks
    }

    /// Chain cells, downstream first.
    pub fn flow_order(&self) -> &[usize] {
        &self.flow_order
    }

    /// Static walking distance from every cell to the center tile of `center`.
    pub fn dist_to_center_tile(&self, center: usize) -> &[u32] {
        &self.walk_fields[2 * (center - 1)]
    }

    /// Static walking distance from every cell to the repair tile of `center`.
    pub fn dist_to_repair_tile(&self, center: usize) -> &[u32] {
        &self.walk_fields[2 * (center - 1) + 1]
    }

    /// Center-level edges realized by the chain cells, sorted.
    pub fn derived_edges(&self) -> Vec<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for center in 1..=self.num_centers() {
            let Some(start) = self.anchors[center - 1].processing else { continue };
            for reached in self.next_processing(start) {
                edges.insert((center, reached));
            }
        }
        edges.into_iter().collect()
    }

    /// Centers whose processing cell is the first one met from some source.
    pub fn derived_source_centers(&self) -> Vec<usize> {
        let mut out = BTreeSet::new();
        for &s in &self.sources {
            if let Tile::Processing(c) = self.tiles[s] {
                out.insert(c);
            }
            out.extend(self.next_processing(s));
        }
        out.into_iter().collect()
    }

    fn next_processing(&self, start: usize) -> BTreeSet<usize> {
        let mut found = BTreeSet::new();
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<usize> = self.successors[start].iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if c >= self.tiles.len() || !seen.insert(c) {
                continue;
            }
            match self.tiles[c] {
                Tile::Processing(k) => {
                    found.insert(k);
                }
                Tile::Path => queue.extend(self.successors[c].iter().copied()),
                _ => {}
            }
        }
        found
    }

    /// SHA-256 of the ASCII rendering, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_ascii().as_bytes()))
    }

    pub fn tile_char(&self, cell: usize) -> char {
        match self.tiles[cell] {
            Tile::Wall => '#',
            Tile::Floor => '.',
            Tile::Source => 'S',
            Tile::Sink => 'X',
            Tile::Processing(c) => char::from_digit(c as u32, 10).unwrap_or('?'),
            Tile::CenterTile(c) => center_letter(c, b'a'),
            Tile::RepairTile(c) => center_letter(c, b'A'),
            Tile::Path => match self.successors[cell].as_slice() {
                [] => '=',
                [next] => {
                    let (a, b) = (self.pos(cell), self.pos(*next));
                    if b.x == a.x + 1 && b.y == a.y {
                        '>'
                    } else if b.x + 1 == a.x && b.y == a.y {
                        '<'
                    } else if b.y + 1 == a.y && b.x == a.x {
                        '^'
                    } else if b.y == a.y + 1 && b.x == a.x {
                        'v'
                    } else {
                        '='
                    }
                }
                _ => '+',
            },
        }
    }

    /// One line per row, legend in the module docs.
    pub fn to_ascii(&self) -> String {
        let mut out = String::with_capacity((self.width + 1) * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(self.tile_char(y * self.width + x));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the ASCII format. Flow through non-arrow chain cells is
    /// inferred: their successors are the adjacent chain cells that are
    /// neither sources nor already flowing into them.
    pub fn from_ascii(text: &str) -> Result<TileMap, LayoutError> {
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let height = rows.len();
        if height == 0 {
            return Err(LayoutError::Ascii("empty map".into()));
        }
        let width = rows[0].chars().count();
        let mut tiles = Vec::with_capacity(width * height);
        let mut arrows: BTreeMap<usize, (isize, isize)> = BTreeMap::new();
        let mut branch_cells = BTreeSet::new();
        for (y, row) in rows.iter().enumerate() {
            let chars: Vec<char> = row.chars().collect();
            if chars.len() != width {
                return Err(LayoutError::Ascii(format!("row {y} has {} columns, expected {width}", chars.len())));
            }
            for (x, ch) in chars.into_iter().enumerate() {
                let cell = y * width + x;
                let tile = match ch {
                    '#' => Tile::Wall,
                    '.' | ' ' => Tile::Floor,
                    'S' => Tile::Source,
                    'X' => Tile::Sink,
                    '=' => Tile::Path,
                    '+' => {
                        branch_cells.insert(cell);
                        Tile::Path
                    }
                    '>' | '<' | '^' | 'v' => {
                        let d = match ch {
                            '>' => (1, 0),
                            '<' => (-1, 0),
                            '^' => (0, -1),
                            _ => (0, 1),
                        };
                        arrows.insert(cell, d);
                        Tile::Path
                    }
                    '1'..='9' => Tile::Processing(ch as usize - '0' as usize),
                    'a'..='i' => Tile::CenterTile(ch as usize - 'a' as usize + 1),
                    'A'..='I' => Tile::RepairTile(ch as usize - 'A' as usize + 1),
                    other => {
                        return Err(LayoutError::Ascii(format!("unknown tile `{other}` at ({x}, {y})")));
                    }
                };
                tiles.push(tile);
            }
        }

        let probe = TileMap {
            width,
            height,
            tiles: tiles.clone(),
            successors: vec![Vec::new(); tiles.len()],
            predecessors: vec![Vec::new(); tiles.len()],
            anchors: Vec::new(),
            spawns: Vec::new(),
            sources: Vec::new(),
            sinks: Vec::new(),
            flow_order: Vec::new(),
            flow_acyclic: true,
            walk_fields: Vec::new(),
        };

        let mut successors: Vec<Option<Vec<usize>>> = vec![None; tiles.len()];
        for (&cell, &(dx, dy)) in &arrows {
            successors[cell] = Some(probe.offset(cell, dx, dy).into_iter().collect());
        }
        for cell in 0..tiles.len() {
            if tiles[cell] == Tile::Sink {
                successors[cell] = Some(Vec::new());
            }
        }

        let points_into = |succ: &[Option<Vec<usize>>], from: usize, to: usize| {
            succ[from].as_ref().is_some_and(|s| s.contains(&to))
        };

        let mut queue: VecDeque<usize> = (0..tiles.len()).filter(|&c| tiles[c] == Tile::Source).collect();
        let mut seen = BTreeSet::new();
        let mut pending: Vec<usize> = (0..tiles.len()).filter(|&c| tiles[c].is_unit_cell()).collect();
        loop {
            while let Some(cell) = queue.pop_front() {
                if !seen.insert(cell) {
                    continue;
                }
                if successors[cell].is_none() {
                    let mut candidates: Vec<usize> = probe
                        .neighbors(cell)
                        .filter(|&n| tiles[n].is_unit_cell() && tiles[n] != Tile::Source)
                        .filter(|&n| !points_into(&successors, n, cell))
                        .collect();
                    if !branch_cells.contains(&cell) && candidates.len() > 1 {
                        // Prefer cells nothing else flows into yet.
                        let fresh: Vec<usize> = candidates
                            .iter()
                            .copied()
                            .filter(|&n| !probe.neighbors(n).any(|m| m != cell && points_into(&successors, m, n)))
                            .collect();
                        if !fresh.is_empty() {
                            candidates = fresh;
                        }
                    }
                    successors[cell] = Some(candidates);
                }
                if let Some(next) = successors[cell].clone() {
                    queue.extend(next.into_iter().filter(|&n| n < tiles.len() && tiles[n].is_unit_cell()));
                }
            }
            pending.retain(|c| !seen.contains(c));
            match pending.first() {
                Some(&c) => queue.push_back(c),
                None => break,
            }
        }

        let successors = successors.into_iter().map(Option::unwrap_or_default).collect();
        Ok(TileMap::from_parts(width, height, tiles, successors))
    }
}

fn center_letter(c: usize, base: u8) -> char {
    if (1..=MAX_CENTERS).contains(&c) {
        (base + (c as u8 - 1)) as char
    } else {
        '?'
    }
}

/// Lists every violated map invariant; empty when the map is valid.
pub fn validate_tilemap(m: &TileMap) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let n = m.num_centers();
    if n == 0 {
        out.push(Diagnostic::NoCenters);
    }

    for c in 1..=n {
        let count = |pred: &dyn Fn(Tile) -> bool| m.tiles.iter().filter(|&&t| pred(t)).count();
        let procs = count(&|t| t == Tile::Processing(c));
        let cts = count(&|t| t == Tile::CenterTile(c));
        let reps = count(&|t| t == Tile::RepairTile(c));
        match procs {
            0 => out.push(Diagnostic::MissingProcessingCell(c)),
            1 => {}
            _ => out.push(Diagnostic::DuplicateProcessingCell(c)),
        }
        match cts {
            0 => out.push(Diagnostic::MissingCenterTile(c)),
            1 => {}
            _ => out.push(Diagnostic::DuplicateCenterTile(c)),
        }
        match reps {
            0 => out.push(Diagnostic::MissingRepairTile(c)),
            1 => {}
            _ => out.push(Diagnostic::DuplicateRepairTile(c)),
        }
        let a = m.anchors[c - 1];
        if let (Some(p), Some(ct)) = (a.processing, a.center_tile) {
            if !m.neighbors(p).any(|x| x == ct) {
                out.push(Diagnostic::CenterTileNotAdjacent(c));
            }
        }
        if let (Some(ct), Some(rt)) = (a.center_tile, a.repair_tile) {
            if !m.neighbors(ct).any(|x| x == rt) {
                out.push(Diagnostic::RepairTileNotAdjacent(c));
            }
        }
    }

    let mut flow_ok = true;
    for cell in 0..m.num_cells() {
        let tile = m.tiles[cell];
        let succ = &m.successors[cell];
        if !tile.is_unit_cell() {
            if !succ.is_empty() {
                out.push(Diagnostic::BadSuccessor(m.pos(cell)));
                flow_ok = false;
            }
            continue;
        }
        for &s in succ {
            let adjacent = s < m.num_cells() && m.neighbors(cell).any(|x| x == s);
            if !adjacent || !m.tiles[s].is_unit_cell() || m.tiles[s] == Tile::Source {
                out.push(Diagnostic::BadSuccessor(m.pos(cell)));
                flow_ok = false;
            }
        }
        match (tile, succ.len()) {
            (Tile::Sink, 0) => {}
            (Tile::Sink, _) => {
                out.push(Diagnostic::NotAFunction(m.pos(cell)));
                flow_ok = false;
            }
            (_, 0) => {
                out.push(Diagnostic::DeadEnd(m.pos(cell)));
                flow_ok = false;
            }
            (_, 1) => {}
            (Tile::Path, 2) => {}
            _ => {
                out.push(Diagnostic::NotAFunction(m.pos(cell)));
                flow_ok = false;
            }
        }
    }
    if !m.flow_acyclic {
        out.push(Diagnostic::FlowCycle);
        flow_ok = false;
    }
    if m.sources.is_empty() {
        out.push(Diagnostic::NoSource);
    }
    if m.sinks.is_empty() {
        out.push(Diagnostic::NoSink);
    }

    // Forward reachability from sources and backward from sinks must cover
    // every chain cell.
    let chain: Vec<usize> = (0..m.num_cells()).filter(|&c| m.tiles[c].is_unit_cell()).collect();
    let reach = |starts: &[usize], forward: bool| {
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<usize> = starts.iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if c >= m.num_cells() || !seen.insert(c) {
                continue;
            }
            let next = if forward { &m.successors[c] } else { &m.predecessors[c] };
            queue.extend(next.iter().copied());
        }
        seen
    };
    let from_sources = reach(&m.sources, true);
    let to_sinks = reach(&m.sinks, false);
    let disconnected = if flow_ok {
        !m.sources.is_empty()
            && !m.sinks.is_empty()
            && chain.iter().any(|c| !from_sources.contains(c) || !to_sinks.contains(c))
    } else {
        chain.iter().any(|c| !from_sources.contains(c))
    };
    if disconnected {
        out.push(Diagnostic::DisconnectedFlow);
    }

    let targets: Vec<usize> = m
        .anchors
        .iter()
        .flat_map(|a| [a.center_tile, a.repair_tile])
        .flatten()
        .collect();
    if let Some(&first) = targets.first() {
        let dist = m.walk_bfs(first);
        if targets.iter().any(|&t| dist[t] == UNREACHABLE) {
            out.push(Diagnostic::AgentAreaDisconnected);
        }
    }
    for c in 1..=n {
        if m.anchors[c - 1].center_tile.is_some() && m.spawns[c - 1].is_none() {
            out.push(Diagnostic::NoSpawnCell(c));
        }
    }
    out
}

/// Builds the canonical map for `topology` in the given style.
///
/// `spacing` is the column distance between consecutive processing cells
/// for the linear and branched styles; the circular style has fixed
/// geometry and ignores it.
pub fn generate_layout(t: &Topology, style: LayoutStyle, spacing: usize) -> Result<TileMap, LayoutError> {
    if t.num_centers() > MAX_CENTERS {
        return Err(LayoutError::TooManyCenters(t.num_centers()));
    }
    let map = match style {
        LayoutStyle::Circular => {
            if !t.is_chain() {
                return Err(LayoutError::StyleTopologyMismatch { style });
            }
            circular(t.num_centers())
        }
        LayoutStyle::Linear => {
            if !t.is_chain() {
                return Err(LayoutError::StyleTopologyMismatch { style });
            }
            if spacing < 2 {
                return Err(LayoutError::SpacingTooSmall(spacing));
            }
            lanes(t, spacing)?
        }
        LayoutStyle::Branched => {
            if spacing < 2 {
                return Err(LayoutError::SpacingTooSmall(spacing));
            }
            lanes(t, spacing)?
        }
    };
    let problems = validate_tilemap(&map);
    if !problems.is_empty() {
        return Err(LayoutError::Unsupported(format!("generated map is invalid: {problems:?}")));
    }
    Ok(map)
}

struct Canvas {
    width: usize,
    height: usize,
    tiles: Vec<Tile>,
    successors: Vec<Vec<usize>>,
}

impl Canvas {
    fn new(width: usize, height: usize) -> Self {
        let mut tiles = vec![Tile::Floor; width * height];
        for y in 0..height {
            for x in 0..width {
                if x == 0 || y == 0 || x + 1 == width || y + 1 == height {
                    tiles[y * width + x] = Tile::Wall;
                }
            }
        }
        Canvas { width, height, tiles, successors: vec![Vec::new(); width * height] }
    }

    fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    fn put(&mut self, x: usize, y: usize, tile: Tile) -> Result<usize, LayoutError> {
        let i = self.idx(x, y);
        if self.tiles[i] != Tile::Floor {
            return Err(LayoutError::Unsupported(format!(
                "cell ({x}, {y}) needed twice ({:?} vs {tile:?})",
                self.tiles[i]
            )));
        }
        self.tiles[i] = tile;
        Ok(i)
    }

    fn link(&mut self, from: usize, to: usize) {
        self.successors[from].push(to);
    }

    fn finish(self) -> TileMap {
        TileMap::from_parts(self.width, self.height, self.tiles, self.successors)
    }
}

/// Square ring, flowing clockwise from a source in the top-left corner to
/// a sink just below it. Centers sit on the sides with their tiles facing
/// the enclosed floor.
fn circular(n: usize) -> TileMap {
    let per_side = n.div_ceil(4).max(1);
    let side = 8 * per_side + 1;
    let mut canvas = Canvas::new(side + 2, side + 2);

    let mut ring = Vec::with_capacity(4 * side - 4);
    for x in 1..=side {
        ring.push((x, 1));
    }
    for y in 2..=side {
        ring.push((side, y));
    }
    for x in (1..side).rev() {
        ring.push((x, side));
    }
    for y in (2..side).rev() {
        ring.push((1, y));
    }

    // (processing, center tile, repair tile) positions per center.
    let mut stations = BTreeMap::new();
    for k in 0..n {
        let side_idx = k / per_side;
        let offset = (k % per_side + 1) * (side - 1) / (per_side + 1);
        let (p, ct, rt) = match side_idx {
            0 => ((1 + offset, 1), (1 + offset, 2), (1 + offset, 3)),
            1 => ((side, 1 + offset), (side - 1, 1 + offset), (side - 2, 1 + offset)),
            2 => ((side - offset, side), (side - offset, side - 1), (side - offset, side - 2)),
            _ => ((1, side - offset), (2, side - offset), (3, side - offset)),
        };
        stations.insert(p, (k + 1, ct, rt));
    }

    let last = ring.len() - 1;
    let mut cells = Vec::with_capacity(ring.len());
    for (i, &(x, y)) in ring.iter().enumerate() {
        let tile = if i == 0 {
            Tile::Source
        } else if i == last {
            Tile::Sink
        } else if let Some(&(c, _, _)) = stations.get(&(x, y)) {
            Tile::Processing(c)
        } else {
            Tile::Path
        };
        cells.push(canvas.put(x, y, tile).expect("ring cells are distinct"));
    }
    for w in cells.windows(2) {
        canvas.link(w[0], w[1]);
    }
    for (&_, &(c, ct, rt)) in &stations {
        canvas.put(ct.0, ct.1, Tile::CenterTile(c)).expect("center tiles inside ring");
        canvas.put(rt.0, rt.1, Tile::RepairTile(c)).expect("repair tiles inside ring");
    }
    canvas.finish()
}

/// Lane layout used by the linear and branched styles.
///
/// Each lane is a horizontal chain row. Lane 0 keeps its center and repair
/// tiles above the chain; lower lanes keep theirs below. A center's column
/// is fixed by its depth, `1 + (depth + 1) * spacing`. The first new
/// successor of a center continues its lane; a second one branches into a
/// new lane through a vertical connector from the branch cell right after
/// the processing cell. Edges into an already placed center are routed
/// along the row and then vertically into the cell just before it.
fn lanes(t: &Topology, spacing: usize) -> Result<TileMap, LayoutError> {
    let n = t.num_centers();
    let mut depth = vec![0usize; n + 1];
    for &c in t.topological_order() {
        for &p in t.predecessors(c) {
            depth[c] = depth[c].max(depth[p] + 1);
        }
    }
    let px = |c: usize| 1 + (depth[c] + 1) * spacing;

    #[derive(Clone, Copy, PartialEq)]
    enum Route {
        Continue,
        BranchOut,
        Merge,
    }

    let mut lane_of = vec![usize::MAX; n + 1];
    let mut lane_tail: Vec<usize> = Vec::new();
    let mut routes: Vec<(usize, usize, Route)> = Vec::new();
    for &c in t.topological_order() {
        if lane_of[c] == usize::MAX {
            lane_of[c] = lane_tail.len();
            lane_tail.push(c);
        }
        for &s in t.successors(c) {
            if lane_of[s] == usize::MAX {
                if lane_tail[lane_of[c]] == c {
                    lane_of[s] = lane_of[c];
                    lane_tail[lane_of[c]] = s;
                    routes.push((c, s, Route::Continue));
                } else {
                    lane_of[s] = lane_tail.len();
                    lane_tail.push(s);
                    routes.push((c, s, Route::BranchOut));
                }
            } else {
                if lane_of[s] == lane_of[c] {
                    return Err(LayoutError::Unsupported(format!("edge {c} -> {s} skips along its own lane")));
                }
                routes.push((c, s, Route::Merge));
            }
        }
        if t.successors(c).len() > 2 {
            return Err(LayoutError::Unsupported(format!("center {c} has more than two successors")));
        }
    }

    let num_lanes = lane_tail.len();
    let lane_row = |lane: usize| if lane == 0 { 4 } else { 6 + (lane - 1) * 4 };
    let facing = |lane: usize| if lane == 0 { -1isize } else { 1 };

    let max_x = (1..=n).map(|c| px(c) + 2).max().unwrap_or(3);
    let width = max_x + 3;
    let height = if num_lanes == 1 { 6 } else { lane_row(num_lanes - 1) + 5 };
    let mut canvas = Canvas::new(width, height);

    // Processing cells and their tiles first, so routing collisions show up.
    let mut proc_cell = vec![0usize; n + 1];
    for c in 1..=n {
        let lane = lane_of[c];
        let (x, y) = (px(c), lane_row(lane));
        proc_cell[c] = canvas.put(x, y, Tile::Processing(c))?;
        let f = facing(lane);
        let ct_y = (y as isize + f) as usize;
        let rt_y = (y as isize + 2 * f) as usize;
        canvas.put(x, ct_y, Tile::CenterTile(c))?;
        canvas.put(x, rt_y, Tile::RepairTile(c))?;
    }

    // Lays horizontal path cells on `y` from `x0` to `x1` inclusive and
    // links them left to right; returns the first and last cell.
    fn run(canvas: &mut Canvas, y: usize, x0: usize, x1: usize) -> Result<Option<(usize, usize)>, LayoutError> {
        if x0 > x1 {
            return Ok(None);
        }
        let mut prev: Option<usize> = None;
        let mut first = None;
        for x in x0..=x1 {
            let cell = canvas.put(x, y, Tile::Path)?;
            if let Some(p) = prev {
                canvas.link(p, cell);
            }
            first.get_or_insert(cell);
            prev = Some(cell);
        }
        Ok(Some((first.expect("non-empty"), prev.expect("non-empty"))))
    }

    // Vertical path cells at column `x` strictly between rows `from` and
    // `to`, linked in travel order; returns first and last cell.
    fn column(canvas: &mut Canvas, x: usize, from: usize, to: usize) -> Result<Option<(usize, usize)>, LayoutError> {
        let ys: Vec<usize> = if from < to { (from + 1..to).collect() } else { (to + 1..from).rev().collect() };
        let mut prev: Option<usize> = None;
        let mut first = None;
        for y in ys {
            let cell = canvas.put(x, y, Tile::Path)?;
            if let Some(p) = prev {
                canvas.link(p, cell);
            }
            first.get_or_insert(cell);
            prev = Some(cell);
        }
        Ok(first.map(|f| (f, prev.expect("non-empty"))))
    }

    // Sources.
    for &c in t.source_centers() {
        let y = lane_row(lane_of[c]);
        let src = canvas.put(1, y, Tile::Source)?;
        match run(&mut canvas, y, 2, px(c) - 1)? {
            Some((first, last)) => {
                canvas.link(src, first);
                canvas.link(last, proc_cell[c]);
            }
            None => canvas.link(src, proc_cell[c]),
        }
    }

    // Outgoing routes, grouped per center.
    for c in 1..=n {
        let y = lane_row(lane_of[c]);
        let outgoing: Vec<(usize, Route)> =
            routes.iter().filter(|r| r.0 == c).map(|&(_, s, kind)| (s, kind)).collect();
        if outgoing.is_empty() {
            let path = canvas.put(px(c) + 1, y, Tile::Path)?;
            let sink = canvas.put(px(c) + 2, y, Tile::Sink)?;
            canvas.link(proc_cell[c], path);
            canvas.link(path, sink);
            continue;
        }

        let horizontal = outgoing.iter().find(|o| o.1 == Route::Continue).copied();
        let others: Vec<(usize, Route)> = outgoing.iter().filter(|o| o.1 != Route::Continue).copied().collect();

        let mut exit = proc_cell[c];
        if others.len() == 2 || (others.len() == 1 && horizontal.is_some()) {
            // Branch cell right after the processing cell.
            let branch = canvas.put(px(c) + 1, y, Tile::Path)?;
            canvas.link(proc_cell[c], branch);
            exit = branch;
            if others.len() == 2 {
                return Err(LayoutError::Unsupported(format!(
                    "center {c} needs two vertical connectors"
                )));
            }
            let (s, kind) = others[0];
            let ys = lane_row(lane_of[s]);
            let bx = px(c) + 1;
            if kind == Route::Merge {
                return Err(LayoutError::Unsupported(format!(
                    "center {c} branches into an already placed center {s}"
                )));
            }
            let corner = canvas.put(bx, ys, Tile::Path)?;
            match column(&mut canvas, bx, y, ys)? {
                Some((first, last)) => {
                    canvas.link(branch, first);
                    canvas.link(last, corner);
                }
                None => canvas.link(branch, corner),
            }
            match run(&mut canvas, ys, bx + 1, px(s) - 1)? {
                Some((first, last)) => {
                    canvas.link(corner, first);
                    canvas.link(last, proc_cell[s]);
                }
                None => canvas.link(corner, proc_cell[s]),
            }
        }

        if let Some((s, _)) = horizontal {
            let start = if exit == proc_cell[c] { px(c) + 1 } else { px(c) + 2 };
            match run(&mut canvas, y, start, px(s) - 1)? {
                Some((first, last)) => {
                    canvas.link(exit, first);
                    canvas.link(last, proc_cell[s]);
                }
                None => canvas.link(exit, proc_cell[s]),
            }
        } else if let [(s, Route::Merge)] = others.as_slice() {
            // Along the row to the column before `s`, then vertically into
            // the merge cell on the lane of `s`.
            let s = *s;
            let mx = px(s) - 1;
            let ys = lane_row(lane_of[s]);
            let (first, corner) = run(&mut canvas, y, px(c) + 1, mx)?
                .ok_or_else(|| LayoutError::Unsupported(format!("no room to route {c} -> {s}")))?;
            canvas.link(exit, first);
            let merge_cell = canvas.idx(mx, ys);
            match column(&mut canvas, mx, y, ys)? {
                Some((vfirst, vlast)) => {
                    canvas.link(corner, vfirst);
                    canvas.link(vlast, merge_cell);
                }
                None => canvas.link(corner, merge_cell),
            }
        } else if let [(s, Route::BranchOut)] = others.as_slice() {
            return Err(LayoutError::Unsupported(format!("center {c} branches to {s} without continuing its lane")));
        }
    }

    let map = canvas.finish();
    // Merge targets must have become path cells with two predecessors.
    for &(c, s, kind) in &routes {
        if kind == Route::Merge {
            let merge_cell = map.cell(Pos { x: px(s) - 1, y: lane_row(lane_of[s]) });
            if map.tile(merge_cell) != Tile::Path {
                return Err(LayoutError::Unsupported(format!("merge {c} -> {s} has no landing cell")));
            }
        }
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain4() -> Topology {
        Topology::chain(4).unwrap()
    }

    fn processing_columns(m: &TileMap) -> Vec<usize> {
        (1..=m.num_centers()).map(|c| m.pos(m.processing_cell(c)).x).collect()
    }

    #[test]
    fn linear_spacing_sets_processing_distance() {
        for d in [2, 5, 7] {
            let m = generate_layout(&chain4(), LayoutStyle::Linear, d).unwrap();
            let xs = processing_columns(&m);
            for w in xs.windows(2) {
                assert_eq!(w[1] - w[0], d);
            }
            assert!(validate_tilemap(&m).is_empty());
            assert_eq!(m.derived_edges(), vec![(1, 2), (2, 3), (3, 4)]);
        }
    }

    #[test]
    fn linear_route_length_grows_with_spacing() {
        for d in 2..=7 {
            let m = generate_layout(&chain4(), LayoutStyle::Linear, d).unwrap();
            let mut cell = m.source_cells()[0];
            let mut hops = 0;
            while m.tile(cell) != Tile::Sink {
                cell = m.successors(cell)[0];
                hops += 1;
            }
            assert_eq!(hops, 4 * d + 2);
        }
    }

    #[test]
    fn circular_ring_has_adjacent_source_and_sink() {
        let m = generate_layout(&chain4(), LayoutStyle::Circular, 99).unwrap();
        assert!(validate_tilemap(&m).is_empty());
        let src = m.source_cells()[0];
        let sink = m.sink_cells()[0];
        assert!(m.neighbors(src).any(|c| c == sink));
        assert_eq!(m.num_centers(), 4);
        assert_eq!(m.derived_edges(), vec![(1, 2), (2, 3), (3, 4)]);
        assert_eq!(m.derived_source_centers(), vec![1]);
    }

    #[test]
    fn style_and_spacing_errors() {
        let branchy = Topology::new(4, &[(1, 2), (1, 3), (3, 4)]).unwrap();
        assert_eq!(
            generate_layout(&branchy, LayoutStyle::Circular, 3).unwrap_err(),
            LayoutError::StyleTopologyMismatch { style: LayoutStyle::Circular }
        );
        assert_eq!(
            generate_layout(&branchy, LayoutStyle::Linear, 3).unwrap_err(),
            LayoutError::StyleTopologyMismatch { style: LayoutStyle::Linear }
        );
        assert_eq!(
            generate_layout(&chain4(), LayoutStyle::Linear, 1).unwrap_err(),
            LayoutError::SpacingTooSmall(1)
        );
    }

    #[test]
    fn branched_realizes_all_three_junction_graphs() {
        let graphs: [&[(usize, usize)]; 3] = [
            &[(1, 2), (1, 3), (3, 4)],
            &[(1, 2), (2, 3), (2, 4)],
            &[(1, 2), (1, 3), (2, 4), (3, 4)],
        ];
        for edges in graphs {
            let t = Topology::new(4, edges).unwrap();
            for d in 2..=6 {
                let m = generate_layout(&t, LayoutStyle::Branched, d)
                    .unwrap_or_else(|e| panic!("{edges:?} d={d}: {e}"));
                assert!(validate_tilemap(&m).is_empty());
                assert_eq!(m.derived_edges(), t.edges().to_vec(), "{edges:?}");
                assert_eq!(m.derived_source_centers(), t.source_centers().to_vec());
            }
        }
    }

    #[test]
    fn ascii_roundtrip() {
        let maps = [
            generate_layout(&chain4(), LayoutStyle::Circular, 2).unwrap(),
            generate_layout(&chain4(), LayoutStyle::Linear, 3).unwrap(),
            generate_layout(&Topology::new(4, &[(1, 2), (1, 3), (2, 4), (3, 4)]).unwrap(), LayoutStyle::Branched, 2)
                .unwrap(),
        ];
        for m in maps {
            let back = TileMap::from_ascii(&m.to_ascii()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_layout(&chain4(), LayoutStyle::Linear, 4).unwrap();
        let b = generate_layout(&chain4(), LayoutStyle::Linear, 4).unwrap();
        assert_eq!(a.to_ascii(), b.to_ascii());
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn missing_repair_tile_is_reported() {
        let text = "\
#######
#..A.B#
#..a.b#
#S>1>2X
#######
";
        let m = TileMap::from_ascii(text).unwrap();
        assert!(validate_tilemap(&m).is_empty(), "{:?}", validate_tilemap(&m));
        let broken = text.replace('B', ".");
        let m = TileMap::from_ascii(&broken).unwrap();
        let diags = validate_tilemap(&m);
        assert!(diags.contains(&Diagnostic::MissingRepairTile(2)), "{diags:?}");
    }

    #[test]
    fn disconnected_chain_is_reported() {
        let text = "\
########
#..A..B#
#..a..b#
#S>1.>2X
########
";
        let m = TileMap::from_ascii(text).unwrap();
        let diags = validate_tilemap(&m);
        assert!(diags.contains(&Diagnostic::DisconnectedFlow), "{diags:?}");
    }

    #[test]
    fn spawn_cells_are_distinct_floor_cells() {
        let m = generate_layout(&chain4(), LayoutStyle::Circular, 2).unwrap();
        let spawns: BTreeSet<usize> = (1..=4).map(|c| m.spawn_cell(c)).collect();
        assert_eq!(spawns.len(), 4);
        assert!(spawns.iter().all(|&s| m.tile(s) == Tile::Floor));
    }
}
