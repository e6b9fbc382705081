//! Abstract supply-chain graphs.
//!
//! A [`Topology`] is a directed acyclic graph over processing centers,
//! numbered from 1. Units enter at centers without incoming edges (fed by a
//! source tile) and leave after centers without outgoing edges (draining to
//! a sink tile). The source and sink hops are attributes of those centers,
//! not graph edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TopologyError {
    #[error("center {0} is outside 1..={1}")]
    InvalidCenter(usize, usize),
    #[error("topology needs at least one center")]
    Empty,
    #[error("self-loop at center {0}")]
    SelfLoop(usize),
    #[error("duplicate edge {0} -> {1}")]
    DuplicateEdge(usize, usize),
    #[error("cycle detected through center {0}")]
    CycleDetected(usize),
    #[error("center {0} is not connected to the supply chain")]
    UnreachableCenter(usize),
    #[error("cost-sharing needs a tree: center {0} has more than one upstream neighbour")]
    NotATree(usize),
    #[error("negative cost {cost} on edge {edge:?}")]
    NegativeCost { edge: CostEdge, cost: f64 },
    #[error("cost given for {0:?}, which is not an edge of the topology")]
    UnknownEdge(CostEdge),
}

/// Validated supply-chain graph. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "TopologySpec", into = "TopologySpec")]
pub struct Topology {
    num_centers: usize,
    edges: Vec<(usize, usize)>,
    successors: Vec<Vec<usize>>,
    predecessors: Vec<Vec<usize>>,
    sources: Vec<usize>,
    sinks: Vec<usize>,
    topo_order: Vec<usize>,
}

/// Serialized form: `num_centers = 4`, `edges = [[1,2],[2,3],[3,4]]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopologySpec {
    pub num_centers: usize,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

impl TryFrom<TopologySpec> for Topology {
    type Error = TopologyError;

    fn try_from(spec: TopologySpec) -> Result<Self, Self::Error> {
        let edges: Vec<(usize, usize)> = spec.edges.iter().map(|e| (e[0], e[1])).collect();
        Topology::new(spec.num_centers, &edges)
    }
}

impl From<Topology> for TopologySpec {
    fn from(t: Topology) -> Self {
        TopologySpec {
            num_centers: t.num_centers,
            edges: t.edges.iter().map(|&(a, b)| [a, b]).collect(),
        }
    }
}

/// An edge of the cost-tree game: either the implicit hop from a source
/// tile into a source center, or a link between two centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CostEdge {
    Source(usize),
    Link(usize, usize),
}

impl CostEdge {
    /// The center at the downstream end of the edge.
    pub fn head(self) -> usize {
        match self {
            CostEdge::Source(c) => c,
            CostEdge::Link(_, b) => b,
        }
    }
}

impl Topology {
    /// Builds and validates a topology with centers `1..=num_centers`.
    ///
    /// A single center without edges is accepted as the degenerate chain.
    /// With more than one center, a center touching no edge is rejected.
    pub fn new(num_centers: usize, edges: &[(usize, usize)]) -> Result<Self, TopologyError> {
        if num_centers == 0 {
            return Err(TopologyError::Empty);
        }
        let mut successors = vec![Vec::new(); num_centers];
        let mut predecessors = vec![Vec::new(); num_centers];
        let mut seen = BTreeSet::new();
        for &(a, b) in edges {
            for c in [a, b] {
                if c == 0 || c > num_centers {
                    return Err(TopologyError::InvalidCenter(c, num_centers));
                }
            }
            if a == b {
                return Err(TopologyError::SelfLoop(a));
            }
            if !seen.insert((a, b)) {
                return Err(TopologyError::DuplicateEdge(a, b));
            }
            successors[a - 1].push(b);
            predecessors[b - 1].push(a);
        }
        for list in successors.iter_mut().chain(predecessors.iter_mut()) {
            list.sort_unstable();
        }

        // Kahn's algorithm, smallest index first so the order is canonical.
        let mut indegree: Vec<usize> = predecessors.iter().map(Vec::len).collect();
        let mut ready: BTreeSet<usize> = (1..=num_centers).filter(|&c| indegree[c - 1] == 0).collect();
        let mut topo_order = Vec::with_capacity(num_centers);
        while let Some(c) = ready.pop_first() {
            topo_order.push(c);
            for &s in &successors[c - 1] {
                indegree[s - 1] -= 1;
                if indegree[s - 1] == 0 {
                    ready.insert(s);
                }
            }
        }
        if topo_order.len() < num_centers {
            let stuck = (1..=num_centers).find(|&c| indegree[c - 1] > 0).unwrap_or(1);
            return Err(TopologyError::CycleDetected(stuck));
        }

        if num_centers > 1 {
            if let Some(c) = (1..=num_centers)
                .find(|&c| successors[c - 1].is_empty() && predecessors[c - 1].is_empty())
            {
                return Err(TopologyError::UnreachableCenter(c));
            }
        }

        let sources = (1..=num_centers).filter(|&c| predecessors[c - 1].is_empty()).collect();
        let sinks = (1..=num_centers).filter(|&c| successors[c - 1].is_empty()).collect();
        let mut edges = edges.to_vec();
        edges.sort_unstable();

        Ok(Topology {
            num_centers,
            edges,
            successors,
            predecessors,
            sources,
            sinks,
            topo_order,
        })
    }

    /// The linear chain `1 -> 2 -> ... -> n`.
    pub fn chain(n: usize) -> Result<Self, TopologyError> {
        let edges: Vec<_> = (1..n).map(|i| (i, i + 1)).collect();
        Topology::new(n, &edges)
    }

    pub fn num_centers(&self) -> usize {
        self.num_centers
    }

    /// Edges in sorted order.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Centers fed directly by a source tile.
    pub fn source_centers(&self) -> &[usize] {
        &self.sources
    }

    /// Centers draining directly to a sink tile.
    pub fn sink_centers(&self) -> &[usize] {
        &self.sinks
    }

    pub fn successors(&self, center: usize) -> &[usize] {
        &self.successors[center - 1]
    }

    pub fn predecessors(&self, center: usize) -> &[usize] {
        &self.predecessors[center - 1]
    }

    /// Centers in topological order, ties broken by index.
    pub fn topological_order(&self) -> &[usize] {
        &self.topo_order
    }

    pub fn is_chain(&self) -> bool {
        self.sources.len() == 1
            && self.successors.iter().all(|s| s.len() <= 1)
            && self.predecessors.iter().all(|p| p.len() <= 1)
    }

    /// True when every center has at most one upstream neighbour.
    pub fn is_forest(&self) -> bool {
        self.predecessors.iter().all(|p| p.len() <= 1)
    }

    fn check_center(&self, c: usize) -> Result<(), TopologyError> {
        if c == 0 || c > self.num_centers {
            Err(TopologyError::InvalidCenter(c, self.num_centers))
        } else {
            Ok(())
        }
    }

    fn reach(&self, start: usize, forward: bool) -> BTreeSet<usize> {
        let adj = if forward { &self.successors } else { &self.predecessors };
        let mut out = BTreeSet::new();
        let mut queue: VecDeque<usize> = adj[start - 1].iter().copied().collect();
        while let Some(c) = queue.pop_front() {
            if out.insert(c) {
                queue.extend(adj[c - 1].iter().copied());
            }
        }
        out
    }

    /// All centers with a directed path into `center`, excluding itself.
    pub fn upstream_set(&self, center: usize) -> Result<BTreeSet<usize>, TopologyError> {
        self.check_center(center)?;
        Ok(self.reach(center, false))
    }

    /// All centers reachable from `center`, excluding itself.
    pub fn downstream_set(&self, center: usize) -> Result<BTreeSet<usize>, TopologyError> {
        self.check_center(center)?;
        Ok(self.reach(center, true))
    }

    /// Every cost-bearing edge: one source hop per source center plus the links.
    pub fn cost_edges(&self) -> Vec<CostEdge> {
        self.sources
            .iter()
            .map(|&s| CostEdge::Source(s))
            .chain(self.edges.iter().map(|&(a, b)| CostEdge::Link(a, b)))
            .collect()
    }

    /// Equal-split cost shares of the cost-tree game.
    ///
    /// Each edge's cost is divided equally among the centers that depend on
    /// it: its head and everything downstream of the head. Missing edges
    /// cost nothing. Only defined when every center has a unique path from
    /// its source, so merge topologies are rejected.
    pub fn shapley_cost_shares(
        &self,
        edge_costs: &BTreeMap<CostEdge, f64>,
    ) -> Result<BTreeMap<usize, f64>, TopologyError> {
        if let Some(c) = (1..=self.num_centers).find(|&c| self.predecessors[c - 1].len() > 1) {
            return Err(TopologyError::NotATree(c));
        }
        let valid: BTreeSet<CostEdge> = self.cost_edges().into_iter().collect();
        for (&edge, &cost) in edge_costs {
            if !valid.contains(&edge) {
                return Err(TopologyError::UnknownEdge(edge));
            }
            if !(cost >= 0.0) {
                return Err(TopologyError::NegativeCost { edge, cost });
            }
        }

        let mut shares: BTreeMap<usize, f64> = (1..=self.num_centers).map(|c| (c, 0.0)).collect();
        for (&edge, &cost) in edge_costs {
            let head = edge.head();
            let mut users = self.reach(head, true);
            users.insert(head);
            let part = cost / users.len() as f64;
            for u in users {
                *shares.get_mut(&u).expect("center in range") += part;
            }
        }
        Ok(shares)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[usize]) -> BTreeSet<usize> {
        items.iter().copied().collect()
    }

    #[test]
    fn chain_sources_and_sinks() {
        let t = Topology::new(4, &[(1, 2), (2, 3), (3, 4)]).unwrap();
        assert_eq!(t.source_centers(), &[1]);
        assert_eq!(t.sink_centers(), &[4]);
        assert!(t.is_chain());
        assert_eq!(t, Topology::chain(4).unwrap());
    }

    #[test]
    fn single_center_is_degenerate_chain() {
        let t = Topology::new(1, &[]).unwrap();
        assert_eq!(t.source_centers(), &[1]);
        assert_eq!(t.sink_centers(), &[1]);
        assert!(t.is_chain());
    }

    #[test]
    fn rejects_malformed_graphs() {
        assert_eq!(
            Topology::new(4, &[(1, 2), (2, 1)]).unwrap_err(),
            TopologyError::CycleDetected(1)
        );
        assert_eq!(Topology::new(3, &[(2, 2)]).unwrap_err(), TopologyError::SelfLoop(2));
        assert_eq!(
            Topology::new(3, &[(1, 2), (1, 2), (2, 3)]).unwrap_err(),
            TopologyError::DuplicateEdge(1, 2)
        );
        assert_eq!(
            Topology::new(3, &[(1, 2)]).unwrap_err(),
            TopologyError::UnreachableCenter(3)
        );
        assert_eq!(
            Topology::new(3, &[(1, 5)]).unwrap_err(),
            TopologyError::InvalidCenter(5, 3)
        );
        assert_eq!(Topology::new(0, &[]).unwrap_err(), TopologyError::Empty);
    }

    #[test]
    fn upstream_and_downstream() {
        let chain = Topology::chain(4).unwrap();
        assert_eq!(chain.upstream_set(3).unwrap(), set(&[1, 2]));
        assert_eq!(chain.upstream_set(1).unwrap(), set(&[]));
        assert_eq!(chain.downstream_set(2).unwrap(), set(&[3, 4]));
        assert_eq!(chain.downstream_set(4).unwrap(), set(&[]));
        assert!(matches!(chain.upstream_set(5), Err(TopologyError::InvalidCenter(5, 4))));
        assert!(matches!(chain.downstream_set(0), Err(TopologyError::InvalidCenter(0, 4))));

        let branch_early = Topology::new(4, &[(1, 2), (1, 3), (3, 4)]).unwrap();
        assert_eq!(branch_early.upstream_set(4).unwrap(), set(&[1, 3]));

        let branch_late = Topology::new(4, &[(1, 2), (2, 3), (2, 4)]).unwrap();
        assert_eq!(branch_late.downstream_set(2).unwrap(), set(&[3, 4]));
        assert_eq!(branch_late.sink_centers(), &[3, 4]);
    }

    #[test]
    fn merge_topology_is_valid_but_not_a_tree() {
        let merge = Topology::new(4, &[(1, 2), (1, 3), (2, 4), (3, 4)]).unwrap();
        assert!(!merge.is_forest());
        let costs: BTreeMap<_, _> = merge.cost_edges().into_iter().map(|e| (e, 1.0)).collect();
        assert_eq!(merge.shapley_cost_shares(&costs).unwrap_err(), TopologyError::NotATree(4));
    }

    #[test]
    fn equal_split_on_chain() {
        let t = Topology::chain(4).unwrap();
        let costs: BTreeMap<_, _> = t.cost_edges().into_iter().map(|e| (e, 1.0)).collect();
        let s = t.shapley_cost_shares(&costs).unwrap();
        let q = 0.25;
        let t3 = 1.0 / 3.0;
        assert!((s[&1] - q).abs() < 1e-12);
        assert!((s[&2] - (q + t3)).abs() < 1e-12);
        assert!((s[&3] - (q + t3 + 0.5)).abs() < 1e-12);
        assert!((s[&4] - (q + t3 + 0.5 + 1.0)).abs() < 1e-12);
        let total: f64 = s.values().sum();
        assert!((total - 4.0).abs() < 1e-12);
    }

    #[test]
    fn equal_split_on_late_branch() {
        let t = Topology::new(4, &[(1, 2), (2, 3), (2, 4)]).unwrap();
        let costs: BTreeMap<_, _> = t.cost_edges().into_iter().map(|e| (e, 1.0)).collect();
        let s = t.shapley_cost_shares(&costs).unwrap();
        let base = 0.25 + 1.0 / 3.0;
        assert!((s[&1] - 0.25).abs() < 1e-12);
        assert!((s[&2] - base).abs() < 1e-12);
        assert!((s[&3] - (base + 1.0)).abs() < 1e-12);
        assert!((s[&4] - (base + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn single_center_pays_its_source_edge() {
        let t = Topology::new(1, &[]).unwrap();
        let costs = BTreeMap::from([(CostEdge::Source(1), 2.5)]);
        assert_eq!(t.shapley_cost_shares(&costs).unwrap()[&1], 2.5);
    }

    #[test]
    fn cost_validation() {
        let t = Topology::chain(2).unwrap();
        let neg = BTreeMap::from([(CostEdge::Link(1, 2), -1.0)]);
        assert!(matches!(t.shapley_cost_shares(&neg), Err(TopologyError::NegativeCost { .. })));
        let bogus = BTreeMap::from([(CostEdge::Link(2, 1), 1.0)]);
        assert!(matches!(t.shapley_cost_shares(&bogus), Err(TopologyError::UnknownEdge(_))));
    }

    #[test]
    fn serde_roundtrip_validates() {
        let t: Topology = toml::from_str("num_centers = 4\nedges = [[1,2],[2,3],[3,4]]").unwrap();
        assert_eq!(t, Topology::chain(4).unwrap());
        let bad: Result<Topology, _> = toml::from_str("num_centers = 2\nedges = [[1,2],[2,1]]");
        assert!(bad.is_err());
    }
}
