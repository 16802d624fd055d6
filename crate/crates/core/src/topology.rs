//! Undirected network graphs over dense node ids `0..n`.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("node {node} is out of range for a graph of {n} nodes")]
    InvalidNode { node: NodeId, n: usize },
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("node {0} appears in both the honest and the corrupted set")]
    OverlappingPartition(NodeId),
    #[error("malformed edge list at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Static undirected graph without self-loops.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    adjacency: Vec<BTreeSet<NodeId>>,
}

impl Topology {
    /// Builds a graph from unordered pairs. Duplicate pairs collapse.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (NodeId, NodeId)>) -> Result<Self, TopologyError> {
        let mut adjacency = vec![BTreeSet::new(); n];
        for (i, j) in edges {
            for node in [i, j] {
                if node >= n {
                    return Err(TopologyError::InvalidNode { node, n });
                }
            }
            if i == j {
                return Err(TopologyError::SelfLoop(i));
            }
            adjacency[i].insert(j);
            adjacency[j].insert(i);
        }
        Ok(Topology { n, adjacency })
    }

    pub fn empty(n: usize) -> Self {
        Topology {
            n,
            adjacency: vec![BTreeSet::new(); n],
        }
    }

    /// Cycle `0-1-...-(n-1)-0`. `ring(2)` is a single edge and `ring(1)` has none.
    pub fn ring(n: usize) -> Self {
        let edges = (0..n).filter_map(|i| {
            let j = (i + 1) % n;
            (i != j).then_some((i, j))
        });
        Self::new(n, edges).expect("ring edges are valid")
    }

    pub fn complete(n: usize) -> Self {
        let edges = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j)));
        Self::new(n, edges).expect("complete edges are valid")
    }

    /// Node 0 joined to every other node.
    pub fn star(n: usize) -> Self {
        Self::new(n, (1..n).map(|j| (0, j))).expect("star edges are valid")
    }

    pub fn path(n: usize) -> Self {
        Self::new(n, (1..n).map(|j| (j - 1, j))).expect("path edges are valid")
    }

    /// G(n, prob): each unordered pair independently with probability `prob`,
    /// pairs visited in lexicographic order from a seeded stream.
    pub fn erdos_renyi(n: usize, prob: f64, seed: u64) -> Self {
        let prob = prob.clamp(0.0, 1.0);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(prob) {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, edges).expect("generated edges are valid")
    }

    /// Nodes uniform in the unit square, joined when within `radius` (Euclidean).
    pub fn random_geometric(n: usize, radius: f64, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let points: Vec<(f64, f64)> = (0..n).map(|_| (rng.random(), rng.random())).collect();
        let r2 = radius * radius;
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                if dx * dx + dy * dy <= r2 {
                    edges.push((i, j));
                }
            }
        }
        Self::new(n, edges).expect("generated edges are valid")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn neighbors(&self, i: NodeId) -> Result<&BTreeSet<NodeId>, TopologyError> {
        self.adjacency
            .get(i)
            .ok_or(TopologyError::InvalidNode { node: i, n: self.n })
    }

    pub fn degree(&self, i: NodeId) -> usize {
        self.adjacency[i].len()
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(i, nbrs)| nbrs.range(i + 1..).map(move |&j| (i, j)))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn has_edge(&self, i: NodeId, j: NodeId) -> bool {
        self.adjacency.get(i).is_some_and(|s| s.contains(&j))
    }

    /// Maximal connected pieces of the subgraph induced by `subset`, each
    /// sorted, ordered by smallest member.
    pub fn connected_components(&self, subset: &BTreeSet<NodeId>) -> Result<Vec<BTreeSet<NodeId>>, TopologyError> {
        if let Some(&bad) = subset.iter().find(|&&i| i >= self.n) {
            return Err(TopologyError::InvalidNode { node: bad, n: self.n });
        }
        let mut seen = BTreeSet::new();
        let mut components = Vec::new();
        for &start in subset {
            if !seen.insert(start) {
                continue;
            }
            let mut component = BTreeSet::from([start]);
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if subset.contains(&v) && seen.insert(v) {
                        component.insert(v);
                        queue.push_back(v);
                    }
                }
            }
            components.push(component);
        }
        Ok(components)
    }

    pub fn is_connected(&self) -> bool {
        let all: BTreeSet<NodeId> = (0..self.n).collect();
        self.connected_components(&all).map(|c| c.len() <= 1).unwrap_or(false)
    }

    /// For every honest node, whether it has at least one honest neighbor.
    pub fn honest_neighbor_condition(&self, part: &HonestPartition) -> BTreeMap<NodeId, bool> {
        part.honest
            .iter()
            .map(|&i| (i, self.adjacency[i].iter().any(|j| part.honest.contains(j))))
            .collect()
    }

    /// `n` on the first line, then one `i j` pair per line.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("{}\n", self.n);
        for (i, j) in self.edges() {
            writeln!(out, "{i} {j}").expect("writing to a String");
        }
        out
    }

    pub fn parse_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(idx, l)| (idx + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (line, header) = lines.next().ok_or(TopologyError::Parse {
            line: 1,
            reason: "missing node count".into(),
        })?;
        let n: usize = header.parse().map_err(|_| TopologyError::Parse {
            line,
            reason: format!("expected a node count, found {header:?}"),
        })?;
        let mut edges = Vec::new();
        for (line, l) in lines {
            let parts: Vec<&str> = l.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<NodeId>().map_err(|_| TopologyError::Parse {
                    line,
                    reason: format!("bad node id {s:?}"),
                })
            };
            match parts.as_slice() {
                [a, b] => edges.push((parse(a)?, parse(b)?)),
                _ => {
                    return Err(TopologyError::Parse {
                        line,
                        reason: "expected two node ids".into(),
                    })
                }
            }
        }
        Self::new(n, edges)
    }
}

/// Split of the node set into honest nodes and passively corrupted ones.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HonestPartition {
    pub honest: BTreeSet<NodeId>,
    pub corrupted: BTreeSet<NodeId>,
}

impl HonestPartition {
    /// Everything not listed as corrupted is honest.
    pub fn from_corrupted(n: usize, corrupted: impl IntoIterator<Item = NodeId>) -> Result<Self, TopologyError> {
        let corrupted: BTreeSet<NodeId> = corrupted.into_iter().collect();
        if let Some(&node) = corrupted.iter().find(|&&c| c >= n) {
            return Err(TopologyError::InvalidNode { node, n });
        }
        let honest = (0..n).filter(|i| !corrupted.contains(i)).collect();
        Ok(HonestPartition { honest, corrupted })
    }

    pub fn new(n: usize, honest: BTreeSet<NodeId>, corrupted: BTreeSet<NodeId>) -> Result<Self, TopologyError> {
        if let Some(&node) = honest.intersection(&corrupted).next() {
            return Err(TopologyError::OverlappingPartition(node));
        }
        for &node in honest.iter().chain(&corrupted) {
            if node >= n {
                return Err(TopologyError::InvalidNode { node, n });
            }
        }
        if let Some(missing) = (0..n).find(|i| !honest.contains(i) && !corrupted.contains(i)) {
            return Err(TopologyError::InvalidNode { node: missing, n });
        }
        Ok(HonestPartition { honest, corrupted })
    }

    pub fn all_honest(n: usize) -> Self {
        HonestPartition {
            honest: (0..n).collect(),
            corrupted: BTreeSet::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.honest.len() + self.corrupted.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn ring_neighbors() {
        assert_eq!(Topology::ring(3).neighbors(0).unwrap(), &set(&[1, 2]));
        assert_eq!(Topology::ring(5).neighbors(2).unwrap(), &set(&[1, 3]));
        assert_eq!(Topology::ring(1).edge_count(), 0);
        assert_eq!(Topology::ring(2).edges(), vec![(0, 1)]);
    }

    #[test]
    fn invalid_node_rejected() {
        assert!(matches!(Topology::ring(3).neighbors(3), Err(TopologyError::InvalidNode { .. })));
        assert!(matches!(Topology::new(2, [(0, 2)]), Err(TopologyError::InvalidNode { .. })));
        assert!(matches!(Topology::new(2, [(1, 1)]), Err(TopologyError::SelfLoop(1))));
    }

    #[test]
    fn erdos_renyi_neighbors_match_edge_list() {
        let g = Topology::erdos_renyi(10, 0.5, 42);
        let from_edges: BTreeSet<usize> = g
            .edges()
            .into_iter()
            .filter_map(|(i, j)| match (i, j) {
                (0, j) => Some(j),
                (i, 0) => Some(i),
                _ => None,
            })
            .collect();
        assert_eq!(g.neighbors(0).unwrap(), &from_edges);
        assert_eq!(g, Topology::erdos_renyi(10, 0.5, 42));
    }

    #[test]
    fn erdos_renyi_extremes() {
        assert_eq!(Topology::erdos_renyi(6, 1.0, 3), Topology::complete(6));
        assert_eq!(Topology::erdos_renyi(6, 0.0, 3).edge_count(), 0);
        let a = Topology::erdos_renyi(8, 0.4, 7);
        assert_eq!(a.edges(), Topology::erdos_renyi(8, 0.4, 7).edges());
    }

    #[test]
    fn geometric_is_deterministic() {
        let a = Topology::random_geometric(15, 0.4, 11);
        assert_eq!(a, Topology::random_geometric(15, 0.4, 11));
        assert_eq!(Topology::random_geometric(5, 2.0, 1), Topology::complete(5));
    }

    #[test]
    fn component_examples() {
        let r6 = Topology::ring(6);
        assert!(r6.connected_components(&BTreeSet::new()).unwrap().is_empty());
        assert_eq!(
            Topology::ring(4).connected_components(&set(&[0, 1, 2, 3])).unwrap(),
            vec![set(&[0, 1, 2, 3])]
        );
        assert_eq!(
            r6.connected_components(&set(&[0, 1, 3, 4])).unwrap(),
            vec![set(&[0, 1]), set(&[3, 4])]
        );
    }

    #[test]
    fn honest_neighbor_examples() {
        let r3 = Topology::ring(3);
        let all = r3.honest_neighbor_condition(&HonestPartition::all_honest(3));
        assert!(all.values().all(|&b| b));
        let lone = HonestPartition::from_corrupted(3, [1, 2]).unwrap();
        assert_eq!(r3.honest_neighbor_condition(&lone), BTreeMap::from([(0, false)]));
        let part = HonestPartition::from_corrupted(6, [2, 4, 5]).unwrap();
        assert_eq!(
            Topology::ring(6).honest_neighbor_condition(&part),
            BTreeMap::from([(0, true), (1, true), (3, false)])
        );
    }

    #[test]
    fn partition_validation() {
        assert!(HonestPartition::new(3, set(&[0, 1]), set(&[1, 2])).is_err());
        assert!(HonestPartition::new(3, set(&[0]), set(&[2])).is_err());
        assert!(HonestPartition::from_corrupted(3, [3]).is_err());
    }

    #[test]
    fn edge_list_round_trip() {
        let g = Topology::erdos_renyi(9, 0.3, 5);
        let text = g.to_edge_list();
        assert!(text.starts_with("9\n"));
        assert_eq!(Topology::parse_edge_list(&text).unwrap(), g);
        assert!(Topology::parse_edge_list("3\n0 1 2\n").is_err());
        assert!(Topology::parse_edge_list("").is_err());
    }
}
