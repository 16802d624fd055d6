//! Distributed averaging of obfuscated shares with exact rational node state.
//!
//! Three interchangeable protocols: synchronous consensus with Metropolis
//! weights, randomized pairwise gossip, and an exact spanning-tree sum.
//! Nodes never see a stopping rule; the simulator certifies convergence with
//! the true share total and stops at the first certified round. Once every
//! node is within `1/(2n)` of the mean it stays there, because each protocol
//! step replaces values by convex combinations of current values.

use std::collections::{BTreeMap, VecDeque};

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};
use rand::Rng;
use thiserror::Error;

use crate::seed::SeedTree;
use crate::topology::{NodeId, Topology};
use crate::transcript::{NodeEvent, TranscriptStore};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AveragingError {
    #[error("averaging requires a connected graph")]
    Disconnected,
    #[error("gossip requires at least one edge")]
    NoEdges,
    #[error("expected values for {expected} nodes, got {got}")]
    NodeCount { expected: usize, got: usize },
    #[error("node {node} has {got} entries, expected {expected}")]
    Width { node: NodeId, expected: usize, got: usize },
    #[error("invalid protocol parameter: {0}")]
    InvalidParameter(String),
}

/// Exact per-node values. Node `i`, entry `c` is `numer[i][c] / denom[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AveragingState {
    numer: Vec<Vec<BigInt>>,
    denom: Vec<BigInt>,
    round: u64,
}

impl AveragingState {
    pub fn from_integers(values: &[Vec<BigInt>]) -> Result<Self, AveragingError> {
        let width = check_width(values)?;
        let _ = width;
        Ok(AveragingState {
            numer: values.to_vec(),
            denom: vec![BigInt::one(); values.len()],
            round: 0,
        })
    }

    pub fn from_rationals(values: &[Vec<BigRational>]) -> Result<Self, AveragingError> {
        check_width(values)?;
        let mut numer = Vec::with_capacity(values.len());
        let mut denom = Vec::with_capacity(values.len());
        for row in values {
            let d = row.iter().fold(BigInt::one(), |acc, v| acc.lcm(v.denom()));
            numer.push(row.iter().map(|v| v.numer() * (&d / v.denom())).collect());
            denom.push(d);
        }
        Ok(AveragingState { numer, denom, round: 0 })
    }

    pub fn n(&self) -> usize {
        self.numer.len()
    }

    pub fn width(&self) -> usize {
        self.numer.first().map_or(0, Vec::len)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn value(&self, i: NodeId, entry: usize) -> BigRational {
        BigRational::new(self.numer[i][entry].clone(), self.denom[i].clone())
    }

    pub fn values(&self, i: NodeId) -> Vec<BigRational> {
        (0..self.width()).map(|c| self.value(i, c)).collect()
    }

    /// Exact network-wide sum of every entry.
    pub fn total(&self) -> Vec<BigRational> {
        (0..self.width())
            .map(|c| (0..self.n()).map(|i| self.value(i, c)).sum())
            .collect()
    }

    /// `max_i value_i - min_i value_i` for one entry.
    pub fn spread(&self, entry: usize) -> BigRational {
        let vals: Vec<BigRational> = (0..self.n()).map(|i| self.value(i, entry)).collect();
        match (vals.iter().max(), vals.iter().min()) {
            (Some(hi), Some(lo)) => hi - lo,
            _ => BigRational::zero(),
        }
    }

    /// `|value * n - total| < 1/2` for every entry of node `i`.
    fn certified(&self, i: NodeId, totals: &[BigInt]) -> bool {
        let n = BigInt::from(self.n());
        let d = &self.denom[i];
        self.numer[i]
            .iter()
            .zip(totals)
            .all(|(num, t)| (num * &n - t * d).abs() * 2u32 < *d)
    }

    fn uncertified(&self, totals: &[BigInt]) -> usize {
        (0..self.n()).filter(|&i| !self.certified(i, totals)).count()
    }

    fn common_denominator(&mut self) -> BigInt {
        let d = self.denom.iter().fold(BigInt::one(), |acc, d| acc.lcm(d));
        for (row, di) in self.numer.iter_mut().zip(self.denom.iter_mut()) {
            if *di != d {
                let f = &d / &*di;
                row.iter_mut().for_each(|v| *v *= &f);
                *di = d.clone();
            }
        }
        d
    }

    fn apply_sync(&mut self, w: &MetropolisWeights) {
        let d = self.common_denominator();
        let next: Vec<Vec<BigInt>> = (0..self.n())
            .map(|i| {
                let mut acc: Vec<BigInt> = self.numer[i].iter().map(|v| v * &w.self_coeff[i]).collect();
                for (j, c) in &w.edge_coeff[i] {
                    for (a, v) in acc.iter_mut().zip(&self.numer[*j]) {
                        *a += v * c;
                    }
                }
                acc
            })
            .collect();
        let nd = d * &w.common;
        self.numer = next;
        self.denom = vec![nd; self.numer.len()];
        self.round += 1;
    }

    fn apply_pair(&mut self, i: NodeId, j: NodeId) {
        let l = self.denom[i].lcm(&self.denom[j]);
        let fi = &l / &self.denom[i];
        let fj = &l / &self.denom[j];
        let merged: Vec<BigInt> = self.numer[i]
            .iter()
            .zip(&self.numer[j])
            .map(|(a, b)| a * &fi + b * &fj)
            .collect();
        let nd = l * 2u32;
        self.numer[i] = merged.clone();
        self.numer[j] = merged;
        self.denom[i] = nd.clone();
        self.denom[j] = nd;
        self.round += 1;
    }
}

fn check_width<T>(values: &[Vec<T>]) -> Result<usize, AveragingError> {
    let width = values.first().map_or(0, Vec::len);
    for (node, row) in values.iter().enumerate() {
        if row.len() != width {
            return Err(AveragingError::Width {
                node,
                expected: width,
                got: row.len(),
            });
        }
    }
    Ok(width)
}

/// Metropolis weights `W_ij = 1 / (1 + max(deg_i, deg_j))`, `W_ii = 1 - sum_j W_ij`.
///
/// Alongside the rational weights, keeps an integer form over a common
/// denominator so a consensus round needs no gcd reductions.
#[derive(Clone, Debug, PartialEq)]
pub struct MetropolisWeights {
    edge: BTreeMap<(NodeId, NodeId), BigRational>,
    self_weight: Vec<BigRational>,
    common: BigInt,
    edge_coeff: Vec<Vec<(NodeId, BigInt)>>,
    self_coeff: Vec<BigInt>,
}

impl MetropolisWeights {
    pub fn edge_weight(&self, i: NodeId, j: NodeId) -> Option<&BigRational> {
        self.edge.get(&(i, j))
    }

    pub fn self_weight(&self, i: NodeId) -> &BigRational {
        &self.self_weight[i]
    }

    /// All directed edge weights.
    pub fn edges(&self) -> &BTreeMap<(NodeId, NodeId), BigRational> {
        &self.edge
    }
}

pub fn metropolis_weights(g: &Topology) -> Result<MetropolisWeights, AveragingError> {
    if !g.is_connected() {
        return Err(AveragingError::Disconnected);
    }
    let n = g.n();
    let mut edge = BTreeMap::new();
    let mut common = BigInt::one();
    for (i, j) in g.edges() {
        let d = BigInt::from(1 + g.degree(i).max(g.degree(j)));
        common = common.lcm(&d);
        let w = BigRational::new(BigInt::one(), d);
        edge.insert((i, j), w.clone());
        edge.insert((j, i), w);
    }
    let mut self_weight = Vec::with_capacity(n);
    let mut edge_coeff = vec![Vec::new(); n];
    let mut self_coeff = Vec::with_capacity(n);
    for i in 0..n {
        let mut rest = BigRational::one();
        for &j in g.neighbors(i).expect("node in range") {
            let w = &edge[&(i, j)];
            rest -= w;
            edge_coeff[i].push((j, (w * BigRational::from_integer(common.clone())).to_integer()));
        }
        self_coeff.push((&rest * BigRational::from_integer(common.clone())).to_integer());
        self_weight.push(rest);
    }
    Ok(MetropolisWeights {
        edge,
        self_weight,
        common,
        edge_coeff,
        self_coeff,
    })
}

/// One synchronous consensus round.
pub fn sync_round(state: &AveragingState, weights: &MetropolisWeights) -> AveragingState {
    let mut next = state.clone();
    next.apply_sync(weights);
    next
}

/// One gossip pairing on a uniformly chosen edge.
pub fn gossip_round(state: &AveragingState, g: &Topology, rng: &mut impl Rng) -> Result<AveragingState, AveragingError> {
    let edges = g.edges();
    if edges.is_empty() {
        return Err(AveragingError::NoEdges);
    }
    let (i, j) = edges[rng.random_range(0..edges.len())];
    let mut next = state.clone();
    next.apply_pair(i, j);
    Ok(next)
}

/// Exact mean of every entry via convergecast up a breadth-first spanning
/// tree rooted at node 0 followed by a broadcast back down.
pub fn tree_sum(g: &Topology, values: &[Vec<BigInt>]) -> Result<Vec<BigRational>, AveragingError> {
    Ok(tree_aggregate(g, values, None)?.0)
}

fn tree_aggregate(
    g: &Topology,
    values: &[Vec<BigInt>],
    mut trace: Option<(&mut TranscriptStore, u64)>,
) -> Result<(Vec<BigRational>, Vec<NodeId>), AveragingError> {
    if values.len() != g.n() {
        return Err(AveragingError::NodeCount {
            expected: g.n(),
            got: values.len(),
        });
    }
    let width = check_width(values)?;
    if !g.is_connected() {
        return Err(AveragingError::Disconnected);
    }
    let n = g.n();
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let mut parent = vec![usize::MAX; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::from([0]);
    parent[0] = 0;
    while let Some(u) = queue.pop_front() {
        order.push(u);
        for &v in g.neighbors(u).expect("node in range") {
            if parent[v] == usize::MAX {
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    let mut partial: Vec<Vec<BigInt>> = values.to_vec();
    for &u in order.iter().skip(1).rev() {
        let p = parent[u];
        if let Some((log, it)) = trace.as_mut() {
            log.record(p, *it, NodeEvent::AveragingMessage {
                round: 0,
                from: u,
                values: partial[u].iter().cloned().map(BigRational::from_integer).collect(),
            });
        }
        let sub = std::mem::take(&mut partial[u]);
        for (a, b) in partial[p].iter_mut().zip(sub) {
            *a += b;
        }
    }
    let nn = BigInt::from(n);
    let mean: Vec<BigRational> = (0..width)
        .map(|c| BigRational::new(partial[0][c].clone(), nn.clone()))
        .collect();
    if let Some((log, it)) = trace.as_mut() {
        for &u in order.iter().skip(1) {
            log.record(u, *it, NodeEvent::AveragingMessage {
                round: 1,
                from: parent[u],
                values: mean.clone(),
            });
        }
    }
    Ok((mean, parent))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ProtocolChoice {
    SyncConsensus { max_rounds: u64 },
    RandomGossip { max_pairings: u64, seed: u64 },
    ExactTreeSum,
}

impl ProtocolChoice {
    pub fn validate(&self) -> Result<(), AveragingError> {
        match self {
            ProtocolChoice::SyncConsensus { max_rounds: 0 } => {
                Err(AveragingError::InvalidParameter("max_rounds must be positive".into()))
            }
            ProtocolChoice::RandomGossip { max_pairings: 0, .. } => {
                Err(AveragingError::InvalidParameter("max_pairings must be positive".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ProtocolChoice::SyncConsensus { .. } => "sync",
            ProtocolChoice::RandomGossip { .. } => "gossip",
            ProtocolChoice::ExactTreeSum => "tree",
        }
    }
}

/// Result of one averaging invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOutcome {
    /// Per node, the obfuscated average estimate of every entry.
    pub s_bar: Vec<Vec<BigRational>>,
    /// Consensus rounds, gossip pairings, or 1 for the tree protocol.
    pub rounds: u64,
    /// Every node's estimate rounds to the true total (simulator certificate).
    pub converged: bool,
}

/// Runs the chosen protocol on integer inputs. `invocation` keys the gossip
/// stream so repeated invocations in one run use fresh edge choices; with
/// `trace`, every value a node receives is logged to its transcript.
pub fn run_protocol(
    g: &Topology,
    values: &[Vec<BigInt>],
    choice: &ProtocolChoice,
    invocation: u64,
    mut trace: Option<(&mut TranscriptStore, u64)>,
) -> Result<ProtocolOutcome, AveragingError> {
    choice.validate()?;
    if values.len() != g.n() {
        return Err(AveragingError::NodeCount {
            expected: g.n(),
            got: values.len(),
        });
    }
    if !g.is_connected() {
        return Err(AveragingError::Disconnected);
    }
    let width = check_width(values)?;
    let totals: Vec<BigInt> = (0..width)
        .map(|c| values.iter().map(|row| &row[c]).sum())
        .collect();

    match choice {
        ProtocolChoice::ExactTreeSum => {
            let (mean, _) = tree_aggregate(g, values, trace)?;
            Ok(ProtocolOutcome {
                s_bar: vec![mean; g.n()],
                rounds: 1,
                converged: true,
            })
        }
        ProtocolChoice::SyncConsensus { max_rounds } => {
            let w = metropolis_weights(g)?;
            let mut state = AveragingState::from_integers(values)?;
            let mut converged = state.uncertified(&totals) == 0;
            while !converged && state.round < *max_rounds {
                if let Some((log, it)) = trace.as_mut() {
                    for i in 0..g.n() {
                        for &j in g.neighbors(i).expect("node in range") {
                            log.record(i, *it, NodeEvent::AveragingMessage {
                                round: state.round,
                                from: j,
                                values: state.values(j),
                            });
                        }
                    }
                }
                state.apply_sync(&w);
                converged = state.uncertified(&totals) == 0;
            }
            Ok(ProtocolOutcome {
                s_bar: (0..g.n()).map(|i| state.values(i)).collect(),
                rounds: state.round,
                converged,
            })
        }
        ProtocolChoice::RandomGossip { max_pairings, seed } => {
            let edges = g.edges();
            let mut state = AveragingState::from_integers(values)?;
            let mut ok: Vec<bool> = (0..g.n()).map(|i| state.certified(i, &totals)).collect();
            let mut pending = ok.iter().filter(|&&b| !b).count();
            if pending > 0 && edges.is_empty() {
                return Err(AveragingError::NoEdges);
            }
            let mut rng = SeedTree::new(*seed).stream("gossip", &[invocation]);
            while pending > 0 && state.round < *max_pairings {
                let (i, j) = edges[rng.random_range(0..edges.len())];
                if let Some((log, it)) = trace.as_mut() {
                    log.record(i, *it, NodeEvent::AveragingMessage {
                        round: state.round,
                        from: j,
                        values: state.values(j),
                    });
                    log.record(j, *it, NodeEvent::AveragingMessage {
                        round: state.round,
                        from: i,
                        values: state.values(i),
                    });
                }
                state.apply_pair(i, j);
                for u in [i, j] {
                    let now = state.certified(u, &totals);
                    match (ok[u], now) {
                        (false, true) => pending -= 1,
                        (true, false) => pending += 1,
                        _ => {}
                    }
                    ok[u] = now;
                }
            }
            Ok(ProtocolOutcome {
                s_bar: (0..g.n()).map(|i| state.values(i)).collect(),
                rounds: state.round,
                converged: pending == 0,
            })
        }
    }
}
