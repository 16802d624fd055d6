//! What a passive coalition of corrupted nodes learns from a finished run.
//!
//! The coalition sees its members' transcripts, the public board (published
//! shares, aggregates, centers) and the graph. For every connected component
//! of honest nodes it can strip the boundary offsets it exchanged with that
//! component and recover the component's per-cluster sums and counts at each
//! iteration. Comparing iterations exposes nodes that moved alone; a cluster
//! holding a single node of a component exposes that node directly.
//!
//! Attribution of a disclosed value to a node id uses the honest nodes' own
//! transcripts (ground truth), so the report is an audit, not an attack
//! transcript.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use num_traits::{Signed, ToPrimitive, Zero};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::field::{units_to_f64, FieldElement, FieldModulus};
use crate::kmeans::EntryLayout;
use crate::topology::{HonestPartition, NodeId, Topology};
use crate::transcript::{NodeEvent, PublicEvent, TranscriptStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversaryError {
    #[error("transcripts do not match the partition or graph: {0}")]
    Mismatch(String),
    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn mismatch(msg: impl Into<String>) -> AdversaryError {
    AdversaryError::Mismatch(msg.into())
}

/// Run header as recovered from the public board.
#[derive(Clone, Debug, PartialEq)]
pub struct RunHeader {
    pub n: usize,
    pub k: usize,
    pub dim: usize,
    pub scale: u64,
    pub modulus: FieldModulus,
    pub edges: Vec<(NodeId, NodeId)>,
    pub init_centers: Vec<Vec<f64>>,
}

impl RunHeader {
    pub fn from_store(store: &TranscriptStore) -> Result<Self, AdversaryError> {
        let info = store.public().iter().find_map(|r| match &r.event {
            PublicEvent::RunInfo {
                n,
                k,
                dim,
                scale,
                modulus,
                edges,
                init_centers,
            } => Some((*n, *k, *dim, *scale, modulus, edges, init_centers)),
            _ => None,
        });
        let (n, k, dim, scale, modulus, edges, init_centers) =
            info.ok_or_else(|| mismatch("public board has no run header"))?;
        let p = BigUint::from_str(modulus).map_err(|_| mismatch(format!("bad modulus {modulus:?}")))?;
        let modulus = FieldModulus::new(p).map_err(|e| mismatch(e.to_string()))?;
        Ok(RunHeader {
            n,
            k,
            dim,
            scale,
            modulus,
            edges: edges.clone(),
            init_centers: init_centers.clone(),
        })
    }

    pub fn layout(&self) -> EntryLayout {
        EntryLayout { k: self.k, dim: self.dim }
    }
}

/// What the coalition holds about one honest component at one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationView {
    pub iteration: u64,
    /// Per cluster, the component's sum in field units.
    pub sums: Vec<Vec<BigInt>>,
    /// Per cluster, how many of the component's nodes it holds.
    pub counts: Vec<u64>,
    /// Ground truth: which component members sat in each cluster.
    pub occupancy: Vec<BTreeSet<NodeId>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentKnowledge {
    pub members: BTreeSet<NodeId>,
    pub views: Vec<IterationView>,
}

impl ComponentKnowledge {
    pub fn n_h(&self) -> usize {
        self.members.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoalitionKnowledge {
    pub k: usize,
    pub dim: usize,
    pub scale: u64,
    pub honest: BTreeSet<NodeId>,
    pub corrupted: BTreeSet<NodeId>,
    pub iterations: Vec<u64>,
    pub components: Vec<ComponentKnowledge>,
}

type RandomsIndex = HashMap<(u64, NodeId), Vec<BigUint>>;

fn index_randoms(store: &TranscriptStore, node: NodeId) -> (RandomsIndex, RandomsIndex) {
    let mut sent = HashMap::new();
    let mut received = HashMap::new();
    for r in &store.node(node).records {
        match &r.event {
            NodeEvent::SentRandoms { to, values } => {
                sent.insert((r.iteration, *to), values.clone());
            }
            NodeEvent::ReceivedRandoms { from, values } => {
                received.insert((r.iteration, *from), values.clone());
            }
            _ => {}
        }
    }
    (sent, received)
}

fn inputs_of(store: &TranscriptStore, node: NodeId) -> BTreeMap<u64, (usize, Vec<BigInt>)> {
    store
        .node(node)
        .records
        .iter()
        .filter_map(|r| match &r.event {
            NodeEvent::Input { label, entries } => Some((r.iteration, (*label, entries.clone()))),
            _ => None,
        })
        .collect()
}

/// Derives per-component, per-cluster honest sums and counts for every iteration.
pub fn coalition_knowledge(
    store: &TranscriptStore,
    part: &HonestPartition,
    g: &Topology,
) -> Result<CoalitionKnowledge, AdversaryError> {
    let header = RunHeader::from_store(store)?;
    if store.n() != part.n() || g.n() != part.n() || header.n != part.n() {
        return Err(mismatch(format!(
            "{} transcripts, {} partitioned nodes, {} graph nodes, header n = {}",
            store.n(),
            part.n(),
            g.n(),
            header.n
        )));
    }
    if g.edges() != header.edges {
        return Err(mismatch("graph differs from the recorded run"));
    }
    let layout = header.layout();
    let p = &header.modulus;

    let mut shares_at = BTreeMap::new();
    let mut totals_at = BTreeMap::new();
    for r in store.public() {
        match &r.event {
            PublicEvent::PublishedShares { shares } => {
                shares_at.insert(r.iteration, shares);
            }
            PublicEvent::Aggregate { totals } => {
                totals_at.insert(r.iteration, totals);
            }
            _ => {}
        }
    }
    let iterations: Vec<u64> = shares_at.keys().copied().collect();

    let mut knowledge = CoalitionKnowledge {
        k: header.k,
        dim: header.dim,
        scale: header.scale,
        honest: part.honest.clone(),
        corrupted: part.corrupted.clone(),
        iterations: iterations.clone(),
        components: Vec::new(),
    };
    if part.corrupted.is_empty() {
        return Ok(knowledge);
    }

    let corrupted_randoms: BTreeMap<NodeId, (RandomsIndex, RandomsIndex)> =
        part.corrupted.iter().map(|&c| (c, index_randoms(store, c))).collect();
    let honest_inputs: BTreeMap<NodeId, _> = part.honest.iter().map(|&i| (i, inputs_of(store, i))).collect();
    let corrupted_inputs: BTreeMap<NodeId, _> = part.corrupted.iter().map(|&c| (c, inputs_of(store, c))).collect();

    let components = g
        .connected_components(&part.honest)
        .map_err(|e| mismatch(e.to_string()))?;
    for members in components {
        let mut views = Vec::with_capacity(iterations.len());
        for &t in &iterations {
            let shares = shares_at[&t];
            if shares.len() != header.n {
                return Err(mismatch(format!("iteration {t} publishes {} shares", shares.len())));
            }
            let mut acc: Vec<FieldElement> = vec![p.zero(); layout.width()];
            for &i in &members {
                let row = &shares[i];
                if row.len() != layout.width() {
                    return Err(mismatch(format!("share of node {i} has width {}", row.len())));
                }
                for (a, v) in acc.iter_mut().zip(row) {
                    *a = a.add(&p.element(v.clone())).expect("one modulus");
                }
                for &c in g.neighbors(i).expect("node in range") {
                    let Some((sent, received)) = corrupted_randoms.get(&c) else {
                        continue;
                    };
                    let r_ic = received
                        .get(&(t, i))
                        .ok_or_else(|| mismatch(format!("node {c} has no random from {i} in iteration {t}")))?;
                    let r_ci = sent
                        .get(&(t, i))
                        .ok_or_else(|| mismatch(format!("node {c} sent no random to {i} in iteration {t}")))?;
                    for ((a, x), y) in acc.iter_mut().zip(r_ic).zip(r_ci) {
                        let s_ic = p.element(x.clone()).sub(&p.element(y.clone())).expect("one modulus");
                        *a = a.add(&s_ic).expect("one modulus");
                    }
                }
            }
            let lifted: Vec<BigInt> = acc.iter().map(|e| p.lift(e)).collect();
            let sums = (0..header.k)
                .map(|j| (0..header.dim).map(|r| lifted[layout.sum_entry(j, r)].clone()).collect())
                .collect();
            let mut counts = Vec::with_capacity(header.k);
            for j in 0..header.k {
                let c = &lifted[layout.count_entry(j)];
                if c.is_negative() {
                    return Err(mismatch(format!("negative count for cluster {j} in iteration {t}")));
                }
                counts.push(c.to_u64().ok_or_else(|| mismatch("count overflow"))?);
            }
            let mut occupancy = vec![BTreeSet::new(); header.k];
            for &i in &members {
                let (label, _) = honest_inputs[&i]
                    .get(&t)
                    .ok_or_else(|| mismatch(format!("node {i} has no input record for iteration {t}")))?;
                occupancy
                    .get_mut(*label)
                    .ok_or_else(|| mismatch(format!("label {label} of node {i} out of range")))?
                    .insert(i);
            }
            views.push(IterationView {
                iteration: t,
                sums,
                counts,
                occupancy,
            });
        }
        knowledge.components.push(ComponentKnowledge { members, views });
    }

    // Component sums plus the coalition's own inputs must give the published totals.
    for (idx, &t) in iterations.iter().enumerate() {
        let published = totals_at
            .get(&t)
            .ok_or_else(|| mismatch(format!("no published aggregate for iteration {t}")))?;
        let mut expected = vec![BigInt::zero(); layout.width()];
        for comp in &knowledge.components {
            let view = &comp.views[idx];
            if view.counts.iter().sum::<u64>() != comp.n_h() as u64 {
                return Err(mismatch(format!("component counts do not cover its members in iteration {t}")));
            }
            for j in 0..header.k {
                for r in 0..header.dim {
                    expected[layout.sum_entry(j, r)] += &view.sums[j][r];
                }
                expected[layout.count_entry(j)] += BigInt::from(view.counts[j]);
            }
        }
        for (c, inputs) in &corrupted_inputs {
            let (_, entries) = inputs
                .get(&t)
                .ok_or_else(|| mismatch(format!("corrupted node {c} has no input in iteration {t}")))?;
            for (e, v) in expected.iter_mut().zip(entries) {
                *e += v;
            }
        }
        if &expected != *published {
            return Err(mismatch(format!(
                "component sums and coalition inputs disagree with the published aggregate in iteration {t}"
            )));
        }
    }
    Ok(knowledge)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvidenceKind {
    /// The node was the only member of its component in this cluster.
    SingletonCluster { cluster: usize },
    /// The node alone moved from `from` to `to` between the two iterations.
    SingleMover { from: usize, to: usize },
    /// The component's equations over all iterations pin the node's value
    /// even though no single cluster or move isolates it.
    LinearSystem,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Evidence {
    pub first: u64,
    pub second: u64,
    pub kind: EvidenceKind,
}

/// A value the coalition recovers exactly, attributed to its owner.
#[derive(Clone, Debug, PartialEq)]
pub struct Disclosure {
    pub node: NodeId,
    pub component: usize,
    /// Recovered observation in field units.
    pub units: Vec<BigInt>,
    pub evidence: Evidence,
}

fn column_diff(a: &[Vec<BigInt>], b: &[Vec<BigInt>], j: usize) -> Vec<BigInt> {
    a[j].iter().zip(&b[j]).map(|(x, y)| x - y).collect()
}

/// Singleton-cluster exposures and single-mover differencing over every pair of iterations.
pub fn singleton_attack(knowledge: &CoalitionKnowledge) -> Vec<Disclosure> {
    let mut out = Vec::new();
    for (ci, comp) in knowledge.components.iter().enumerate() {
        for view in &comp.views {
            for j in 0..knowledge.k {
                if view.counts[j] == 1 {
                    if let Some(&node) = view.occupancy[j].iter().next() {
                        out.push(Disclosure {
                            node,
                            component: ci,
                            units: view.sums[j].clone(),
                            evidence: Evidence {
                                first: view.iteration,
                                second: view.iteration,
                                kind: EvidenceKind::SingletonCluster { cluster: j },
                            },
                        });
                    }
                }
            }
        }
        for (a, vm) in comp.views.iter().enumerate() {
            for vk in &comp.views[a + 1..] {
                let delta: Vec<i64> = vm
                    .counts
                    .iter()
                    .zip(&vk.counts)
                    .map(|(x, y)| *x as i64 - *y as i64)
                    .collect();
                let left: Vec<usize> = (0..knowledge.k).filter(|&j| delta[j] == 1).collect();
                let entered: Vec<usize> = (0..knowledge.k).filter(|&j| delta[j] == -1).collect();
                let others_zero = delta.iter().all(|d| (-1..=1).contains(d));
                let (&[u], &[v]) = (left.as_slice(), entered.as_slice()) else {
                    continue;
                };
                if !others_zero {
                    continue;
                }
                // Sum differences must look like one vector leaving u and entering v.
                let du = column_diff(&vm.sums, &vk.sums, u);
                let dv = column_diff(&vm.sums, &vk.sums, v);
                let consistent = du.iter().zip(&dv).all(|(x, y)| (x + y).is_zero())
                    && (0..knowledge.k)
                        .filter(|&j| j != u && j != v)
                        .all(|j| column_diff(&vm.sums, &vk.sums, j).iter().all(Zero::is_zero));
                if !consistent {
                    continue;
                }
                let label_at = |view: &IterationView, i: NodeId| view.occupancy.iter().position(|s| s.contains(&i));
                let movers: Vec<NodeId> = comp
                    .members
                    .iter()
                    .copied()
                    .filter(|&i| label_at(vm, i) != label_at(vk, i))
                    .collect();
                if let [node] = movers.as_slice() {
                    if label_at(vm, *node) == Some(u) && label_at(vk, *node) == Some(v) {
                        out.push(Disclosure {
                            node: *node,
                            component: ci,
                            units: du,
                            evidence: Evidence {
                                first: vm.iteration,
                                second: vk.iteration,
                                kind: EvidenceKind::SingleMover { from: u, to: v },
                            },
                        });
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeakageClass {
    /// The coalition's view is consistent with other values for this node.
    Perfect,
    /// Leakage bounded by `h(X_i) / n_h` for a component of `n_h` nodes.
    Bounded { n_h: usize },
    /// The node's observation is reconstructed exactly.
    Full,
}

impl LeakageClass {
    pub fn name(&self) -> &'static str {
        match self {
            LeakageClass::Perfect => "perfect",
            LeakageClass::Bounded { .. } => "bounded",
            LeakageClass::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeLeakage {
    pub node: NodeId,
    pub class: LeakageClass,
    pub evidence: Vec<Evidence>,
    pub recovered_units: Option<Vec<BigInt>>,
    pub recovered: Option<Vec<f64>>,
    /// All members of the node's component shared one cluster at the last update.
    pub final_label_exposed: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LeakageSummary {
    pub perfect: usize,
    pub bounded: usize,
    pub full: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LeakageReport {
    pub corrupted: BTreeSet<NodeId>,
    pub nodes: Vec<NodeLeakage>,
}

impl LeakageReport {
    pub fn summary(&self) -> LeakageSummary {
        let mut s = LeakageSummary::default();
        for n in &self.nodes {
            match n.class {
                LeakageClass::Perfect => s.perfect += 1,
                LeakageClass::Bounded { .. } => s.bounded += 1,
                LeakageClass::Full => s.full += 1,
            }
        }
        s
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeLeakage> {
        self.nodes.iter().find(|n| n.node == id)
    }

    /// One line per honest node.
    pub fn to_text(&self) -> String {
        let corrupted: Vec<String> = self.corrupted.iter().map(ToString::to_string).collect();
        let mut out = format!("# corrupted: {}\n", corrupted.join(","));
        for n in &self.nodes {
            write!(out, "node={} class={}", n.node, n.class.name()).expect("writing to a String");
            if let LeakageClass::Bounded { n_h } = n.class {
                write!(out, " coefficient=1/{n_h}").expect("writing to a String");
            }
            if !n.evidence.is_empty() {
                let ev: Vec<String> = n
                    .evidence
                    .iter()
                    .map(|e| match e.kind {
                        EvidenceKind::SingletonCluster { cluster } => {
                            format!("{}-{}:singleton({cluster})", e.first, e.second)
                        }
                        EvidenceKind::SingleMover { from, to } => format!("{}-{}:mover({from}->{to})", e.first, e.second),
                        EvidenceKind::LinearSystem => format!("{}-{}:system", e.first, e.second),
                    })
                    .collect();
                write!(out, " evidence={}", ev.join(";")).expect("writing to a String");
            }
            if let Some(v) = &n.recovered {
                let v: Vec<String> = v.iter().map(|x| format!("{x}")).collect();
                write!(out, " value={}", v.join(",")).expect("writing to a String");
            }
            writeln!(out, " final_label_exposed={}", n.final_label_exposed).expect("writing to a String");
        }
        out
    }
}

/// Nodes whose value is forced by the component's per-cluster sums over all
/// iterations taken together, given who sat where: exactly those `i` for
/// which the indicator vector `e_i` lies in the row space of the occupancy
/// matrix. Subsumes singleton clusters and lone movers.
pub fn linear_exposure(knowledge: &CoalitionKnowledge) -> Vec<Disclosure> {
    let mut out = Vec::new();
    for (ci, comp) in knowledge.components.iter().enumerate() {
        let (Some(first), Some(last)) = (comp.views.first(), comp.views.last()) else {
            continue;
        };
        let members: Vec<NodeId> = comp.members.iter().copied().collect();
        let m = members.len();
        // Augmented rows: occupancy indicators, then the sum per coordinate.
        let mut rows: Vec<Vec<BigRational>> = Vec::new();
        for view in &comp.views {
            for j in 0..knowledge.k {
                let mut row: Vec<BigRational> = members
                    .iter()
                    .map(|i| BigRational::from_integer(BigInt::from(view.occupancy[j].contains(i) as u8)))
                    .collect();
                row.extend(view.sums[j].iter().map(|v| BigRational::from_integer(v.clone())));
                rows.push(row);
            }
        }
        let pivots = reduce(&mut rows, m);
        for (r, &col) in pivots.iter().enumerate() {
            if (0..m).all(|c| c == col || rows[r][c].is_zero()) {
                let units: Option<Vec<BigInt>> = rows[r][m..]
                    .iter()
                    .map(|v| v.is_integer().then(|| v.to_integer()))
                    .collect();
                let Some(units) = units else { continue };
                out.push(Disclosure {
                    node: members[col],
                    component: ci,
                    units,
                    evidence: Evidence {
                        first: first.iteration,
                        second: last.iteration,
                        kind: EvidenceKind::LinearSystem,
                    },
                });
            }
        }
    }
    out
}

/// Reduced row echelon form over the first `cols` columns; returns the pivot
/// column of each leading row.
fn reduce(rows: &mut [Vec<BigRational>], cols: usize) -> Vec<usize> {
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows.len()).find(|&i| !rows[i][c].is_zero()) else {
            continue;
        };
        rows.swap(r, p);
        let lead = rows[r][c].clone();
        for v in rows[r].iter_mut() {
            *v = &*v / &lead;
        }
        let pivot_row = rows[r].clone();
        for (i, row) in rows.iter_mut().enumerate() {
            if i != r && !row[c].is_zero() {
                let f = row[c].clone();
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= &f * pv;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    pivots
}

/// Classifies every honest node: `full` when a disclosure names it,
/// `bounded` when its component ever had a single-occupant cluster,
/// `perfect` otherwise.
pub fn leakage_report(knowledge: &CoalitionKnowledge) -> LeakageReport {
    let mut disclosures = singleton_attack(knowledge);
    let named: BTreeSet<NodeId> = disclosures.iter().map(|d| d.node).collect();
    disclosures.extend(linear_exposure(knowledge).into_iter().filter(|d| !named.contains(&d.node)));
    let mut by_node: BTreeMap<NodeId, Vec<&Disclosure>> = BTreeMap::new();
    for d in &disclosures {
        by_node.entry(d.node).or_default().push(d);
    }
    let exposed_components: BTreeSet<usize> = disclosures
        .iter()
        .filter(|d| matches!(d.evidence.kind, EvidenceKind::SingletonCluster { .. }))
        .map(|d| d.component)
        .collect();

    let mut nodes = Vec::with_capacity(knowledge.honest.len());
    for &i in &knowledge.honest {
        let comp = knowledge.components.iter().position(|c| c.members.contains(&i));
        let final_label_exposed = comp
            .and_then(|c| {
                let kc = &knowledge.components[c];
                kc.views.last().map(|v| v.counts.iter().any(|&n| n as usize == kc.n_h()))
            })
            .unwrap_or(false);
        let entry = match (by_node.get(&i), comp) {
            (Some(ds), _) => {
                let units = ds[0].units.clone();
                let recovered = units.iter().map(|u| units_to_f64(u) / knowledge.scale as f64).collect();
                NodeLeakage {
                    node: i,
                    class: LeakageClass::Full,
                    evidence: ds.iter().map(|d| d.evidence.clone()).collect(),
                    recovered_units: Some(units),
                    recovered: Some(recovered),
                    final_label_exposed,
                }
            }
            (None, Some(c)) if exposed_components.contains(&c) => NodeLeakage {
                node: i,
                class: LeakageClass::Bounded {
                    n_h: knowledge.components[c].n_h(),
                },
                evidence: Vec::new(),
                recovered_units: None,
                recovered: None,
                final_label_exposed,
            },
            _ => NodeLeakage {
                node: i,
                class: LeakageClass::Perfect,
                evidence: Vec::new(),
                recovered_units: None,
                recovered: None,
                final_label_exposed,
            },
        };
        nodes.push(entry);
    }
    LeakageReport {
        corrupted: knowledge.corrupted.clone(),
        nodes,
    }
}

/// `(1/k)^M`: chance that `M` nodes with independent uniform labels share one given cluster.
pub fn same_cluster_probability(m: usize, k: usize) -> Result<f64, AdversaryError> {
    if m == 0 || k == 0 {
        return Err(AdversaryError::InvalidParameter(format!("need M >= 1 and k >= 1, got M = {m}, k = {k}")));
    }
    Ok((1.0 / k as f64).powi(m as i32))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformityTest {
    pub statistic: f64,
    pub degrees_of_freedom: u64,
    pub critical_value: f64,
    /// Uniformity rejected at significance 0.01.
    pub reject: bool,
}

/// Chi-square goodness of fit against the uniform distribution on `[0, p)`.
pub fn share_uniformity_test(samples: &[FieldElement], p: &FieldModulus) -> Result<UniformityTest, AdversaryError> {
    let width = p
        .value()
        .to_usize()
        .filter(|&w| w <= 101)
        .ok_or_else(|| AdversaryError::InvalidParameter(format!("modulus {p} is too large for a binned test")))?;
    let needed = 100 * width;
    if samples.len() < needed {
        return Err(AdversaryError::InsufficientSamples {
            needed,
            got: samples.len(),
        });
    }
    let mut bins = vec![0u64; width];
    for s in samples {
        if s.modulus() != p {
            return Err(AdversaryError::InvalidParameter("sample from a different field".into()));
        }
        bins[s.value().to_usize().expect("below p")] += 1;
    }
    let expected = samples.len() as f64 / width as f64;
    let statistic = bins
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    let dof = (width - 1) as u64;
    let critical_value = ChiSquared::new(dof as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.99);
    Ok(UniformityTest {
        statistic,
        degrees_of_freedom: dof,
        critical_value,
        reject: statistic > critical_value,
    })
}

/// Replays one node's transcript: each recorded share must equal its input
/// minus the offsets it exchanged, and each recorded center set must follow
/// from its reconstructed aggregate.
pub fn verify_replay(store: &TranscriptStore, node: NodeId) -> Result<(), AdversaryError> {
    let header = RunHeader::from_store(store)?;
    let layout = header.layout();
    let p = &header.modulus;
    let t_max = store.node(node).records.iter().map(|r| r.iteration).max();
    let mut prev = header.init_centers.clone();
    for t in 0..=t_max.unwrap_or(0) {
        let events: Vec<&NodeEvent> = store.node(node).at(t).collect();
        if events.is_empty() {
            continue;
        }
        let mut input = None;
        let mut share = None;
        let mut reconstructed = None;
        let mut centers = None;
        let mut masked: Vec<FieldElement> = Vec::new();
        let mut sent: BTreeMap<NodeId, &Vec<BigUint>> = BTreeMap::new();
        let mut received: BTreeMap<NodeId, &Vec<BigUint>> = BTreeMap::new();
        for e in events {
            match e {
                NodeEvent::Input { entries, .. } => input = Some(entries),
                NodeEvent::SentRandoms { to, values } => {
                    sent.insert(*to, values);
                }
                NodeEvent::ReceivedRandoms { from, values } => {
                    received.insert(*from, values);
                }
                NodeEvent::Share { values } => share = Some(values),
                NodeEvent::Reconstructed { values } => reconstructed = Some(values),
                NodeEvent::Centers { centers: c } => centers = Some(c),
                NodeEvent::AveragingMessage { .. } => {}
            }
        }
        let input = input.ok_or_else(|| mismatch(format!("node {node} iteration {t}: no input")))?;
        masked.extend(input.iter().map(|v| p.element_from_int(v)));
        if sent.keys().ne(received.keys()) {
            return Err(mismatch(format!("node {node} iteration {t}: unpaired offsets")));
        }
        for (k, out) in &sent {
            for ((m, r_ik), r_ki) in masked.iter_mut().zip(out.iter()).zip(received[k].iter()) {
                let s_ik = p.element(r_ik.clone()).sub(&p.element(r_ki.clone())).expect("one modulus");
                *m = m.sub(&s_ik).expect("one modulus");
            }
        }
        let share = share.ok_or_else(|| mismatch(format!("node {node} iteration {t}: no share")))?;
        if masked.iter().map(|e| e.value()).ne(share.iter()) {
            return Err(mismatch(format!("node {node} iteration {t}: share does not replay")));
        }
        let rec = reconstructed.ok_or_else(|| mismatch(format!("node {node} iteration {t}: no aggregate")))?;
        let lifted: Vec<BigInt> = rec.iter().map(|v| p.lift(&p.element(v.clone()))).collect();
        let expect: Vec<Vec<f64>> = (0..header.k)
            .map(|j| {
                let count = lifted[layout.count_entry(j)].to_f64().unwrap_or(0.0);
                if count == 0.0 {
                    prev[j].clone()
                } else {
                    (0..header.dim)
                        .map(|r| units_to_f64(&lifted[layout.sum_entry(j, r)]) / header.scale as f64 / count)
                        .collect()
                }
            })
            .collect();
        let centers = centers.ok_or_else(|| mismatch(format!("node {node} iteration {t}: no centers")))?;
        if *centers != expect {
            return Err(mismatch(format!("node {node} iteration {t}: centers do not replay")));
        }
        prev = expect;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_cluster_examples() {
        assert_eq!(same_cluster_probability(1, 4).unwrap(), 0.25);
        assert_eq!(same_cluster_probability(7, 1).unwrap(), 1.0);
        assert_eq!(same_cluster_probability(3, 2).unwrap(), 0.125);
        assert!(same_cluster_probability(0, 2).is_err());
    }

    #[test]
    fn uniformity_flags_constant_samples() {
        let p = FieldModulus::from_u64(11).unwrap();
        let constant = vec![p.element(4u32); 1100];
        assert!(share_uniformity_test(&constant, &p).unwrap().reject);
    }

    #[test]
    fn uniformity_accepts_exact_uniform_counts() {
        let p = FieldModulus::from_u64(11).unwrap();
        let samples: Vec<_> = (0..1100u32).map(|i| p.element(i % 11)).collect();
        let t = share_uniformity_test(&samples, &p).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert!(!t.reject);
        assert_eq!(t.degrees_of_freedom, 10);
        // 0.99 quantile of chi-square with 10 degrees of freedom.
        assert!((t.critical_value - 23.209).abs() < 1e-3);
    }

    #[test]
    fn uniformity_requires_enough_samples() {
        let p = FieldModulus::from_u64(11).unwrap();
        let samples = vec![p.element(1u32); 50];
        assert_eq!(
            share_uniformity_test(&samples, &p),
            Err(AdversaryError::InsufficientSamples { needed: 1100, got: 50 })
        );
        let big = FieldModulus::from_u64(1009).unwrap();
        assert!(matches!(share_uniformity_test(&[], &big), Err(AdversaryError::InvalidParameter(_))));
    }
}
