//! Distributed k-means: local assignment, extended vectors, the secure
//! center update, the outer iteration loop, and the centralized Lloyd
//! reference that shares the loop's tie-break and empty-cluster rules.

use std::fmt::Write as _;

use num_bigint::{BigInt, BigUint, Sign};
use num_traits::{Signed, ToPrimitive};
use rand::Rng;
use thiserror::Error;

use crate::averaging::{run_protocol, AveragingError, ProtocolChoice};
use crate::field::{units_to_f64, FieldElement, FieldError, FixedPointCodec};
use crate::seed::SeedTree;
use crate::sharing::{exchange_randoms, make_shares, reconstruct_checked, share_total, SharingError};
use crate::topology::Topology;
use crate::transcript::{NodeEvent, PublicEvent, TranscriptStore};

pub type Centers = Vec<Vec<f64>>;
pub type Labels = Vec<usize>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KMeansError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Sharing(#[from] SharingError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error("averaging did not converge in iteration {iteration} after {rounds} rounds")]
    NotConverged { iteration: u64, rounds: u64 },
    #[error("label {label} out of range for k = {k}")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("expected dimension {expected}, found {got}")]
    Dimension { expected: usize, got: usize },
    #[error("at least one center is required")]
    NoCenters,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("coordinate {value} of point {point} is not finite or exceeds the bound {bound}")]
    OutOfBounds { point: usize, value: f64, bound: f64 },
    #[error("graph has {graph} nodes but the dataset has {data} points")]
    SizeMismatch { graph: usize, data: usize },
    #[error("graph is disconnected")]
    Disconnected,
    #[error("internal fault: {0}")]
    Internal(String),
    #[error("malformed dataset at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// One observation per node, every coordinate within `[-x_max, x_max]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    points: Vec<Vec<f64>>,
    dim: usize,
    x_max: f64,
}

impl Dataset {
    pub fn new(dim: usize, x_max: f64, points: Vec<Vec<f64>>) -> Result<Self, KMeansError> {
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(KMeansError::Dimension {
                    expected: dim,
                    got: p.len(),
                });
            }
            if let Some(&value) = p.iter().find(|v| !v.is_finite() || v.abs() > x_max) {
                return Err(KMeansError::OutOfBounds {
                    point: i,
                    value,
                    bound: x_max,
                });
            }
        }
        Ok(Dataset { points, dim, x_max })
    }

    /// Scalar observations.
    pub fn scalars(x_max: f64, values: &[f64]) -> Result<Self, KMeansError> {
        Self::new(1, x_max, values.iter().map(|&v| vec![v]).collect())
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    /// One row per node, comma-separated decimal coordinates.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            let row: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{}", row.join(",")).expect("writing to a String");
        }
        out
    }

    /// Parses the CSV form. Blank lines and `#` comments are skipped; the
    /// dimension is taken from the first row.
    pub fn parse_csv(text: &str, x_max: f64) -> Result<Self, KMeansError> {
        let mut points = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| KMeansError::Parse {
                        line: idx + 1,
                        reason: format!("bad number {s:?}"),
                    })
                })
                .collect::<Result<Vec<f64>, _>>()?;
            points.push(row);
        }
        let dim = points.first().map_or(1, Vec::len);
        Self::new(dim, x_max, points)
    }
}

/// Closest center by squared Euclidean distance, ties to the smallest index.
pub fn assign_cluster(x: &[f64], centers: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centers.iter().enumerate() {
        let d: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

pub fn assign_all(dataset: &Dataset, centers: &[Vec<f64>]) -> Labels {
    dataset.points.iter().map(|x| assign_cluster(x, centers)).collect()
}

/// `y` is `d x k` with the observation in column `label`; `e` is one-hot at `label`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedVectors {
    pub y: Vec<Vec<f64>>,
    pub e: Vec<u64>,
}

pub fn build_extended(x: &[f64], label: usize, k: usize) -> Result<ExtendedVectors, KMeansError> {
    if label >= k {
        return Err(KMeansError::LabelOutOfRange { label, k });
    }
    let y = x
        .iter()
        .map(|&v| (0..k).map(|j| if j == label { v } else { 0.0 }).collect())
        .collect();
    let e = (0..k).map(|j| u64::from(j == label)).collect();
    Ok(ExtendedVectors { y, e })
}

/// Layout of the batched averaging input: `k * d` sum entries (cluster-major,
/// entry `j * d + r` is coordinate `r` of cluster `j`), then `k` count entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EntryLayout {
    pub k: usize,
    pub dim: usize,
}

impl EntryLayout {
    pub fn width(&self) -> usize {
        self.k * self.dim + self.k
    }

    pub fn sum_entry(&self, cluster: usize, coord: usize) -> usize {
        cluster * self.dim + coord
    }

    pub fn count_entry(&self, cluster: usize) -> usize {
        self.k * self.dim + cluster
    }

    /// Encodes extended vectors: sums through the codec, counts as plain integers.
    pub fn encode(&self, ext: &ExtendedVectors, codec: &FixedPointCodec) -> Result<Vec<FieldElement>, KMeansError> {
        let mut out = vec![codec.modulus().zero(); self.width()];
        for (r, row) in ext.y.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                out[self.sum_entry(j, r)] = codec.encode(v)?;
            }
        }
        for (j, &c) in ext.e.iter().enumerate() {
            out[self.count_entry(j)] = codec.modulus().element(BigUint::from(c));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    /// Iteration budget `T`.
    pub max_iters: usize,
    pub protocol: ProtocolChoice,
    pub scale: u64,
    pub master_seed: u64,
    /// Log every averaging message into the transcripts.
    pub trace: bool,
}

/// Output of one secure center update.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterUpdate {
    pub centers: Centers,
    /// Per cluster, the reconstructed sum in field units (`n * Y_j`).
    pub sums: Vec<Vec<BigInt>>,
    /// Per cluster, the reconstructed member count (`n * N_j`).
    pub counts: Vec<u64>,
    pub rounds: u64,
}

/// Runs secure center updates for one graph, dataset and configuration,
/// appending everything each node sees to a transcript store.
pub struct SecureKMeans<'a> {
    g: &'a Topology,
    dataset: &'a Dataset,
    cfg: &'a KMeansConfig,
    codec: FixedPointCodec,
    seeds: SeedTree,
    log: TranscriptStore,
}

impl<'a> SecureKMeans<'a> {
    pub fn new(g: &'a Topology, dataset: &'a Dataset, cfg: &'a KMeansConfig) -> Result<Self, KMeansError> {
        if dataset.is_empty() {
            return Err(KMeansError::EmptyDataset);
        }
        if g.n() != dataset.len() {
            return Err(KMeansError::SizeMismatch {
                graph: g.n(),
                data: dataset.len(),
            });
        }
        if cfg.k == 0 {
            return Err(KMeansError::NoCenters);
        }
        if !g.is_connected() {
            return Err(KMeansError::Disconnected);
        }
        cfg.protocol.validate()?;
        let codec = FixedPointCodec::new(dataset.len(), dataset.x_max(), cfg.scale)?;
        Ok(SecureKMeans {
            g,
            dataset,
            cfg,
            codec,
            seeds: SeedTree::new(cfg.master_seed),
            log: TranscriptStore::new(g.n()),
        })
    }

    /// Publishes the run header, including the (public) initial centers.
    pub fn publish_run_info(&mut self, init: &[Vec<f64>]) {
        self.log.publish(0, PublicEvent::RunInfo {
            n: self.g.n(),
            k: self.cfg.k,
            dim: self.dataset.dim(),
            scale: self.cfg.scale,
            modulus: self.codec.modulus().to_string(),
            edges: self.g.edges(),
            init_centers: init.to_vec(),
        });
    }

    pub fn codec(&self) -> &FixedPointCodec {
        &self.codec
    }

    pub fn layout(&self) -> EntryLayout {
        EntryLayout {
            k: self.cfg.k,
            dim: self.dataset.dim(),
        }
    }

    pub fn transcripts(&self) -> &TranscriptStore {
        &self.log
    }

    pub fn into_transcripts(self) -> TranscriptStore {
        self.log
    }

    /// Secure center update for iteration `t` under the given labels.
    pub fn update(&mut self, t: u64, labels: &[usize], prev: &[Vec<f64>]) -> Result<CenterUpdate, KMeansError> {
        let n = self.g.n();
        let layout = self.layout();
        let p = self.codec.modulus().clone();

        let mut inputs = Vec::with_capacity(n);
        for (i, &l) in labels.iter().enumerate() {
            let ext = build_extended(self.dataset.point(i), l, self.cfg.k)?;
            let encoded = layout.encode(&ext, &self.codec)?;
            self.log.record(i, t, NodeEvent::Input {
                label: l,
                entries: encoded.iter().map(|e| p.lift(e)).collect(),
            });
            inputs.push(encoded);
        }

        let randoms = exchange_randoms(self.g, layout.width(), &self.seeds, t, &p, Some(&mut self.log));
        let shares = make_shares(&inputs, &randoms, self.g)?;
        let published: Vec<Vec<BigUint>> = shares
            .own
            .iter()
            .map(|s| s.iter().map(|e| e.value().clone()).collect())
            .collect();
        for (i, s) in published.iter().enumerate() {
            self.log.record(i, t, NodeEvent::Share { values: s.clone() });
        }
        self.log.publish(t, PublicEvent::PublishedShares { shares: published });

        let values: Vec<Vec<BigInt>> = shares
            .own
            .iter()
            .map(|s| s.iter().map(|e| BigInt::from_biguint(Sign::Plus, e.value().clone())).collect())
            .collect();
        let trace = self.cfg.trace.then_some((&mut self.log, t));
        let outcome = run_protocol(self.g, &values, &self.cfg.protocol, t, trace)?;
        if !outcome.converged {
            return Err(KMeansError::NotConverged {
                iteration: t,
                rounds: outcome.rounds,
            });
        }

        let totals: Vec<BigInt> = (0..layout.width()).map(|c| share_total(&shares.own, c)).collect();
        let mut agreed: Option<Vec<FieldElement>> = None;
        for (i, s_bar) in outcome.s_bar.iter().enumerate() {
            let rec = s_bar
                .iter()
                .zip(&totals)
                .map(|(s, total)| reconstruct_checked(s, n, &p, total))
                .collect::<Result<Vec<_>, _>>()?;
            self.log.record(i, t, NodeEvent::Reconstructed {
                values: rec.iter().map(|e| e.value().clone()).collect(),
            });
            match &agreed {
                None => agreed = Some(rec),
                Some(a) if *a != rec => {
                    return Err(KMeansError::Internal(format!(
                        "node {i} reconstructed a different aggregate in iteration {t}"
                    )))
                }
                Some(_) => {}
            }
        }
        let agreed = agreed.expect("at least one node");
        let lifted: Vec<BigInt> = agreed.iter().map(|e| p.lift(e)).collect();
        self.log.publish(t, PublicEvent::Aggregate { totals: lifted.clone() });

        let k = self.cfg.k;
        let mut counts = Vec::with_capacity(k);
        for j in 0..k {
            let c = &lifted[layout.count_entry(j)];
            if c.is_negative() {
                return Err(KMeansError::Internal(format!("negative count {c} for cluster {j}")));
            }
            counts.push(c.to_u64().expect("count bounded by n"));
        }
        if counts.iter().sum::<u64>() != n as u64 {
            return Err(KMeansError::Internal(format!("counts {counts:?} do not sum to {n}")));
        }
        let sums: Vec<Vec<BigInt>> = (0..k)
            .map(|j| {
                (0..self.dataset.dim())
                    .map(|r| lifted[layout.sum_entry(j, r)].clone())
                    .collect()
            })
            .collect();
        let scale = self.codec.scale() as f64;
        let centers: Centers = (0..k)
            .map(|j| {
                if counts[j] == 0 {
                    prev[j].clone()
                } else {
                    sums[j]
                        .iter()
                        .map(|s| units_to_f64(s) / scale / counts[j] as f64)
                        .collect()
                }
            })
            .collect();
        for i in 0..n {
            self.log.record(i, t, NodeEvent::Centers { centers: centers.clone() });
        }
        self.log.publish(t, PublicEvent::Centers { centers: centers.clone() });
        Ok(CenterUpdate {
            centers,
            sums,
            counts,
            rounds: outcome.rounds,
        })
    }
}

/// Standalone secure center update at iteration `t`.
pub fn secure_center_update(
    g: &Topology,
    dataset: &Dataset,
    labels: &[usize],
    prev_centers: &[Vec<f64>],
    cfg: &KMeansConfig,
    t: u64,
) -> Result<CenterUpdate, KMeansError> {
    let mut secure = SecureKMeans::new(g, dataset, cfg)?;
    secure.publish_run_info(prev_centers);
    secure.update(t, labels, prev_centers)
}

/// Drives secure center updates with caller-supplied labels instead of the
/// assignment step, one update per entry of `script`. Used to stage exact
/// label histories for leakage audits.
pub fn run_scripted(
    g: &Topology,
    dataset: &Dataset,
    init: &[Vec<f64>],
    cfg: &KMeansConfig,
    script: &[Labels],
) -> Result<TranscriptStore, KMeansError> {
    check_init(dataset, init)?;
    let mut secure = SecureKMeans::new(g, dataset, cfg)?;
    secure.publish_run_info(init);
    let mut centers = init.to_vec();
    for (t, labels) in script.iter().enumerate() {
        if labels.len() != dataset.len() {
            return Err(KMeansError::SizeMismatch {
                graph: dataset.len(),
                data: labels.len(),
            });
        }
        centers = secure.update(t as u64, labels, &centers)?.centers;
    }
    Ok(secure.into_transcripts())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub centers: Centers,
    /// Assignment to the final centers.
    pub labels: Labels,
    /// Number of center updates performed.
    pub iterations: usize,
    /// Labels used by each center update.
    pub label_history: Vec<Labels>,
    /// Centers produced by each center update.
    pub center_history: Vec<Centers>,
    /// Averaging rounds per update (zero for the centralized reference).
    pub rounds: Vec<u64>,
    pub converged: bool,
    pub warnings: Vec<String>,
    pub transcripts: Option<TranscriptStore>,
}

fn check_init(dataset: &Dataset, init: &[Vec<f64>]) -> Result<(), KMeansError> {
    if init.is_empty() {
        return Err(KMeansError::NoCenters);
    }
    for c in init {
        if c.len() != dataset.dim() {
            return Err(KMeansError::Dimension {
                expected: dataset.dim(),
                got: c.len(),
            });
        }
    }
    Ok(())
}

/// Alternates assignment and `update` until labels repeat or `max_iters`
/// updates have run. Shared by the secure run and the reference.
fn lloyd_loop<F>(dataset: &Dataset, init: &[Vec<f64>], max_iters: usize, mut update: F) -> Result<RunResult, KMeansError>
where
    F: FnMut(u64, &[usize], &[Vec<f64>]) -> Result<(Centers, u64), KMeansError>,
{
    check_init(dataset, init)?;
    let mut centers: Centers = init.to_vec();
    let mut label_history = Vec::new();
    let mut center_history = Vec::new();
    let mut rounds = Vec::new();
    let mut converged = false;
    let mut labels = assign_all(dataset, &centers);
    for t in 0..max_iters {
        if label_history.last() == Some(&labels) {
            converged = true;
            break;
        }
        let (next, used) = update(t as u64, &labels, &centers)?;
        centers = next;
        label_history.push(labels);
        center_history.push(centers.clone());
        rounds.push(used);
        labels = assign_all(dataset, &centers);
    }
    if !converged && label_history.last() == Some(&labels) {
        converged = true;
    }
    let mut warnings = Vec::new();
    if init.len() > dataset.len() {
        warnings.push(format!("k = {} exceeds the number of nodes {}", init.len(), dataset.len()));
    }
    Ok(RunResult {
        centers,
        labels,
        iterations: center_history.len(),
        label_history,
        center_history,
        rounds,
        converged,
        warnings,
        transcripts: None,
    })
}

/// Secure distributed k-means. `init.len()` must equal `cfg.k`.
pub fn run_kmeans(g: &Topology, dataset: &Dataset, init: &[Vec<f64>], cfg: &KMeansConfig) -> Result<RunResult, KMeansError> {
    if init.len() != cfg.k {
        return Err(KMeansError::Dimension {
            expected: cfg.k,
            got: init.len(),
        });
    }
    check_init(dataset, init)?;
    let mut secure = SecureKMeans::new(g, dataset, cfg)?;
    secure.publish_run_info(init);
    let mut result = lloyd_loop(dataset, init, cfg.max_iters, |t, labels, prev| {
        let u = secure.update(t, labels, prev)?;
        Ok((u.centers, u.rounds))
    })?;
    result.transcripts = Some(secure.into_transcripts());
    Ok(result)
}

/// Plain Lloyd iteration with the same tie-break and empty-cluster rules.
pub fn centralized_oracle(dataset: &Dataset, init: &[Vec<f64>], max_iters: usize) -> Result<RunResult, KMeansError> {
    let k = init.len();
    lloyd_loop(dataset, init, max_iters, |_, labels, prev| {
        let mut sums = vec![vec![0.0; dataset.dim()]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in dataset.points().iter().zip(labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(x) {
                *s += v;
            }
        }
        let centers = (0..k)
            .map(|j| {
                if counts[j] == 0 {
                    prev[j].clone()
                } else {
                    sums[j].iter().map(|s| s / counts[j] as f64).collect()
                }
            })
            .collect();
        Ok((centers, 0))
    })
}

/// `k` centers drawn uniformly from the data's bounding box.
pub fn init_from_bounding_box(dataset: &Dataset, k: usize, seed: u64) -> Centers {
    let dim = dataset.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in dataset.points() {
        for r in 0..dim {
            lo[r] = lo[r].min(p[r]);
            hi[r] = hi[r].max(p[r]);
        }
    }
    if dataset.is_empty() {
        lo = vec![-dataset.x_max(); dim];
        hi = vec![dataset.x_max(); dim];
    }
    let mut rng = SeedTree::new(seed).stream("init-centers", &[]);
    (0..k)
        .map(|_| {
            (0..dim)
                .map(|r| if hi[r] > lo[r] { rng.random_range(lo[r]..=hi[r]) } else { lo[r] })
                .collect()
        })
        .collect()
}

/// Within-cluster sum of squared distances.
pub fn inertia(dataset: &Dataset, centers: &[Vec<f64>], labels: &[usize]) -> f64 {
    dataset
        .points()
        .iter()
        .zip(labels)
        .map(|(x, &l)| x.iter().zip(&centers[l]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Largest absolute coordinate difference between two center sets.
pub fn max_center_deviation(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max)
}
