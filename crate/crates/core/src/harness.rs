//! Experiment plumbing: configuration, synthetic data, end-to-end runs and
//! the files they leave behind.
//!
//! A config file is flat `key = value` text with dotted section names, e.g.
//!
//! ```text
//! topology.kind = ring
//! topology.nodes = 6
//! kmeans.k = 2
//! data.source = inline
//! data.values = 1;2;3;10;11;12
//! run.master_seed = 7
//! ```
//!
//! Seeds that are not given explicitly are derived from `run.master_seed`,
//! so a sweep over master seeds varies everything.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::adversary::{coalition_knowledge, leakage_report, AdversaryError, LeakageReport, LeakageSummary};
use crate::averaging::ProtocolChoice;
use crate::kmeans::{
    centralized_oracle, init_from_bounding_box, max_center_deviation, run_kmeans, Centers, Dataset, KMeansConfig,
    KMeansError, Labels, RunResult,
};
use crate::seed::SeedTree;
use crate::topology::{HonestPartition, NodeId, Topology, TopologyError};
use crate::transcript::{TranscriptError, TranscriptStore};

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "DKMEANS_OUT";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
    #[error("missing config key `{0}`")]
    Missing(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    KMeans(#[from] KMeansError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Adversary(#[from] AdversaryError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    fs::read_to_string(path).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq)]
pub enum TopologySpec {
    Ring,
    Complete,
    Star,
    Path,
    ErdosRenyi { prob: f64 },
    Geometric { radius: f64 },
    EdgeList(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub means: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub std_dev: f64,
    /// Round every sample to the nearest integer.
    pub integer: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Mixture(MixtureSpec),
    File(PathBuf),
    Inline(Vec<Vec<f64>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub source: DataSource,
    pub dim: usize,
    pub x_max: f64,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corruption {
    Set(BTreeSet<NodeId>),
    Fraction { fraction: f64, seed: Option<u64> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitSpec {
    BoundingBox { seed: Option<u64> },
    Explicit(Centers),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub run_id: String,
    pub nodes: usize,
    pub topology: TopologySpec,
    pub topology_seed: Option<u64>,
    pub k: usize,
    pub max_iters: usize,
    pub init: InitSpec,
    pub data: DataSpec,
    pub scale: u64,
    pub protocol: ProtocolChoice,
    pub corruption: Corruption,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub trace: bool,
}

struct RawConfig {
    entries: BTreeMap<String, (usize, String)>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| HarnessError::Config {
                line: idx + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), (idx + 1, value.trim().to_string())).is_some() {
                return Err(HarnessError::Config {
                    line: idx + 1,
                    reason: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(RawConfig { entries })
    }

    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.entries.remove(key)
    }

    fn get<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>, HarnessError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| HarnessError::Config {
                line,
                reason: format!("cannot parse `{key}` from {v:?}"),
            }),
        }
    }

    fn require<T: std::str::FromStr>(&mut self, key: &str) -> Result<T, HarnessError> {
        self.get(key)?.ok_or_else(|| HarnessError::Missing(key.into()))
    }

    fn rows(&mut self, key: &str) -> Result<Option<Vec<Vec<f64>>>, HarnessError> {
        match self.take(key) {
            None => Ok(None),
            Some((line, v)) => parse_rows(&v).map(Some).map_err(|reason| HarnessError::Config { line, reason }),
        }
    }

    fn finish(self) -> Result<(), HarnessError> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((key, (line, _))) => Err(HarnessError::Config {
                line,
                reason: format!("unknown key `{key}`"),
            }),
        }
    }
}

/// `1,2;3,4` -> `[[1, 2], [3, 4]]`.
fn parse_rows(v: &str) -> Result<Vec<Vec<f64>>, String> {
    v.split(';')
        .map(|row| {
            row.split(',')
                .map(|x| x.trim().parse::<f64>().map_err(|_| format!("bad number {x:?}")))
                .collect()
        })
        .collect()
}

fn parse_ids(v: &str) -> Result<BTreeSet<NodeId>, String> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("bad node id {s:?}")))
        .collect()
}

impl SimConfig {
    /// Reads a config file; relative data and graph paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = read_file(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self, HarnessError> {
        let mut raw = RawConfig::parse(text)?;
        let master_seed: u64 = raw.require("run.master_seed")?;
        let run_id = raw.get("run.id")?.unwrap_or_else(|| "run".to_string());
        let output_dir = match raw.get::<String>("run.output_dir")? {
            Some(d) => PathBuf::from(d),
            None => default_output_dir(),
        };
        let trace = raw.get("run.trace")?.unwrap_or(false);

        let kind: String = raw.require("topology.kind")?;
        let topology = match kind.as_str() {
            "ring" => TopologySpec::Ring,
            "complete" => TopologySpec::Complete,
            "star" => TopologySpec::Star,
            "path" => TopologySpec::Path,
            "erdos_renyi" => TopologySpec::ErdosRenyi {
                prob: raw.require("topology.prob")?,
            },
            "geometric" => TopologySpec::Geometric {
                radius: raw.require("topology.radius")?,
            },
            "file" => TopologySpec::EdgeList(base.join(raw.require::<String>("topology.file")?)),
            other => return Err(HarnessError::Invalid(format!("unknown topology kind {other:?}"))),
        };
        let topology_seed = raw.get("topology.seed")?;
        let nodes_key: Option<usize> = raw.get("topology.nodes")?;

        let dim = raw.get("data.dim")?.unwrap_or(1);
        let x_max: f64 = raw.require("data.x_max")?;
        let data_seed = raw.get("data.seed")?;
        let source: String = raw.get("data.source")?.unwrap_or_else(|| "mixture".into());
        let source = match source.as_str() {
            "mixture" => {
                let means = raw.rows("data.means")?.ok_or_else(|| HarnessError::Missing("data.means".into()))?;
                let weights = match raw.rows("data.weights")? {
                    Some(w) => w.concat(),
                    None => vec![1.0 / means.len() as f64; means.len()],
                };
                DataSource::Mixture(MixtureSpec {
                    means,
                    weights,
                    std_dev: raw.require("data.std")?,
                    integer: raw.get("data.integer")?.unwrap_or(false),
                })
            }
            "file" => DataSource::File(base.join(raw.require::<String>("data.file")?)),
            "inline" => DataSource::Inline(
                raw.rows("data.values")?
                    .ok_or_else(|| HarnessError::Missing("data.values".into()))?,
            ),
            other => return Err(HarnessError::Invalid(format!("unknown data source {other:?}"))),
        };
        let nodes = match (&source, nodes_key) {
            (_, Some(n)) => n,
            (DataSource::Inline(rows), None) => rows.len(),
            _ => return Err(HarnessError::Missing("topology.nodes".into())),
        };

        let k = raw.require("kmeans.k")?;
        let max_iters = raw.get("kmeans.iterations")?.unwrap_or(50);
        let init = match raw.rows("kmeans.init")? {
            Some(c) => InitSpec::Explicit(c),
            None => InitSpec::BoundingBox {
                seed: raw.get("kmeans.init_seed")?,
            },
        };
        let scale = raw.get("codec.scale")?.unwrap_or(1);

        let proto: String = raw.get("protocol.kind")?.unwrap_or_else(|| "sync".into());
        let protocol = match proto.as_str() {
            "sync" => ProtocolChoice::SyncConsensus {
                max_rounds: raw.get("protocol.budget")?.unwrap_or(100_000),
            },
            "gossip" => ProtocolChoice::RandomGossip {
                max_pairings: raw.get("protocol.budget")?.unwrap_or(1_000_000),
                seed: raw.get("protocol.seed")?.unwrap_or(master_seed),
            },
            "tree" => ProtocolChoice::ExactTreeSum,
            other => return Err(HarnessError::Invalid(format!("unknown protocol {other:?}"))),
        };

        let corruption = match (
            raw.get::<String>("adversary.corrupted")?,
            raw.get::<f64>("adversary.fraction")?,
        ) {
            (Some(_), Some(_)) => {
                return Err(HarnessError::Invalid(
                    "give either adversary.corrupted or adversary.fraction, not both".into(),
                ))
            }
            (Some(ids), None) => Corruption::Set(parse_ids(&ids).map_err(HarnessError::Invalid)?),
            (None, Some(fraction)) => Corruption::Fraction {
                fraction,
                seed: raw.get("adversary.seed")?,
            },
            (None, None) => Corruption::Set(BTreeSet::new()),
        };
        raw.finish()?;

        let cfg = SimConfig {
            run_id,
            nodes,
            topology,
            topology_seed,
            k,
            max_iters,
            init,
            data: DataSpec {
                source,
                dim,
                x_max,
                seed: data_seed,
            },
            scale,
            protocol,
            corruption,
            master_seed,
            output_dir,
            trace,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.data.dim == 0 {
            return bad("dimension must be at least 1".into());
        }
        if self.scale == 0 {
            return bad("codec scale must be positive".into());
        }
        if !(self.data.x_max.is_finite() && self.data.x_max > 0.0) {
            return bad(format!("x_max must be positive, got {}", self.data.x_max));
        }
        self.protocol
            .validate()
            .map_err(|e| HarnessError::Invalid(e.to_string()))?;
        match &self.corruption {
            Corruption::Set(ids) => {
                if let Some(bad_id) = ids.iter().find(|&&i| i >= self.nodes) {
                    return bad(format!("corrupted node {bad_id} is not in a network of {}", self.nodes));
                }
            }
            Corruption::Fraction { fraction, .. } => {
                if !(0.0..=1.0).contains(fraction) {
                    return bad(format!("corruption fraction {fraction} outside [0, 1]"));
                }
            }
        }
        if let InitSpec::Explicit(c) = &self.init {
            if c.len() != self.k || c.iter().any(|r| r.len() != self.data.dim) {
                return bad(format!("kmeans.init must list {} centers of dimension {}", self.k, self.data.dim));
            }
        }
        if let DataSource::Mixture(m) = &self.data.source {
            m.validate(self.data.dim)?;
        }
        Ok(())
    }

    fn seed_for(&self, explicit: Option<u64>, domain: &str) -> u64 {
        explicit.unwrap_or_else(|| {
            let mut rng = SeedTree::new(self.master_seed).stream(domain, &[]);
            rng.random()
        })
    }

    pub fn build_topology(&self) -> Result<Topology, HarnessError> {
        let seed = self.seed_for(self.topology_seed, "topology");
        let g = match &self.topology {
            TopologySpec::Ring => Topology::ring(self.nodes),
            TopologySpec::Complete => Topology::complete(self.nodes),
            TopologySpec::Star => Topology::star(self.nodes),
            TopologySpec::Path => Topology::path(self.nodes),
            TopologySpec::ErdosRenyi { prob } => Topology::erdos_renyi(self.nodes, *prob, seed),
            TopologySpec::Geometric { radius } => Topology::random_geometric(self.nodes, *radius, seed),
            TopologySpec::EdgeList(path) => Topology::parse_edge_list(&read_file(path)?)?,
        };
        if g.n() != self.nodes {
            return Err(HarnessError::Invalid(format!("graph has {} nodes, config says {}", g.n(), self.nodes)));
        }
        Ok(g)
    }

    pub fn build_dataset(&self) -> Result<Dataset, HarnessError> {
        let d = &self.data;
        let data = match &d.source {
            DataSource::Mixture(m) => generate_data(m, self.nodes, d.dim, d.x_max, self.seed_for(d.seed, "data"))?,
            DataSource::File(path) => Dataset::parse_csv(&read_file(path)?, d.x_max)?,
            DataSource::Inline(rows) => Dataset::new(d.dim, d.x_max, rows.clone())?,
        };
        if data.len() != self.nodes {
            return Err(HarnessError::Invalid(format!("dataset has {} rows for {} nodes", data.len(), self.nodes)));
        }
        if data.dim() != d.dim {
            return Err(HarnessError::Invalid(format!("dataset dimension {} but data.dim = {}", data.dim(), d.dim)));
        }
        Ok(data)
    }

    pub fn initial_centers(&self, data: &Dataset) -> Centers {
        match &self.init {
            InitSpec::Explicit(c) => c.clone(),
            InitSpec::BoundingBox { seed } => init_from_bounding_box(data, self.k, self.seed_for(*seed, "init")),
        }
    }

    pub fn corrupted(&self) -> BTreeSet<NodeId> {
        match &self.corruption {
            Corruption::Set(ids) => ids.clone(),
            Corruption::Fraction { fraction, seed } => {
                let count = (fraction * self.nodes as f64).round() as usize;
                let mut rng = SeedTree::new(self.seed_for(*seed, "corruption")).stream("corruption", &[]);
                sample(&mut rng, self.nodes, count.min(self.nodes)).into_iter().collect()
            }
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            k: self.k,
            max_iters: self.max_iters,
            protocol: self.protocol.clone(),
            scale: self.scale,
            master_seed: self.master_seed,
            trace: self.trace,
        }
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_ENV).map_or_else(|| PathBuf::from("dkmeans-out"), PathBuf::from)
}

impl MixtureSpec {
    pub fn validate(&self, dim: usize) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Invalid(m));
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return bad(format!("{} means but {} weights", self.means.len(), self.weights.len()));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != dim) {
            return bad(format!("mixture mean {m:?} does not have dimension {dim}"));
        }
        if self.weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("mixture weights must be nonnegative".into());
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights sum to {}, not 1", self.weights.iter().sum::<f64>()));
        }
        if !(self.std_dev.is_finite() && self.std_dev >= 0.0) {
            return bad(format!("standard deviation {} is invalid", self.std_dev));
        }
        Ok(())
    }
}

/// Seeded Gaussian-mixture samples, one per node, clipped to `[-x_max, x_max]`.
pub fn generate_data(spec: &MixtureSpec, n: usize, dim: usize, x_max: f64, seed: u64) -> Result<Dataset, HarnessError> {
    spec.validate(dim)?;
    let pick = WeightedIndex::new(&spec.weights).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let noise = Normal::new(0.0, spec.std_dev).map_err(|e| HarnessError::Invalid(e.to_string()))?;
    let mut rng = SeedTree::new(seed).stream("data", &[]);
    let points = (0..n)
        .map(|_| {
            let mean = &spec.means[pick.sample(&mut rng)];
            mean.iter()
                .map(|m| {
                    let v = m + noise.sample(&mut rng);
                    let v = if spec.integer { v.round() } else { v };
                    v.clamp(-x_max, x_max)
                })
                .collect()
        })
        .collect();
    Ok(Dataset::new(dim, x_max, points)?)
}

/// Outcome of one end-to-end run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub protocol: String,
    pub kmeans_converged: bool,
    pub averaging_converged: bool,
    pub iterations: usize,
    /// Averaging rounds used by each center update.
    pub rounds: Vec<u64>,
    pub center_trajectory: Vec<Centers>,
    pub label_agreement: bool,
    pub max_center_deviation: f64,
    pub leakage_perfect: usize,
    pub leakage_bounded: usize,
    pub leakage_full: usize,
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    run_id: &'a str,
    protocol: &'a str,
    kmeans_converged: bool,
    averaging_converged: bool,
    iterations: usize,
    total_rounds: u64,
    max_rounds: u64,
    label_agreement: bool,
    max_center_deviation: f64,
    leakage_perfect: usize,
    leakage_bounded: usize,
    leakage_full: usize,
}

impl MetricsRecord {
    pub fn success(&self) -> bool {
        self.kmeans_converged && self.averaging_converged
    }

    fn row(&self) -> MetricsRow<'_> {
        MetricsRow {
            run_id: &self.run_id,
            protocol: &self.protocol,
            kmeans_converged: self.kmeans_converged,
            averaging_converged: self.averaging_converged,
            iterations: self.iterations,
            total_rounds: self.rounds.iter().sum(),
            max_rounds: self.rounds.iter().copied().max().unwrap_or(0),
            label_agreement: self.label_agreement,
            max_center_deviation: self.max_center_deviation,
            leakage_perfect: self.leakage_perfect,
            leakage_bounded: self.leakage_bounded,
            leakage_full: self.leakage_full,
        }
    }

    /// Header plus one row per record.
    pub fn to_csv(records: &[MetricsRecord]) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in records {
            w.serialize(r.row())?;
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Invalid(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let rounds: Vec<String> = self.rounds.iter().map(ToString::to_string).collect();
        let _ = writeln!(out, "run_id = {}", self.run_id);
        let _ = writeln!(out, "protocol = {}", self.protocol);
        let _ = writeln!(out, "kmeans_converged = {}", self.kmeans_converged);
        let _ = writeln!(out, "averaging_converged = {}", self.averaging_converged);
        let _ = writeln!(out, "iterations = {}", self.iterations);
        let _ = writeln!(out, "rounds = {}", rounds.join(","));
        let _ = writeln!(out, "label_agreement = {}", self.label_agreement);
        let _ = writeln!(out, "max_center_deviation = {}", self.max_center_deviation);
        let _ = writeln!(
            out,
            "leakage = perfect:{} bounded:{} full:{}",
            self.leakage_perfect, self.leakage_bounded, self.leakage_full
        );
        for (t, c) in self.center_trajectory.iter().enumerate() {
            let _ = writeln!(out, "centers.{} = {}", t + 1, format_rows(c));
        }
        out
    }
}

fn format_rows(rows: &[Vec<f64>]) -> String {
    rows.iter()
        .map(|r| r.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

/// One center per line, comma-separated coordinates.
pub fn centers_text(centers: &[Vec<f64>]) -> String {
    centers
        .iter()
        .map(|c| c.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

pub fn labels_text(labels: &Labels) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

pub struct ExperimentOutcome {
    pub metrics: MetricsRecord,
    /// `None` when the secure run aborted.
    pub secure: Option<RunResult>,
    pub oracle: RunResult,
    pub report: Option<LeakageReport>,
}

/// Centralized Lloyd on the configured data and init; writes `centers.txt` and `labels.txt`.
pub fn run_oracle(cfg: &SimConfig, out: &Path) -> Result<RunResult, HarnessError> {
    let data = cfg.build_dataset()?;
    let init = cfg.initial_centers(&data);
    let res = centralized_oracle(&data, &init, cfg.max_iters)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("centers.txt"), centers_text(&res.centers))?;
    write_file(&out.join("labels.txt"), labels_text(&res.labels))?;
    Ok(res)
}

/// Secure run, reference run and leakage audit; everything lands in `cfg.output_dir`.
pub fn run_experiment(cfg: &SimConfig) -> Result<ExperimentOutcome, HarnessError> {
    cfg.validate()?;
    let g = cfg.build_topology()?;
    if !g.is_connected() {
        return Err(KMeansError::Disconnected.into());
    }
    let data = cfg.build_dataset()?;
    let init = cfg.initial_centers(&data);
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_file(&out.join("graph.txt"), g.to_edge_list())?;
    write_file(&out.join("data.csv"), data.to_csv())?;

    let oracle = centralized_oracle(&data, &init, cfg.max_iters)?;
    let corrupted = cfg.corrupted();
    let (secure, averaging_converged) = match run_kmeans(&g, &data, &init, &cfg.kmeans_config()) {
        Ok(r) => (Some(r), true),
        Err(KMeansError::NotConverged { .. }) => (None, false),
        Err(e) => return Err(e.into()),
    };

    let mut report = None;
    let mut summary = LeakageSummary::default();
    if let Some(res) = &secure {
        let store = res.transcripts.as_ref().expect("secure runs keep transcripts");
        store.write_dir(&out.join("transcripts"))?;
        write_file(&out.join("centers.txt"), centers_text(&res.centers))?;
        write_file(&out.join("labels.txt"), labels_text(&res.labels))?;
        let r = analyze_store(store, &g, &corrupted)?;
        write_file(&out.join("leakage.txt"), r.to_text())?;
        summary = r.summary();
        report = Some(r);
    }

    let metrics = MetricsRecord {
        run_id: cfg.run_id.clone(),
        protocol: cfg.protocol.name().to_string(),
        kmeans_converged: secure.as_ref().is_some_and(|r| r.converged),
        averaging_converged,
        iterations: secure.as_ref().map_or(0, |r| r.iterations),
        rounds: secure.as_ref().map_or_else(Vec::new, |r| r.rounds.clone()),
        center_trajectory: secure.as_ref().map_or_else(Vec::new, |r| r.center_history.clone()),
        label_agreement: secure.as_ref().is_some_and(|r| r.labels == oracle.labels),
        max_center_deviation: secure
            .as_ref()
            .map_or(f64::INFINITY, |r| max_center_deviation(&r.centers, &oracle.centers)),
        leakage_perfect: summary.perfect,
        leakage_bounded: summary.bounded,
        leakage_full: summary.full,
    };
    write_file(&out.join("metrics.csv"), MetricsRecord::to_csv(std::slice::from_ref(&metrics))?)?;
    write_file(&out.join("metrics.txt"), metrics.to_text())?;
    Ok(ExperimentOutcome {
        metrics,
        secure,
        oracle,
        report,
    })
}

pub fn analyze_store(
    store: &TranscriptStore,
    g: &Topology,
    corrupted: &BTreeSet<NodeId>,
) -> Result<LeakageReport, HarnessError> {
    let part = HonestPartition::from_corrupted(g.n(), corrupted.iter().copied())?;
    let knowledge = coalition_knowledge(store, &part, g)?;
    Ok(leakage_report(&knowledge))
}

/// Offline audit of a run directory written by [`run_experiment`].
pub fn analyze_dir(dir: &Path, corrupted: &BTreeSet<NodeId>) -> Result<LeakageReport, HarnessError> {
    let g = Topology::parse_edge_list(&read_file(&dir.join("graph.txt"))?)?;
    let store = TranscriptStore::read_dir(&dir.join("transcripts"))?;
    analyze_store(&store, &g, corrupted)
}

/// Runs `trials` copies with master seeds `master_seed + i`, each in
/// `output_dir/trial_NNN`, then writes `sweep.csv` with one row per trial.
pub fn sweep(cfg: &SimConfig, trials: usize) -> Result<Vec<MetricsRecord>, HarnessError> {
    let records = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut c = cfg.clone();
            c.master_seed = cfg.master_seed.wrapping_add(i as u64);
            if let ProtocolChoice::RandomGossip { seed, .. } = &mut c.protocol {
                *seed = seed.wrapping_add(i as u64);
            }
            c.run_id = format!("{}-{i:03}", cfg.run_id);
            c.output_dir = cfg.output_dir.join(format!("trial_{i:03}"));
            run_experiment(&c).map(|o| o.metrics)
        })
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    write_file(&cfg.output_dir.join("sweep.csv"), MetricsRecord::to_csv(&records)?)?;
    Ok(records)
}
