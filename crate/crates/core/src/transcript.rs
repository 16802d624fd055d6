//! Per-node message transcripts and the public board, plus their on-disk form.
//!
//! A run directory holds `node_NNNN.tr` for every node and `public.tr` for
//! values every participant observes. Each file is a sequence of records
//! framed as `<byte-length>:<json>\n`.

use std::fs;
use std::io;
use std::path::Path;

use num_bigint::{BigInt, BigUint};
use num_rational::BigRational;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::NodeId;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("corrupt record in {path} at byte {offset}: {reason}")]
    Corrupt { path: String, offset: usize, reason: String },
    #[error("transcript directory {0} has no node files")]
    Empty(String),
}

mod decimal {
    use num_bigint::{BigInt, BigUint};
    use num_rational::BigRational;
    use serde::{de::Error, Deserialize, Deserializer, Serializer};
    use std::str::FromStr;

    fn ser<T: ToString, S: Serializer>(items: &[T], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(items.iter().map(ToString::to_string))
    }

    fn de<'de, T: FromStr, D: Deserializer<'de>>(d: D) -> Result<Vec<T>, D::Error> {
        Vec::<String>::deserialize(d)?
            .iter()
            .map(|s| T::from_str(s).map_err(|_| D::Error::custom(format!("bad number {s:?}"))))
            .collect()
    }

    pub mod unsigned {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[BigUint], s: S) -> Result<S::Ok, S::Error> {
            ser(v, s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigUint>, D::Error> {
            de(d)
        }
    }

    pub mod signed {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[BigInt], s: S) -> Result<S::Ok, S::Error> {
            ser(v, s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigInt>, D::Error> {
            de(d)
        }
    }

    pub mod rational {
        use super::*;
        pub fn serialize<S: Serializer>(v: &[BigRational], s: S) -> Result<S::Ok, S::Error> {
            ser(v, s)
        }
        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BigRational>, D::Error> {
            de(d)
        }
    }

    pub mod nested_unsigned {
        use super::*;
        use serde::ser::SerializeSeq;

        struct Row<'a>(&'a [BigUint]);
        impl serde::Serialize for Row<'_> {
            fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                super::unsigned::serialize(self.0, s)
            }
        }

        pub fn serialize<S: Serializer>(v: &[Vec<BigUint>], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for row in v {
                seq.serialize_element(&Row(row))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<BigUint>>, D::Error> {
            Vec::<Vec<String>>::deserialize(d)?
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|s| BigUint::from_str(s).map_err(|_| D::Error::custom(format!("bad number {s:?}"))))
                        .collect()
                })
                .collect()
        }
    }
}

/// Something a single node sent, received, computed or observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeEvent {
    /// The node's own label and extended input vector in field units.
    Input {
        label: usize,
        #[serde(with = "decimal::signed")]
        entries: Vec<BigInt>,
    },
    SentRandoms {
        to: NodeId,
        #[serde(with = "decimal::unsigned")]
        values: Vec<BigUint>,
    },
    ReceivedRandoms {
        from: NodeId,
        #[serde(with = "decimal::unsigned")]
        values: Vec<BigUint>,
    },
    /// The node's obfuscated share, the input it hands to the averaging protocol.
    Share {
        #[serde(with = "decimal::unsigned")]
        values: Vec<BigUint>,
    },
    /// A value received during averaging; only recorded when tracing.
    AveragingMessage {
        round: u64,
        from: NodeId,
        #[serde(with = "decimal::rational")]
        values: Vec<BigRational>,
    },
    /// `round(s_bar * n) mod p` for every entry.
    Reconstructed {
        #[serde(with = "decimal::unsigned")]
        values: Vec<BigUint>,
    },
    Centers { centers: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub event: NodeEvent,
}

/// Values visible to every participant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PublicEvent {
    /// Header written once per run.
    RunInfo {
        n: usize,
        k: usize,
        dim: usize,
        scale: u64,
        modulus: String,
        edges: Vec<(NodeId, NodeId)>,
        init_centers: Vec<Vec<f64>>,
    },
    /// Obfuscated shares of every node, treated as observable by the coalition.
    PublishedShares {
        #[serde(with = "decimal::nested_unsigned")]
        shares: Vec<Vec<BigUint>>,
    },
    /// Network-wide totals `n * Y(t)` (field units) followed by `n * N(t)`.
    Aggregate {
        #[serde(with = "decimal::signed")]
        totals: Vec<BigInt>,
    },
    Centers { centers: Vec<Vec<f64>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicRecord {
    pub iteration: u64,
    #[serde(flatten)]
    pub event: PublicEvent,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeTranscript {
    pub node: NodeId,
    pub records: Vec<NodeRecord>,
}

impl NodeTranscript {
    pub fn at(&self, iteration: u64) -> impl Iterator<Item = &NodeEvent> {
        self.records
            .iter()
            .filter(move |r| r.iteration == iteration)
            .map(|r| &r.event)
    }
}

/// Append-only log of every node's view plus the public board.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TranscriptStore {
    nodes: Vec<NodeTranscript>,
    public: Vec<PublicRecord>,
}

impl TranscriptStore {
    pub fn new(n: usize) -> Self {
        TranscriptStore {
            nodes: (0..n)
                .map(|node| NodeTranscript {
                    node,
                    records: Vec::new(),
                })
                .collect(),
            public: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn record(&mut self, node: NodeId, iteration: u64, event: NodeEvent) {
        self.nodes[node].records.push(NodeRecord { iteration, event });
    }

    pub fn publish(&mut self, iteration: u64, event: PublicEvent) {
        self.public.push(PublicRecord { iteration, event });
    }

    pub fn node(&self, i: NodeId) -> &NodeTranscript {
        &self.nodes[i]
    }

    pub fn nodes(&self) -> &[NodeTranscript] {
        &self.nodes
    }

    pub fn public(&self) -> &[PublicRecord] {
        &self.public
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), TranscriptError> {
        let io_err = |path: &Path| {
            let path = path.display().to_string();
            move |source| TranscriptError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for t in &self.nodes {
            let path = dir.join(node_file_name(t.node));
            fs::write(&path, frame(&t.records)).map_err(io_err(&path))?;
        }
        let path = dir.join("public.tr");
        fs::write(&path, frame(&self.public)).map_err(io_err(&path))
    }

    pub fn read_dir(dir: &Path) -> Result<Self, TranscriptError> {
        let mut nodes = Vec::new();
        loop {
            let path = dir.join(node_file_name(nodes.len()));
            if !path.exists() {
                break;
            }
            let bytes = fs::read(&path).map_err(|source| TranscriptError::Io {
                path: path.display().to_string(),
                source,
            })?;
            nodes.push(NodeTranscript {
                node: nodes.len(),
                records: unframe(&bytes, &path)?,
            });
        }
        if nodes.is_empty() {
            return Err(TranscriptError::Empty(dir.display().to_string()));
        }
        let path = dir.join("public.tr");
        let bytes = fs::read(&path).map_err(|source| TranscriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(TranscriptStore {
            nodes,
            public: unframe(&bytes, &path)?,
        })
    }
}

pub fn node_file_name(node: NodeId) -> String {
    format!("node_{node:04}.tr")
}

fn frame<T: Serialize>(records: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        let json = serde_json::to_vec(r).expect("transcript records serialize");
        out.extend_from_slice(json.len().to_string().as_bytes());
        out.push(b':');
        out.extend_from_slice(&json);
        out.push(b'\n');
    }
    out
}

fn unframe<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>, TranscriptError> {
    let corrupt = |offset: usize, reason: String| TranscriptError::Corrupt {
        path: path.display().to_string(),
        offset,
        reason,
    };
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let colon = bytes[pos..]
            .iter()
            .position(|&b| b == b':')
            .ok_or_else(|| corrupt(pos, "missing length prefix".into()))?;
        let len: usize = std::str::from_utf8(&bytes[pos..pos + colon])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(pos, "bad length prefix".into()))?;
        let start = pos + colon + 1;
        let end = start + len;
        if bytes.get(end) != Some(&b'\n') {
            return Err(corrupt(start, "record length does not match payload".into()));
        }
        out.push(serde_json::from_slice(&bytes[start..end]).map_err(|e| corrupt(start, e.to_string()))?);
        pos = end + 1;
    }
    Ok(out)
}
