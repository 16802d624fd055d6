//! Additive randomization of node inputs over pairwise random offsets, and
//! reconstruction of the true aggregate from the obfuscated average.
//!
//! Inputs are vectors of field elements of a common width so one exchange
//! round can mask a whole batch of entries at once; a scalar input is a
//! vector of width one.

use std::collections::BTreeMap;

use num_bigint::{BigInt, BigUint, Sign};
use num_rational::BigRational;
use num_traits::{One, Signed};
use rand::RngCore;
use thiserror::Error;

use crate::field::{FieldElement, FieldError, FieldModulus};
use crate::seed::SeedTree;
use crate::topology::{NodeId, Topology};
use crate::transcript::{NodeEvent, TranscriptStore};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SharingError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("expected inputs for {expected} nodes, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("node {node} has an input of width {got}, expected {expected}")]
    Width { node: NodeId, expected: usize, got: usize },
    #[error("no random offset recorded for edge direction ({0}, {1})")]
    MissingRandom(NodeId, NodeId),
    #[error("s_bar * n = {scaled} does not round unambiguously")]
    Ambiguous { scaled: BigRational },
    #[error("s_bar * n = {scaled} is not within 1/2 of the share total {total}")]
    NotConverged { scaled: BigRational, total: BigInt },
}

/// `r_i^k` for every ordered direction `(i, k)` of every edge.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseRandoms {
    width: usize,
    values: BTreeMap<(NodeId, NodeId), Vec<FieldElement>>,
}

impl PairwiseRandoms {
    pub fn from_map(width: usize, values: BTreeMap<(NodeId, NodeId), Vec<FieldElement>>) -> Self {
        PairwiseRandoms { width, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, from: NodeId, to: NodeId) -> Option<&[FieldElement]> {
        self.values.get(&(from, to)).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(NodeId, NodeId), &Vec<FieldElement>)> {
        self.values.iter()
    }

    /// Replaces every offset by zero; used to demonstrate what an unmasked share leaks.
    pub fn zeroed(&self) -> Self {
        PairwiseRandoms {
            width: self.width,
            values: self
                .values
                .iter()
                .map(|(k, v)| (*k, v.iter().map(|e| e.modulus().zero()).collect()))
                .collect(),
        }
    }
}

/// Obfuscated shares: `s_i^k` per edge direction and `s_i^i` per node.
#[derive(Clone, Debug, PartialEq)]
pub struct ShareSet {
    pub edge: BTreeMap<(NodeId, NodeId), Vec<FieldElement>>,
    pub own: Vec<Vec<FieldElement>>,
}

/// Uniform draw from `[0, p)` by rejection on `bits(p)` random bits.
pub fn uniform_below(rng: &mut impl RngCore, p: &FieldModulus) -> FieldElement {
    let bound = p.value();
    let bits = bound.bits();
    let bytes = bits.div_ceil(8) as usize;
    let excess = (bytes as u64 * 8 - bits) as u32;
    let mut buf = vec![0u8; bytes];
    loop {
        rng.fill_bytes(&mut buf);
        buf[0] &= 0xffu8 >> excess;
        let v = BigUint::from_bytes_be(&buf);
        if &v < bound {
            return p.element(v);
        }
    }
}

/// One synchronous exchange round: every node draws `width` uniform values
/// per neighbor from its own stream (keyed by `round` and node id) and sends
/// them. Draws are logged as sent/received in both endpoints' transcripts.
pub fn exchange_randoms(
    g: &Topology,
    width: usize,
    seeds: &SeedTree,
    round: u64,
    p: &FieldModulus,
    mut log: Option<&mut TranscriptStore>,
) -> PairwiseRandoms {
    let mut values = BTreeMap::new();
    for i in 0..g.n() {
        let mut rng = seeds.stream("pairwise-randoms", &[round, i as u64]);
        for &k in g.neighbors(i).expect("node in range") {
            let draw: Vec<FieldElement> = (0..width).map(|_| uniform_below(&mut rng, p)).collect();
            if let Some(log) = log.as_deref_mut() {
                let raw: Vec<BigUint> = draw.iter().map(|e| e.value().clone()).collect();
                log.record(i, round, NodeEvent::SentRandoms { to: k, values: raw.clone() });
                log.record(k, round, NodeEvent::ReceivedRandoms { from: i, values: raw });
            }
            values.insert((i, k), draw);
        }
    }
    PairwiseRandoms { width, values }
}

/// `s_i^k = r_i^k - r_k^i` and `s_i^i = a_i - sum_k s_i^k`, all mod `p`.
pub fn make_shares(
    inputs: &[Vec<FieldElement>],
    randoms: &PairwiseRandoms,
    g: &Topology,
) -> Result<ShareSet, SharingError> {
    if inputs.len() != g.n() {
        return Err(SharingError::InputCount {
            expected: g.n(),
            got: inputs.len(),
        });
    }
    let width = inputs.first().map_or(randoms.width, Vec::len);
    let mut edge = BTreeMap::new();
    let mut own = Vec::with_capacity(inputs.len());
    for (i, a) in inputs.iter().enumerate() {
        if a.len() != width {
            return Err(SharingError::Width {
                node: i,
                expected: width,
                got: a.len(),
            });
        }
        let mut share = a.clone();
        for &k in g.neighbors(i).expect("node in range") {
            let out = randoms.get(i, k).ok_or(SharingError::MissingRandom(i, k))?;
            let back = randoms.get(k, i).ok_or(SharingError::MissingRandom(k, i))?;
            if out.len() != width || back.len() != width {
                return Err(SharingError::Width {
                    node: i,
                    expected: width,
                    got: out.len().min(back.len()),
                });
            }
            let s_ik = out
                .iter()
                .zip(back)
                .map(|(r_ik, r_ki)| r_ik.sub(r_ki))
                .collect::<Result<Vec<_>, _>>()?;
            for (acc, s) in share.iter_mut().zip(&s_ik) {
                *acc = acc.sub(s)?;
            }
            edge.insert((i, k), s_ik);
        }
        own.push(share);
    }
    Ok(ShareSet { edge, own })
}

fn round_half_integer(x: &BigRational) -> Result<BigInt, SharingError> {
    let two = BigInt::from(2);
    // A denominator of exactly 2 means x sits on a .5 boundary.
    if x.denom() == &two {
        return Err(SharingError::Ambiguous { scaled: x.clone() });
    }
    Ok(x.round().to_integer())
}

/// `round(s_bar * n) mod p`. Fails only when `s_bar * n` lies exactly halfway
/// between two integers; whether the rounding is the *right* one is a
/// property of averaging convergence, checked by [`reconstruct_checked`].
pub fn reconstruct_average(s_bar: &BigRational, n: usize, p: &FieldModulus) -> Result<FieldElement, SharingError> {
    let scaled = s_bar * BigRational::from_integer(BigInt::from(n));
    Ok(p.element_from_int(&round_half_integer(&scaled)?))
}

/// [`reconstruct_average`] plus the simulator-side certificate
/// `|s_bar * n - total| < 1/2`, where `total` is the integer sum of the shares.
pub fn reconstruct_checked(
    s_bar: &BigRational,
    n: usize,
    p: &FieldModulus,
    total: &BigInt,
) -> Result<FieldElement, SharingError> {
    let scaled = s_bar * BigRational::from_integer(BigInt::from(n));
    let gap = (&scaled - BigRational::from_integer(total.clone())).abs();
    if gap * BigRational::from_integer(BigInt::from(2)) >= BigRational::one() {
        return Err(SharingError::NotConverged {
            scaled,
            total: total.clone(),
        });
    }
    reconstruct_average(s_bar, n, p)
}

/// Integer sum of the representatives in `[0, p)` of one share entry across nodes.
pub fn share_total(own: &[Vec<FieldElement>], entry: usize) -> BigInt {
    own.iter()
        .map(|s| BigInt::from_biguint(Sign::Plus, s[entry].value().clone()))
        .sum()
}
