//! Messages, bit groups, beliefs, decoding masks and stopping times.
//!
//! Everything in here is pure bookkeeping shared by the codec, the protocol
//! loop and the evaluation harness.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Numerical slack allowed when checking that a belief column sums to one.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A `K`-bit payload.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMessage(Vec<u8>);

impl BitMessage {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(pos) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Shape(format!(
                "bit {pos} has value {}, expected 0 or 1",
                bits[pos]
            )));
        }
        Ok(Self(bits))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0; len])
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Rebuilds a message by concatenating groups in index order.
    pub fn from_groups(groups: &[BitGroup]) -> Self {
        Self(groups.iter().flat_map(|g| g.bits.iter().copied()).collect())
    }
}

/// One `m`-bit segment of a message.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitGroup {
    pub index: usize,
    pub bits: Vec<u8>,
}

/// Splits `message` into `q` groups of `m` bits; group `i` holds bits
/// `[m*i, m*(i+1))`.
pub fn partition_message(message: &BitMessage, q: usize, m: usize) -> Result<Vec<BitGroup>> {
    if q == 0 || m == 0 || message.len() != q * m {
        return Err(Error::Shape(format!(
            "message of length {} cannot be split into {q} groups of {m} bits",
            message.len()
        )));
    }
    Ok(message
        .bits()
        .chunks_exact(m)
        .enumerate()
        .map(|(index, chunk)| BitGroup {
            index,
            bits: chunk.to_vec(),
        })
        .collect())
}

/// The set of `2^m` group patterns, enumerated lexicographically with the
/// first bit most significant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAlphabet {
    m: usize,
}

impl GroupAlphabet {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m > 16 {
            return Err(Error::config("m", format!("group size {m} not in [1, 16]")));
        }
        Ok(Self { m })
    }

    pub fn bits_per_group(&self) -> usize {
        self.m
    }

    pub fn size(&self) -> usize {
        1 << self.m
    }

    pub fn index_of(&self, bits: &[u8]) -> usize {
        debug_assert_eq!(bits.len(), self.m);
        group_to_index(bits)
    }

    pub fn pattern(&self, index: usize) -> Vec<u8> {
        index_to_group(index, self.m)
    }
}

/// MSB-first index of a bit pattern.
pub fn group_to_index(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b & 1))
}

/// Inverse of [`group_to_index`].
pub fn index_to_group(index: usize, m: usize) -> Vec<u8> {
    (0..m).map(|i| ((index >> (m - 1 - i)) & 1) as u8).collect()
}

/// Alphabet index of every group of `message`, in group order.
pub fn message_to_indices(message: &BitMessage, m: usize) -> Vec<usize> {
    message.bits().chunks_exact(m).map(group_to_index).collect()
}

/// Inverse of [`message_to_indices`].
pub fn indices_to_message(indices: &[usize], m: usize) -> BitMessage {
    BitMessage(
        indices
            .iter()
            .flat_map(|&i| index_to_group(i, m))
            .collect(),
    )
}

pub fn check_simplex(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::NotSimplex("empty vector".into()));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::NotSimplex(format!("entry {v} is negative or not finite")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::NotSimplex(format!("entries sum to {sum}")));
    }
    Ok(())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Threshold decoding: a group is decoded once `max(p) >= gamma`.
pub fn threshold_check(p: &[f64], gamma: f64) -> Result<bool> {
    check_simplex(p)?;
    Ok(max_entry(p) >= gamma)
}

/// Unchecked form of the threshold test used in hot loops.
#[inline]
pub(crate) fn max_entry(p: &[f64]) -> f64 {
    p.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Per-group beliefs over the group alphabet after some round.
///
/// Stored group-major: column `q` is `data[q*A..(q+1)*A]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeliefMatrix {
    pub round: usize,
    groups: usize,
    alphabet: usize,
    data: Vec<f64>,
}

impl BeliefMatrix {
    pub fn new(round: usize, groups: usize, alphabet: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != groups * alphabet {
            return Err(Error::Shape(format!(
                "belief data has {} entries, expected {groups}x{alphabet}",
                data.len()
            )));
        }
        for col in data.chunks_exact(alphabet) {
            check_simplex(col)?;
        }
        Ok(Self {
            round,
            groups,
            alphabet,
            data,
        })
    }

    pub fn uniform(round: usize, groups: usize, alphabet: usize) -> Self {
        Self {
            round,
            groups,
            alphabet,
            data: vec![1.0 / alphabet as f64; groups * alphabet],
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    pub fn column(&self, q: usize) -> &[f64] {
        &self.data[q * self.alphabet..(q + 1) * self.alphabet]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.alphabet)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Decoding status after a round: `true` means the group is still undecoded
/// and keeps transmitting.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeMask {
    pub round: usize,
    active: Vec<bool>,
}

impl DecodeMask {
    pub fn all_active(groups: usize) -> Self {
        Self {
            round: 0,
            active: vec![true; groups],
        }
    }

    pub fn from_active(round: usize, active: Vec<bool>) -> Self {
        Self { round, active }
    }

    pub fn is_active(&self, q: usize) -> bool {
        self.active[q]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn all_decoded(&self) -> bool {
        self.active.iter().all(|a| !a)
    }

    /// Entry `M_j` as 0/1.
    pub fn entry(&self, q: usize) -> u8 {
        u8::from(self.active[q])
    }
}

/// Clears the mask entry of every group whose belief passes the threshold.
/// Entries already cleared stay cleared.
pub fn update_mask(mask: &DecodeMask, beliefs: &BeliefMatrix, gamma: f64) -> Result<DecodeMask> {
    if beliefs.groups() != mask.active.len() {
        return Err(Error::Shape(format!(
            "mask has {} groups, beliefs have {}",
            mask.active.len(),
            beliefs.groups()
        )));
    }
    let active = mask
        .active
        .iter()
        .zip(beliefs.columns())
        .map(|(&was_active, p)| Ok(was_active && !threshold_check(p, gamma)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodeMask {
        round: beliefs.round,
        active,
    })
}

/// Round at which every group was decoded, and whether that decode was forced
/// by the round cap.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingRecord {
    pub tau_star: Vec<Option<usize>>,
    pub forced: Vec<bool>,
}

impl StoppingRecord {
    pub fn new(groups: usize) -> Self {
        Self {
            tau_star: vec![None; groups],
            forced: vec![false; groups],
        }
    }

    pub fn from_rounds(tau_star: Vec<usize>) -> Self {
        let forced = vec![false; tau_star.len()];
        Self {
            tau_star: tau_star.into_iter().map(Some).collect(),
            forced,
        }
    }

    pub fn groups(&self) -> usize {
        self.tau_star.len()
    }

    pub fn stop(&mut self, q: usize, round: usize, forced: bool) {
        self.tau_star[q] = Some(round);
        self.forced[q] = forced;
    }

    pub fn get(&self, q: usize) -> Result<usize> {
        self.tau_star[q].ok_or(Error::UnsetStoppingTime(q))
    }

    /// `sum_q tau*_q`, the number of channel uses of the session.
    pub fn channel_uses(&self) -> Result<usize> {
        (0..self.groups()).map(|q| self.get(q)).sum()
    }

    pub fn forced_count(&self) -> usize {
        self.forced.iter().filter(|f| **f).count()
    }
}

/// `R = K / sum_q tau*_q` information bits per channel use.
pub fn compute_code_rate(record: &StoppingRecord, k: usize) -> Result<f64> {
    let uses = record.channel_uses()?;
    if uses == 0 {
        return Err(Error::Empty("stopping record has no channel uses"));
    }
    Ok(k as f64 / uses as f64)
}
