//! Fixed-width, zero-padded knowledge vectors.
//!
//! Encoder: `[m bipolar bits | c(1) y(1) | c(2) y(2) | ... | c(T) y(T)]`.
//! Decoder: `[y(1) ... y(T) | belief over the 2^m patterns]`.
//!
//! Slots of rounds that have not happened yet are 0, and a group stops
//! accumulating as soon as it is decoded.

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KnowledgeLayout {
    pub m: usize,
    pub t_max: usize,
}

impl KnowledgeLayout {
    pub fn new(m: usize, t_max: usize) -> Self {
        Self { m, t_max }
    }

    pub fn encoder_width(&self) -> usize {
        self.m + 2 * self.t_max
    }

    pub fn decoder_width(&self) -> usize {
        self.t_max + (1 << self.m)
    }

    pub fn width(&self, side: Side) -> usize {
        match side {
            Side::Encoder => self.encoder_width(),
            Side::Decoder => self.decoder_width(),
        }
    }

    /// Column of the parity symbol sent in `round` (1-based).
    pub fn parity_slot(&self, round: usize) -> usize {
        self.m + 2 * (round - 1)
    }

    /// Column of the fed-back symbol of `round`.
    pub fn feedback_slot(&self, round: usize) -> usize {
        self.parity_slot(round) + 1
    }

    /// Decoder column of the symbol received in `round`.
    pub fn received_slot(&self, round: usize) -> usize {
        round - 1
    }

    pub fn belief_offset(&self) -> usize {
        self.t_max
    }
}

/// `0 -> -1`, `1 -> +1`.
pub fn bipolar(bit: u8) -> f64 {
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

pub type KnowledgeVector = Vec<f64>;

/// Everything one group has seen during a session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroupHistory {
    pub bits: Vec<u8>,
    /// Parity symbol sent in round `t` is `sent[t-1]`.
    pub sent: Vec<f64>,
    pub received: Vec<f64>,
    pub fed_back: Vec<f64>,
    /// Decoder belief after round `t` is `beliefs[t-1]`.
    pub beliefs: Vec<Vec<f64>>,
    /// Round in which the group was decoded, if it was.
    pub decoded_at: Option<usize>,
}

/// Knowledge vector of one group at the start of `round`, rebuilt from its
/// history.
///
/// Encoder: round-`t` parity/feedback slots are filled for every
/// `t < round` after which the group was still undecoded. Decoder: received
/// slots for every `t <= round` in which the group transmitted, and the belief
/// from the end of the previous round (uniform before round 1). A decoded
/// group's vector stays what it was in its decoding round.
pub fn assemble_knowledge(
    layout: &KnowledgeLayout,
    side: Side,
    history: &GroupHistory,
    round: usize,
) -> Result<KnowledgeVector> {
    if round == 0 || round > layout.t_max {
        return Err(Error::RoundOutOfRange {
            round,
            t_max: layout.t_max,
        });
    }
    if history.bits.len() != layout.m {
        return Err(Error::Shape(format!(
            "group has {} bits, layout expects {}",
            history.bits.len(),
            layout.m
        )));
    }
    let mut v = vec![0.0; layout.width(side)];
    match side {
        Side::Encoder => {
            for (slot, &b) in v.iter_mut().zip(&history.bits) {
                *slot = bipolar(b);
            }
            let appended = match history.decoded_at {
                Some(t) => (round - 1).min(t - 1),
                None => round - 1,
            };
            for t in 1..=appended {
                v[layout.parity_slot(t)] = history.sent[t - 1];
                v[layout.feedback_slot(t)] = history.fed_back[t - 1];
            }
        }
        Side::Decoder => {
            let upto = history.decoded_at.map_or(round, |t| round.min(t));
            for t in 1..=upto {
                v[layout.received_slot(t)] = history.received[t - 1];
            }
            let alphabet = 1 << layout.m;
            let prior = if upto >= 2 {
                history.beliefs[upto - 2].clone()
            } else {
                vec![1.0 / alphabet as f64; alphabet]
            };
            v[layout.belief_offset()..].copy_from_slice(&prior);
        }
    }
    Ok(v)
}
