use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::engine::{rollout, Rollout};
use super::{random_messages, ProtocolConfig};
use crate::bits::{compute_code_rate, indices_to_message, BitMessage, StoppingRecord};
use crate::channel::measure_avg_power;
use crate::codec::Codec;
use crate::{Error, Result};

/// JSON has no infinities; SNRs of `+inf` dB are written as the string "inf".
mod snr_db {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One round of one session, restricted to the groups that transmitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub groups: Vec<usize>,
    pub transmitted: Vec<f64>,
    pub received: Vec<f64>,
    pub fed_back: Vec<f64>,
    /// Belief of every group (active or frozen) after this round.
    pub beliefs: Vec<Vec<f64>>,
    /// Decoding mask after this round, 1 = still undecoded.
    pub mask: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: u64,
    pub seed: u64,
    pub gamma: f64,
    pub tau_plus: usize,
    pub t_max: usize,
    #[serde(with = "snr_db")]
    pub forward_snr_db: f64,
    #[serde(with = "snr_db")]
    pub feedback_snr_db: f64,
    pub k: usize,
    pub q: usize,
    pub m: usize,
    pub message: Vec<u8>,
    pub tau_star: Vec<usize>,
    pub forced: Vec<bool>,
    pub decoded: Vec<u8>,
    pub rate: f64,
    pub block_error: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionTranscript {
    pub summary: SessionSummary,
    pub rounds: Vec<RoundRecord>,
}

impl SessionTranscript {
    pub fn stopping(&self) -> StoppingRecord {
        StoppingRecord {
            tau_star: self.summary.tau_star.iter().copied().map(Some).collect(),
            forced: self.summary.forced.clone(),
        }
    }

    pub fn message(&self) -> BitMessage {
        BitMessage::new(self.summary.message.clone()).expect("transcript holds bits")
    }

    /// Number of transmitted symbols counted from the raw round records.
    pub fn replayed_channel_uses(&self) -> usize {
        self.rounds.iter().map(|r| r.transmitted.len()).sum()
    }

    pub fn avg_power(&self) -> Result<f64> {
        measure_avg_power(self.rounds.iter().flat_map(|r| r.transmitted.iter().copied()))
    }

    /// Per-group error flags.
    pub fn group_errors(&self) -> Vec<bool> {
        let m = self.summary.m;
        self.summary
            .message
            .chunks_exact(m)
            .zip(self.summary.decoded.chunks_exact(m))
            .map(|(a, b)| a != b)
            .collect()
    }
}

impl Rollout {
    pub fn transcript(&self, b: usize) -> SessionTranscript {
        let q = self.q;
        let base = b * q;
        let mut rounds = Vec::new();
        for rb in &self.rounds {
            let groups: Vec<usize> = (0..q).filter(|&g| rb.active[base + g]).collect();
            if groups.is_empty() {
                continue;
            }
            let pick = |v: &[f64]| groups.iter().map(|&g| v[base + g]).collect::<Vec<_>>();
            rounds.push(RoundRecord {
                round: rb.round,
                transmitted: pick(&rb.sent),
                received: pick(&rb.received),
                fed_back: pick(&rb.fed_back),
                beliefs: (0..q).map(|g| rb.beliefs.row(base + g).to_vec()).collect(),
                mask: (0..q).map(|g| u8::from(rb.undecoded[base + g])).collect(),
                groups,
            });
        }
        let record = &self.stopping[b];
        let decided = &self.decisions[base..base + q];
        let decoded = indices_to_message(decided, self.m);
        let k = q * self.m;
        let message = self.messages[b].bits().to_vec();
        SessionTranscript {
            summary: SessionSummary {
                session: self.session_ids[b],
                seed: self.seed,
                gamma: self.config.gamma,
                tau_plus: self.config.tau_plus,
                t_max: self.config.t_max,
                forward_snr_db: self.config.channel.forward_snr_db,
                feedback_snr_db: self.config.channel.feedback_snr_db(),
                k,
                q,
                m: self.m,
                block_error: decoded.bits() != message.as_slice(),
                message,
                tau_star: record
                    .tau_star
                    .iter()
                    .map(|t| t.expect("every group stops by t_max"))
                    .collect(),
                forced: record.forced.clone(),
                decoded: decoded.bits().to_vec(),
                rate: compute_code_rate(record, k).expect("complete record"),
            },
            rounds,
        }
    }
}

fn check_geometry(codec: &dyn Codec, config: &ProtocolConfig) -> Result<(usize, usize)> {
    let (q, m, t_max) = codec.geometry();
    if t_max != config.t_max {
        return Err(Error::config(
            "protocol.t_max",
            format!("codec built for t_max = {t_max}, protocol uses {}", config.t_max),
        ));
    }
    Ok((q, m))
}

/// Runs a batch of sessions and returns one transcript per session.
pub fn run_batch(
    codec: &dyn Codec,
    messages: &[BitMessage],
    session_ids: &[u64],
    seed: u64,
    config: &ProtocolConfig,
) -> Result<Vec<SessionTranscript>> {
    let (q, m) = check_geometry(codec, config)?;
    let mut session = codec.start(messages)?;
    let r = rollout(session.as_mut(), q, m, messages, session_ids, seed, config, false)?;
    Ok((0..r.sessions()).map(|b| r.transcript(b)).collect())
}

/// Transcripts of the sessions an evaluation with the same seed runs:
/// session `i` draws its message from `random_messages(seed, [i], K)`.
pub fn random_sessions(
    codec: &dyn Codec,
    session_ids: &[u64],
    seed: u64,
    config: &ProtocolConfig,
) -> Result<Vec<SessionTranscript>> {
    let (q, m, _) = codec.geometry();
    let mut out = Vec::with_capacity(session_ids.len());
    for chunk in session_ids.chunks(256) {
        let messages = random_messages(seed, chunk, q * m);
        out.extend(run_batch(codec, &messages, chunk, seed, config)?);
    }
    Ok(out)
}

pub fn run_session(
    message: &BitMessage,
    config: &ProtocolConfig,
    codec: &dyn Codec,
    seed: u64,
    session_id: u64,
) -> Result<SessionTranscript> {
    let mut out = run_batch(codec, std::slice::from_ref(message), &[session_id], seed, config)?;
    Ok(out.remove(0))
}

fn same_f64(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn first_difference(a: &RoundRecord, b: &RoundRecord) -> Option<&'static str> {
    if a.round != b.round {
        Some("round index")
    } else if a.groups != b.groups {
        Some("active groups")
    } else if !same_f64(&a.transmitted, &b.transmitted) {
        Some("transmitted symbols")
    } else if !same_f64(&a.received, &b.received) {
        Some("received symbols")
    } else if !same_f64(&a.fed_back, &b.fed_back) {
        Some("fed-back symbols")
    } else if a.beliefs.len() != b.beliefs.len()
        || a.beliefs.iter().zip(&b.beliefs).any(|(x, y)| !same_f64(x, y))
    {
        Some("beliefs")
    } else if a.mask != b.mask {
        Some("mask")
    } else {
        None
    }
}

/// Re-runs the session from its recorded seed and message and compares every
/// recorded field bit for bit. Fails with the first round that differs.
pub fn replay_verify(
    transcript: &SessionTranscript,
    config: &ProtocolConfig,
    codec: &dyn Codec,
) -> Result<()> {
    let s = &transcript.summary;
    let fresh = run_session(&transcript.message(), config, codec, s.seed, s.session)?;
    for (i, (old, new)) in transcript.rounds.iter().zip(&fresh.rounds).enumerate() {
        if let Some(what) = first_difference(old, new) {
            return Err(Error::Replay {
                round: old.round.max(i + 1),
                detail: what.to_string(),
            });
        }
    }
    let common = transcript.rounds.len().min(fresh.rounds.len());
    if transcript.rounds.len() != fresh.rounds.len() {
        return Err(Error::Replay {
            round: common + 1,
            detail: format!(
                "transcript has {} rounds, replay has {}",
                transcript.rounds.len(),
                fresh.rounds.len()
            ),
        });
    }
    let end = common + 1;
    let fs = &fresh.summary;
    let mismatch = if s.tau_star != fs.tau_star || s.forced != fs.forced {
        Some("stopping record")
    } else if s.decoded != fs.decoded || s.block_error != fs.block_error {
        Some("decoded message")
    } else if s.rate.to_bits() != fs.rate.to_bits() {
        Some("code rate")
    } else if s.gamma.to_bits() != fs.gamma.to_bits() || s.tau_plus != fs.tau_plus {
        Some("protocol parameters")
    } else if s.forward_snr_db.to_bits() != fs.forward_snr_db.to_bits()
        || s.feedback_snr_db.to_bits() != fs.feedback_snr_db.to_bits()
    {
        Some("channel parameters")
    } else {
        None
    };
    match mismatch {
        Some(what) => Err(Error::Replay {
            round: end,
            detail: what.to_string(),
        }),
        None => Ok(()),
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Round {
        session: u64,
        #[serde(flatten)]
        record: RoundRecord,
    },
    Summary(SessionSummary),
}

/// One line per round, then one summary line, per session.
pub fn write_jsonl<W: Write>(transcripts: &[SessionTranscript], mut out: W) -> Result<()> {
    for t in transcripts {
        for r in &t.rounds {
            let line = Line::Round {
                session: t.summary.session,
                record: r.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut out, &Line::Summary(t.summary.clone()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<SessionTranscript>> {
    let mut out = Vec::new();
    let mut pending: Vec<RoundRecord> = Vec::new();
    let mut pending_session = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Round { session, record } => {
                if pending_session.is_some_and(|s| s != session) {
                    return Err(Error::Shape(format!(
                        "round of session {session} interleaved with another session"
                    )));
                }
                pending_session = Some(session);
                pending.push(record);
            }
            Line::Summary(summary) => {
                if pending_session.is_some_and(|s| s != summary.session) {
                    return Err(Error::Shape("summary does not match its rounds".into()));
                }
                out.push(SessionTranscript {
                    summary,
                    rounds: std::mem::take(&mut pending),
                });
                pending_session = None;
            }
        }
    }
    if !pending.is_empty() {
        return Err(Error::Shape("transcript ends without a summary line".into()));
    }
    Ok(out)
}
