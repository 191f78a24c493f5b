//! The interactive session loop.
//!
//! Each round: encode the active groups, send over the forward channel,
//! update the beliefs, apply the threshold test (from round `tau_plus` on),
//! feed back the received symbols and the decoded indices, freeze decoded
//! groups. Sessions end when every group is decoded or at `t_max`, where the
//! remaining groups are force-decoded by argmax.

mod engine;
mod transcript;

use serde::{Deserialize, Serialize};

use rand::Rng;

use crate::bits::BitMessage;
use crate::channel::ChannelParams;
use crate::rng::{stream_id, stream_rng, Purpose};
use crate::{Error, Result};

pub use engine::{rollout, RoundBatch, Rollout, SessionOutcome};
pub use transcript::{
    read_jsonl, replay_verify, random_sessions, run_batch, run_session, write_jsonl, RoundRecord, SessionSummary,
    SessionTranscript,
};

/// Uniformly random `k`-bit messages, one per session id. Each message comes
/// from the message stream of its own session.
pub fn random_messages(seed: u64, session_ids: &[u64], k: usize) -> Vec<BitMessage> {
    session_ids
        .iter()
        .map(|&sid| {
            let mut rng = stream_rng(seed, stream_id(sid, 0, Purpose::Message));
            BitMessage::new((0..k).map(|_| rng.random_range(0..2u8)).collect()).expect("bits")
        })
        .collect()
}

/// Baseline of the first decoding round as a function of the threshold:
/// 5 up to `1 - 1e-5`, 6 up to `1 - 1e-6`, 7 above.
pub fn mu_for_gamma(gamma: f64) -> usize {
    if gamma <= 1.0 - 1e-5 {
        5
    } else if gamma <= 1.0 - 1e-6 {
        6
    } else {
        7
    }
}

/// First round in which decoding is attempted:
/// `max(mu(gamma), floor(2m / log2(1 + snr)))`.
pub fn compute_tau_plus(m: usize, forward_snr_db: f64, gamma: f64) -> Result<usize> {
    if m == 0 {
        return Err(Error::config("core.m", "must be positive"));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::config("protocol.gamma", format!("{gamma} not in (0, 1)")));
    }
    if forward_snr_db.is_nan() {
        return Err(Error::config("channel.forward_snr_db", "must be a number"));
    }
    let snr = 10f64.powf(forward_snr_db / 10.0);
    let shannon = (2.0 * m as f64 / (1.0 + snr).log2()).floor();
    let shannon = if shannon.is_finite() { shannon as usize } else { usize::MAX };
    Ok(mu_for_gamma(gamma).max(shannon))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub gamma: f64,
    pub tau_plus: usize,
    pub t_max: usize,
    pub channel: ChannelParams,
}

impl ProtocolConfig {
    pub fn new(gamma: f64, tau_plus: usize, t_max: usize, channel: ChannelParams) -> Result<Self> {
        let cfg = Self {
            gamma,
            tau_plus,
            t_max,
            channel,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `tau_plus` derived from `m`, the forward SNR and `gamma`.
    pub fn derived(m: usize, gamma: f64, t_max: usize, channel: ChannelParams) -> Result<Self> {
        let tau_plus = compute_tau_plus(m, channel.forward_snr_db, gamma)?;
        Self::new(gamma, tau_plus, t_max, channel)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config(
                "protocol.gamma",
                format!("{} not in (0, 1)", self.gamma),
            ));
        }
        if self.t_max == 0 {
            return Err(Error::config("protocol.t_max", "must be positive"));
        }
        if self.tau_plus == 0 || self.tau_plus > self.t_max {
            return Err(Error::config(
                "protocol.tau_plus",
                format!("{} not in [1, t_max = {}]", self.tau_plus, self.t_max),
            ));
        }
        Ok(())
    }
}
