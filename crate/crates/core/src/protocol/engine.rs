use super::ProtocolConfig;
use crate::autodiff::Var;
use crate::bits::{argmax, max_entry, message_to_indices, BitMessage, StoppingRecord};
use crate::channel::{FeedbackMode, NoiseStream};
use crate::codec::CodecSession;
use crate::rng::Purpose;
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Everything that happened in one round, for the whole batch.
#[derive(Clone, Debug)]
pub struct RoundBatch {
    pub round: usize,
    /// Groups transmitting in this round (mask from the previous round).
    pub active: Vec<bool>,
    pub sent: Vec<f64>,
    pub received: Vec<f64>,
    pub fed_back: Vec<f64>,
    pub beliefs: Matrix,
    /// Mask after the threshold test of this round.
    pub undecoded: Vec<bool>,
}

/// Result of running a batch of sessions.
pub struct Rollout {
    pub q: usize,
    pub m: usize,
    pub seed: u64,
    pub config: ProtocolConfig,
    pub messages: Vec<BitMessage>,
    pub session_ids: Vec<u64>,
    /// True alphabet index of every row.
    pub truth: Vec<usize>,
    pub rounds: Vec<RoundBatch>,
    pub stopping: Vec<StoppingRecord>,
    /// Decided alphabet index of every row.
    pub decisions: Vec<usize>,
    /// Belief variables per round, kept for the loss when the codec is
    /// trainable.
    pub belief_vars: Vec<Var>,
}

/// Per-session aggregates used by the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SessionOutcome {
    pub block_error: bool,
    pub group_errors: usize,
    pub channel_uses: usize,
    pub forced: usize,
    pub sum_sq: f64,
    pub rounds: usize,
}

fn channel_noise(
    seed: u64,
    session_ids: &[u64],
    q: usize,
    round: usize,
    purpose: Purpose,
    sigma2: f64,
    active: &[bool],
) -> Matrix {
    let mut w = vec![0.0; active.len()];
    for (b, &sid) in session_ids.iter().enumerate() {
        let rows = b * q..(b + 1) * q;
        if !active[rows.clone()].iter().any(|a| *a) {
            continue;
        }
        let draws = NoiseStream::for_round(seed, sid, round, purpose).gaussian(q, sigma2);
        for (r, z) in rows.zip(draws) {
            if active[r] {
                w[r] = z;
            }
        }
    }
    Matrix::column_vector(w)
}

/// Runs a batch of sessions through `codec`.
///
/// Noise for session `b` comes from the streams of `(seed, session_ids[b])`,
/// so a session's realisation does not depend on the rest of the batch.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    codec: &mut dyn CodecSession,
    q: usize,
    m: usize,
    messages: &[BitMessage],
    session_ids: &[u64],
    seed: u64,
    config: &ProtocolConfig,
    keep_graph: bool,
) -> Result<Rollout> {
    config.validate()?;
    if messages.len() != session_ids.len() {
        return Err(Error::Shape("one session id per message required".into()));
    }
    if let Some(msg) = messages.iter().find(|msg| msg.len() != q * m) {
        return Err(Error::Shape(format!(
            "message of {} bits does not match Q*m = {}",
            msg.len(),
            q * m
        )));
    }
    let batch = messages.len();
    let rows = batch * q;
    let truth: Vec<usize> = messages.iter().flat_map(|msg| message_to_indices(msg, m)).collect();
    let sigma2_fwd = config.channel.sigma2_forward();
    let sigma2_fb = config.channel.sigma2_feedback();

    let mut active = vec![true; rows];
    let mut stopping = vec![StoppingRecord::new(q); batch];
    let mut decisions = vec![0usize; rows];
    let mut rounds = Vec::new();
    let mut belief_vars = Vec::new();

    for round in 1..=config.t_max {
        if !active.iter().any(|a| *a) {
            break;
        }
        let x = codec.encode_round(round, &active)?;
        let y = if sigma2_fwd == 0.0 {
            x.clone()
        } else {
            let w = channel_noise(seed, session_ids, q, round, Purpose::Forward, sigma2_fwd, &active);
            x.add_const(&w)
        };
        let beliefs = codec.decode_round(round, &y, &active)?;
        let p = beliefs.value();
        if p.shape() != (rows, 1 << m) {
            return Err(Error::Shape(format!(
                "codec returned beliefs of shape {:?}",
                p.shape()
            )));
        }

        let mut undecoded = active.clone();
        let gated = round >= config.tau_plus;
        let last = round == config.t_max;
        for r in (0..rows).filter(|&r| active[r]) {
            let row = p.row(r);
            let passed = gated && max_entry(row) >= config.gamma;
            if passed || last {
                undecoded[r] = false;
                decisions[r] = argmax(row);
                stopping[r / q].stop(r % q, round, !passed);
            }
        }

        let y_fb = match config.channel.feedback {
            FeedbackMode::Noiseless => y.clone(),
            FeedbackMode::Awgn { .. } => {
                let w = channel_noise(seed, session_ids, q, round, Purpose::Feedback, sigma2_fb, &active);
                y.add_const(&w)
            }
        };

        rounds.push(RoundBatch {
            round,
            active: active.clone(),
            sent: x.value().as_slice().to_vec(),
            received: y.value().as_slice().to_vec(),
            fed_back: y_fb.value().as_slice().to_vec(),
            beliefs: p.clone(),
            undecoded: undecoded.clone(),
        });
        if keep_graph {
            belief_vars.push(beliefs.clone());
        }
        if !last && undecoded.iter().any(|u| *u) {
            codec.absorb_feedback(round, &x, &y_fb, &undecoded)?;
        }
        active = undecoded;
    }

    Ok(Rollout {
        q,
        m,
        seed,
        config: config.clone(),
        messages: messages.to_vec(),
        session_ids: session_ids.to_vec(),
        truth,
        rounds,
        stopping,
        decisions,
        belief_vars,
    })
}

impl Rollout {
    pub fn sessions(&self) -> usize {
        self.messages.len()
    }

    pub fn outcome(&self, b: usize) -> SessionOutcome {
        let rows = b * self.q..(b + 1) * self.q;
        let group_errors = rows
            .clone()
            .filter(|&r| self.decisions[r] != self.truth[r])
            .count();
        let mut sum_sq = 0.0;
        let mut symbols = 0;
        let mut last_round = 0;
        for rb in &self.rounds {
            for r in rows.clone().filter(|&r| rb.active[r]) {
                sum_sq += rb.sent[r] * rb.sent[r];
                symbols += 1;
                last_round = rb.round;
            }
        }
        let record = &self.stopping[b];
        let channel_uses = record
            .channel_uses()
            .expect("every group stops by t_max");
        debug_assert_eq!(channel_uses, symbols);
        SessionOutcome {
            block_error: group_errors > 0,
            group_errors,
            channel_uses,
            forced: record.forced_count(),
            sum_sq,
            rounds: last_round,
        }
    }
}
