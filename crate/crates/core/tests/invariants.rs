//! Protocol invariants over randomly configured sessions of untrained
//! codecs. Low thresholds make the random networks stop at a spread of rounds.

mod common;

use common::{random_case, run_invariant_suite};
use deepvlf::autodiff::Var;
use deepvlf::codec::{assemble_knowledge, CodecSession, GroupHistory, NeuralSession, NormMode, ParamVars, Side};
use deepvlf::eval::estimate;
use deepvlf::protocol::{random_messages, random_sessions, rollout, run_batch};
use deepvlf::tensor::Matrix;
use deepvlf::SessionTranscript;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn invariants_hold_on_randomised_sessions() {
    assert!(run_invariant_suite(2024, 1200) >= 1200);
}

#[test]
fn estimate_agrees_with_transcripts() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let case = random_case(&mut rng);
        let n = 300;
        let r = estimate(&case.params, &case.protocol, n, case.seed).unwrap();
        let ids: Vec<u64> = (0..n as u64).collect();
        let ts = random_sessions(&case.params, &ids, case.seed, &case.protocol).unwrap();
        let k = ts[0].summary.k;
        let uses: usize = ts.iter().map(|t| t.replayed_channel_uses()).sum();
        assert_eq!(r.avg_code_rate, (k * n) as f64 / uses as f64);
        let blocks = ts.iter().filter(|t| t.summary.block_error).count();
        assert_eq!(r.bler, blocks as f64 / n as f64);
        let groups: usize = ts.iter().map(|t| t.group_errors().iter().filter(|e| **e).count()).sum();
        assert_eq!(r.group_error_rate, groups as f64 / (n * ts[0].summary.q) as f64);
        let energy: f64 = ts
            .iter()
            .flat_map(|t| t.rounds.iter().flat_map(|r| r.transmitted.iter()))
            .map(|x| x * x)
            .sum();
        assert!((r.avg_power - energy / uses as f64).abs() < 1e-12 * r.avg_power.max(1.0));
    }
}

/// Records the knowledge matrices at the start of every round.
struct Recorder<'a> {
    inner: NeuralSession,
    enc: &'a mut Vec<Matrix>,
    dec: &'a mut Vec<Matrix>,
}

impl CodecSession for Recorder<'_> {
    fn encode_round(&mut self, round: usize, active: &[bool]) -> deepvlf::Result<Var> {
        self.enc.push(self.inner.encoder_knowledge().clone());
        self.dec.push(self.inner.decoder_knowledge().clone());
        self.inner.encode_round(round, active)
    }

    fn decode_round(&mut self, round: usize, received: &Var, active: &[bool]) -> deepvlf::Result<Var> {
        self.inner.decode_round(round, received, active)
    }

    fn absorb_feedback(&mut self, round: usize, sent: &Var, fed_back: &Var, undecoded: &[bool]) -> deepvlf::Result<()> {
        self.inner.absorb_feedback(round, sent, fed_back, undecoded)
    }
}

fn history(t: &SessionTranscript, g: usize) -> GroupHistory {
    let s = &t.summary;
    let mut h = GroupHistory {
        bits: s.message[g * s.m..(g + 1) * s.m].to_vec(),
        decoded_at: Some(s.tau_star[g]),
        ..GroupHistory::default()
    };
    for r in &t.rounds {
        if let Some(pos) = r.groups.iter().position(|&x| x == g) {
            h.sent.push(r.transmitted[pos]);
            h.received.push(r.received[pos]);
            h.fed_back.push(r.fed_back[pos]);
        }
        h.beliefs.push(r.beliefs[g].clone());
    }
    h
}

#[test]
fn knowledge_vectors_match_history_rebuild() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..6 {
        let case = random_case(&mut rng);
        let c = &case.params.config;
        let layout = c.layout();
        let ids: Vec<u64> = (0..20).collect();
        let messages = random_messages(case.seed, &ids, c.k);
        let (mut enc, mut dec) = (Vec::new(), Vec::new());
        let inner = NeuralSession::new(
            c,
            ParamVars::new(&case.params, false),
            &case.params.normalizer,
            NormMode::Running,
            &messages,
        )
        .unwrap();
        let mut rec = Recorder {
            inner,
            enc: &mut enc,
            dec: &mut dec,
        };
        let r = rollout(&mut rec, c.q, c.m, &messages, &ids, case.seed, &case.protocol, false).unwrap();
        let direct = run_batch(&case.params, &messages, &ids, case.seed, &case.protocol).unwrap();
        for b in 0..ids.len() {
            let t = r.transcript(b);
            assert_eq!(t, direct[b]);
            for g in 0..c.q {
                let h = history(&t, g);
                let row = b * c.q + g;
                for (i, (e, d)) in enc.iter().zip(&dec).enumerate() {
                    let round = i + 1;
                    let want = assemble_knowledge(&layout, Side::Encoder, &h, round).unwrap();
                    assert_eq!(e.row(row), want.as_slice(), "encoder, group {g}, round {round}");
                    let mut want = assemble_knowledge(&layout, Side::Decoder, &h, round).unwrap();
                    // the received slot of the current round is filled on decode
                    if round <= h.decoded_at.unwrap() {
                        want[layout.received_slot(round)] = 0.0;
                    }
                    assert_eq!(d.row(row), want.as_slice(), "decoder, group {g}, round {round}");
                }
            }
        }
    }
}
