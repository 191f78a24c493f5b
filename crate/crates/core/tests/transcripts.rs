use std::io::BufReader;

use deepvlf::codec::{init_params, OracleCodec};
use deepvlf::protocol::{random_sessions, read_jsonl, replay_verify, run_session, write_jsonl};
use deepvlf::{BitMessage, ChannelParams, CodecConfig, CodecParams, Error, FeedbackMode, ProtocolConfig};

fn codec() -> CodecParams {
    let mut c = CodecConfig::new(6, 3, 2, 5);
    c.d_latent = 8;
    init_params(&c, 11).unwrap()
}

fn protocol(gamma: f64, feedback: FeedbackMode) -> ProtocolConfig {
    ProtocolConfig::new(gamma, 2, 5, ChannelParams::new(3.0, feedback).unwrap()).unwrap()
}

#[test]
fn jsonl_round_trip_is_exact() {
    let p = codec();
    for fb in [FeedbackMode::Noiseless, FeedbackMode::Awgn { snr_db: 15.0 }] {
        let cfg = protocol(0.4, fb);
        let ids: Vec<u64> = (0..25).collect();
        let ts = random_sessions(&p, &ids, 5, &cfg).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&ts, &mut buf).unwrap();
        let back = read_jsonl(BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(back, ts);
        let mut again = Vec::new();
        write_jsonl(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }
}

#[test]
fn noiseless_feedback_snr_is_written_as_inf() {
    let cfg = protocol(0.4, FeedbackMode::Noiseless);
    let t = run_session(&BitMessage::zeros(6), &cfg, &codec(), 1, 0).unwrap();
    let mut buf = Vec::new();
    write_jsonl(&[t], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.contains("\"feedback_snr_db\":\"inf\""));
}

#[test]
fn untouched_transcripts_replay() {
    let p = codec();
    let cfg = protocol(0.35, FeedbackMode::Awgn { snr_db: 10.0 });
    let ids: Vec<u64> = (100..140).collect();
    for t in random_sessions(&p, &ids, 3, &cfg).unwrap() {
        replay_verify(&t, &cfg, &p).unwrap();
    }
}

#[test]
fn perturbed_symbol_fails_at_its_round() {
    let p = codec();
    let cfg = protocol(0.999, FeedbackMode::Noiseless);
    let t = run_session(&BitMessage::new(vec![1, 0, 0, 1, 1, 1]).unwrap(), &cfg, &p, 8, 3).unwrap();
    for round in 1..=t.rounds.len() {
        let mut bad = t.clone();
        bad.rounds[round - 1].received[0] += 1e-12;
        match replay_verify(&bad, &cfg, &p) {
            Err(Error::Replay { round: r, .. }) => assert_eq!(r, round),
            other => panic!("expected replay failure, got {other:?}"),
        }
    }
}

#[test]
fn transcript_from_another_gamma_fails_at_first_gated_round() {
    let p = codec();
    let recorded = protocol(0.999, FeedbackMode::Noiseless);
    let t = run_session(&BitMessage::new(vec![0, 1, 1, 0, 0, 0]).unwrap(), &recorded, &p, 4, 9).unwrap();
    // an untrained codec never reaches 0.999, so every group runs to the cap
    assert!(t.summary.forced.iter().all(|f| *f));
    // a threshold met by the most confident group at the gate round
    let gate = recorded.tau_plus;
    let gamma = t.rounds[gate - 1]
        .beliefs
        .iter()
        .map(|row| row.iter().cloned().fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let other = ProtocolConfig { gamma, ..recorded.clone() };
    match replay_verify(&t, &other, &p) {
        Err(Error::Replay { round, detail }) => {
            assert_eq!(round, gate);
            assert_eq!(detail, "mask");
        }
        other => panic!("expected replay failure, got {other:?}"),
    }
}

#[test]
fn oracle_stub_sessions_stop_at_the_gate() {
    let o = OracleCodec { q: 17, m: 3, t_max: 15 };
    let cfg = ProtocolConfig::derived(3, 1.0 - 1e-5, 15, ChannelParams::noiseless_feedback(1.0)).unwrap();
    let ids: Vec<u64> = (0..50).collect();
    for t in random_sessions(&o, &ids, 1, &cfg).unwrap() {
        assert!(t.summary.tau_star.iter().all(|&s| s == 5));
        assert_eq!(t.summary.rate, 51.0 / 85.0);
        assert!(!t.summary.block_error);
        replay_verify(&t, &cfg, &o).unwrap();
    }
}

#[test]
fn same_seed_same_bytes() {
    let p = codec();
    let cfg = protocol(0.4, FeedbackMode::Awgn { snr_db: 12.0 });
    let ids: Vec<u64> = (0..30).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_jsonl(&random_sessions(&p, &ids, 77, &cfg).unwrap(), &mut a).unwrap();
    write_jsonl(&random_sessions(&p, &ids, 77, &cfg).unwrap(), &mut b).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    write_jsonl(&random_sessions(&p, &ids, 78, &cfg).unwrap(), &mut c).unwrap();
    assert_ne!(a, c);
}
