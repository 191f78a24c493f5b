//! Shared by the invariant suite and the acceptance gate.

#![allow(dead_code)]

use deepvlf::bits::argmax;
use deepvlf::codec::init_params;
use deepvlf::protocol::random_sessions;
use deepvlf::{ChannelParams, CodecConfig, CodecParams, FeedbackMode, ProtocolConfig, SessionTranscript};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Case {
    pub params: CodecParams,
    pub protocol: ProtocolConfig,
    pub seed: u64,
}

pub fn random_case(rng: &mut ChaCha8Rng) -> Case {
    let m = rng.random_range(1..=3);
    let q = rng.random_range(1..=4);
    let t_max = rng.random_range(2..=7);
    let mut cfg = CodecConfig::new(q * m, q, m, t_max);
    cfg.d_latent = 8;
    let params = init_params(&cfg, rng.random()).unwrap();
    let alphabet = (1usize << m) as f64;
    // thresholds between uniform and certain
    let gamma = 1.0 / alphabet + rng.random_range(0.0..0.3);
    let feedback = if rng.random_bool(0.5) {
        FeedbackMode::Noiseless
    } else {
        FeedbackMode::Awgn {
            snr_db: rng.random_range(5.0..30.0),
        }
    };
    let channel = ChannelParams::new(rng.random_range(-2.0..12.0), feedback).unwrap();
    let tau_plus = rng.random_range(1..=t_max);
    Case {
        params,
        protocol: ProtocolConfig::new(gamma, tau_plus, t_max, channel).unwrap(),
        seed: rng.random(),
    }
}

pub fn check_transcript(t: &SessionTranscript, cfg: &ProtocolConfig) {
    let s = &t.summary;
    let q = s.q;
    let alphabet = 1usize << s.m;

    // termination and gating
    assert!(t.rounds.len() <= cfg.t_max);
    for (g, &ts) in s.tau_star.iter().enumerate() {
        assert!(ts >= cfg.tau_plus && ts <= cfg.t_max, "group {g} stopped at {ts}");
    }

    let mut prev_mask = vec![1u8; q];
    for (i, r) in t.rounds.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        // transmitting groups are exactly those undecoded after the last round
        let expected: Vec<usize> = (0..q).filter(|&g| prev_mask[g] == 1).collect();
        assert_eq!(r.groups, expected);
        assert_eq!(r.transmitted.len(), r.groups.len());
        assert_eq!(r.received.len(), r.groups.len());
        assert_eq!(r.fed_back.len(), r.groups.len());
        // masks only ever switch off
        for g in 0..q {
            assert!(r.mask[g] <= prev_mask[g]);
        }
        // beliefs live on the simplex
        for row in &r.beliefs {
            assert_eq!(row.len(), alphabet);
            assert!(row.iter().all(|p| *p >= 0.0 && p.is_finite()));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        prev_mask = r.mask.clone();
    }
    assert!(prev_mask.iter().all(|m| *m == 0));

    for g in 0..q {
        let ts = s.tau_star[g];
        // one symbol per round the group was active
        let uses = t.rounds.iter().filter(|r| r.groups.contains(&g)).count();
        assert_eq!(uses, ts);
        let at_stop = &t.rounds[ts - 1].beliefs[g];
        let conf = at_stop.iter().cloned().fold(0.0, f64::max);
        // forced exactly when the threshold was never met
        assert_eq!(s.forced[g], conf < cfg.gamma);
        if s.forced[g] {
            assert_eq!(ts, cfg.t_max);
        }
        for r in &t.rounds[cfg.tau_plus.max(1) - 1..ts - 1] {
            assert!(r.beliefs[g].iter().cloned().fold(0.0, f64::max) < cfg.gamma);
        }
        // frozen: nothing changes after the stopping round
        for r in &t.rounds[ts..] {
            assert_eq!(&r.beliefs[g], at_stop);
        }
        // decision is the argmax at the stopping round
        let idx = argmax(at_stop);
        let bits: Vec<u8> = (0..s.m).map(|j| ((idx >> (s.m - 1 - j)) & 1) as u8).collect();
        assert_eq!(&s.decoded[g * s.m..(g + 1) * s.m], bits.as_slice());
    }

    // accounting and rate replay
    let total: usize = s.tau_star.iter().sum();
    assert_eq!(t.replayed_channel_uses(), total);
    assert_eq!(s.rate, s.k as f64 / total as f64);
    // block error is the OR of group errors
    assert_eq!(s.block_error, t.group_errors().iter().any(|e| *e));
    assert_eq!(s.block_error, s.message != s.decoded);
}

/// Runs at least `n` sessions over random configurations and checks every
/// transcript. Returns the number of sessions checked.
pub fn run_invariant_suite(seed: u64, n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = 0;
    let mut stop_rounds = std::collections::BTreeSet::new();
    let mut forced = 0;
    while sessions < n {
        let case = random_case(&mut rng);
        let ids: Vec<u64> = (0..40).map(|_| rng.random_range(0..1_000_000)).collect();
        let ts = random_sessions(&case.params, &ids, case.seed, &case.protocol).unwrap();
        for t in &ts {
            check_transcript(t, &case.protocol);
            stop_rounds.extend(t.summary.tau_star.iter().copied());
            forced += t.summary.forced.iter().filter(|f| **f).count();
        }
        sessions += ts.len();
    }
    // the sample exercises both early stops and truncation
    assert!(stop_rounds.len() >= 4, "{stop_rounds:?}");
    assert!(forced > 0);
    sessions
}
