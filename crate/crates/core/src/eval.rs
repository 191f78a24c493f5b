//! Monte-Carlo estimation of BLER, rate and power, threshold/SNR sweeps and
//! the uncoded-BPSK harness oracle.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{transmit_forward, ChannelParams, FeedbackMode, NoiseStream};
use crate::codec::Codec;
use crate::protocol::{random_messages, rollout, ProtocolConfig};
use crate::rng::{mix_seed, stream_id, stream_rng, Purpose};
use crate::{Error, Result};

/// Sessions per work unit. Results do not depend on how units are scheduled.
pub const EVAL_CHUNK: usize = 256;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

/// Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub gamma: f64,
    pub snr_fwd_db: f64,
    /// `inf` for noiseless feedback.
    pub snr_fb_db: f64,
    pub n_sessions: usize,
    pub bler: f64,
    pub bler_ci_low: f64,
    pub bler_ci_high: f64,
    pub group_error_rate: f64,
    pub avg_code_rate: f64,
    pub avg_power: f64,
    pub forced_fraction: f64,
    pub seed: u64,
}

impl EvalResult {
    /// Mean stopping round of a group: channel uses per group, i.e. `m / R`.
    pub fn avg_rounds(&self, m: usize) -> f64 {
        m as f64 / self.avg_code_rate
    }
}

/// Wilson score interval for `errors` out of `n` trials.
pub fn wilson_interval(errors: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = errors as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // the bounds are exactly 0 and 1 at the extremes; rounding can miss that
    let lo = if errors == 0 { 0.0 } else { (centre - half).max(0.0) };
    let hi = if errors as f64 == n { 1.0 } else { (centre + half).min(1.0) };
    (lo, hi)
}

#[derive(Clone, Copy, Debug, Default)]
struct Tally {
    sessions: u64,
    block_errors: u64,
    group_errors: u64,
    groups: u64,
    channel_uses: u64,
    forced: u64,
    sum_sq: f64,
}

impl Tally {
    fn merge(mut self, o: Tally) -> Tally {
        self.sessions += o.sessions;
        self.block_errors += o.block_errors;
        self.group_errors += o.group_errors;
        self.groups += o.groups;
        self.channel_uses += o.channel_uses;
        self.forced += o.forced;
        self.sum_sq += o.sum_sq;
        self
    }
}

fn run_chunk(codec: &dyn Codec, protocol: &ProtocolConfig, ids: &[u64], seed: u64) -> Result<Tally> {
    let (q, m, _) = codec.geometry();
    let messages = random_messages(seed, ids, q * m);
    let mut session = codec.start(&messages)?;
    let r = rollout(session.as_mut(), q, m, &messages, ids, seed, protocol, false)?;
    let mut t = Tally::default();
    for b in 0..r.sessions() {
        let o = r.outcome(b);
        t.sessions += 1;
        t.block_errors += u64::from(o.block_error);
        t.group_errors += o.group_errors as u64;
        t.groups += q as u64;
        t.channel_uses += o.channel_uses as u64;
        t.forced += o.forced as u64;
        t.sum_sq += o.sum_sq;
    }
    Ok(t)
}

/// Runs sessions `0..n_sessions` with uniformly random messages.
///
/// Session `i` always sees the same message and noise for a given seed, and
/// the per-chunk tallies are summed in chunk order, so the result is
/// identical for any number of worker threads.
pub fn estimate(codec: &dyn Codec, protocol: &ProtocolConfig, n_sessions: usize, seed: u64) -> Result<EvalResult> {
    if n_sessions == 0 {
        return Err(Error::config("eval.sessions", "must be at least 1"));
    }
    let (q, m, t_max) = codec.geometry();
    if t_max != protocol.t_max {
        return Err(Error::config(
            "protocol.t_max",
            format!("codec built for t_max = {t_max}, protocol uses {}", protocol.t_max),
        ));
    }
    let ids: Vec<u64> = (0..n_sessions as u64).collect();
    let tallies: Vec<Result<Tally>> = ids
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| run_chunk(codec, protocol, chunk, seed))
        .collect();
    let mut t = Tally::default();
    for tally in tallies {
        t = t.merge(tally?);
    }
    let n = t.sessions;
    let (lo, hi) = wilson_interval(t.block_errors, n, Z95);
    let k = (q * m) as f64;
    Ok(EvalResult {
        gamma: protocol.gamma,
        snr_fwd_db: protocol.channel.forward_snr_db,
        snr_fb_db: protocol.channel.feedback_snr_db(),
        n_sessions,
        bler: t.block_errors as f64 / n as f64,
        bler_ci_low: lo,
        bler_ci_high: hi,
        group_error_rate: t.group_errors as f64 / t.groups as f64,
        avg_code_rate: k * n as f64 / t.channel_uses as f64,
        avg_power: t.sum_sq / t.channel_uses as f64,
        forced_fraction: t.forced as f64 / t.groups as f64,
        seed,
    })
}

/// Runs `f` on a pool of `workers` threads, or on the global pool when
/// `workers` is `None`.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::config("eval.workers", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

/// Gaussian tail `Q(x) = P(N(0,1) > x)`.
pub fn gaussian_tail(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineResult {
    pub n_bits: usize,
    pub errors: usize,
    pub measured_ber: f64,
    pub analytic_ber: f64,
}

impl BaselineResult {
    /// `analytic +- 3 sqrt(p (1 - p) / n)`.
    pub fn three_sigma(&self) -> (f64, f64) {
        let p = self.analytic_ber;
        let s = 3.0 * (p * (1.0 - p) / self.n_bits as f64).sqrt();
        (p - s, p + s)
    }

    pub fn consistent(&self) -> bool {
        let (lo, hi) = self.three_sigma();
        self.measured_ber >= lo && self.measured_ber <= hi
    }
}

/// Uncoded BPSK: every bit is sent once as `+-1` and decided by sign.
pub fn baseline_uncoded(channel: &ChannelParams, n_bits: usize, seed: u64) -> Result<BaselineResult> {
    if n_bits < 10_000 {
        return Err(Error::config("eval.baseline_bits", "needs at least 10^4 bits"));
    }
    let mut rng = stream_rng(seed, stream_id(0, 0, Purpose::Message));
    let bits: Vec<bool> = (0..n_bits).map(|_| rng.random()).collect();
    let x: Vec<f64> = bits.iter().map(|b| if *b { 1.0 } else { -1.0 }).collect();
    let y = transmit_forward(&x, channel, &NoiseStream::for_round(seed, 0, 1, Purpose::Forward));
    let errors = bits.iter().zip(&y).filter(|(b, y)| **b != (**y > 0.0)).count();
    let sigma = channel.sigma2_forward().sqrt();
    let analytic_ber = if sigma == 0.0 { 0.0 } else { gaussian_tail(1.0 / sigma) };
    Ok(BaselineResult {
        n_bits,
        errors,
        measured_ber: errors as f64 / n_bits as f64,
        analytic_ber,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Every point uses the sweep seed.
    Shared,
    /// Point `i` uses a seed derived from the sweep seed and `i`.
    PerPoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub gammas: Vec<f64>,
    pub snrs_db: Vec<f64>,
    pub feedback: FeedbackMode,
    pub sessions_per_point: usize,
    pub seed: u64,
    pub seed_policy: SeedPolicy,
    /// Gate round for every point; derived per point when unset.
    pub tau_plus: Option<usize>,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.is_empty() {
            return Err(Error::config("eval.gammas", "must not be empty"));
        }
        if self.snrs_db.is_empty() {
            return Err(Error::config("eval.snrs_db", "must not be empty"));
        }
        if self.sessions_per_point == 0 {
            return Err(Error::config("eval.sessions", "must be at least 1"));
        }
        Ok(())
    }

    /// All `(gamma, snr)` points, threshold-major.
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.gammas
            .iter()
            .flat_map(|&g| self.snrs_db.iter().map(move |&s| (g, s)))
            .collect()
    }

    pub fn point_seed(&self, index: usize) -> u64 {
        match self.seed_policy {
            SeedPolicy::Shared => self.seed,
            SeedPolicy::PerPoint => mix_seed(self.seed, index as u64),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedPoint {
    pub gamma: f64,
    pub snr_fwd_db: f64,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutcome {
    pub results: Vec<EvalResult>,
    pub skipped: Vec<SkippedPoint>,
}

/// Evaluates every point of `spec`. `model(gamma)` supplies the codec for a
/// threshold, or a reason why none is available; such points are skipped
/// with a warning.
pub fn sweep<'a>(
    spec: &SweepSpec,
    model: &dyn Fn(f64) -> std::result::Result<&'a dyn Codec, String>,
) -> Result<SweepOutcome> {
    spec.validate()?;
    let mut out = SweepOutcome::default();
    for (i, (gamma, snr)) in spec.points().into_iter().enumerate() {
        let codec = match model(gamma) {
            Ok(c) => c,
            Err(reason) => {
                log::warn!("skipping gamma = {gamma}, snr = {snr} dB: {reason}");
                out.skipped.push(SkippedPoint {
                    gamma,
                    snr_fwd_db: snr,
                    reason,
                });
                continue;
            }
        };
        let (_, m, t_max) = codec.geometry();
        let channel = ChannelParams::new(snr, spec.feedback)?;
        let protocol = match spec.tau_plus {
            Some(t) => ProtocolConfig::new(gamma, t, t_max, channel)?,
            None => ProtocolConfig::derived(m, gamma, t_max, channel)?,
        };
        out.results
            .push(estimate(codec, &protocol, spec.sessions_per_point, spec.point_seed(i))?);
    }
    Ok(out)
}

pub fn write_csv<W: Write>(results: &[EvalResult], out: W) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Empty("no results to write"));
    }
    let mut w = csv::Writer::from_writer(out);
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn emit_csv(results: &[EvalResult], path: impl AsRef<Path>) -> Result<()> {
    if results.is_empty() {
        return Err(Error::Empty("no results to write"));
    }
    write_csv(results, File::create(path)?)
}

pub fn read_csv_from<R: Read>(input: R) -> Result<Vec<EvalResult>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<EvalResult>> {
    read_csv_from(File::open(path)?)
}

/// The same rows sorted by average code rate, for plotting BLER against rate.
pub fn plot_data(results: &[EvalResult]) -> Vec<EvalResult> {
    let mut rows = results.to_vec();
    rows.sort_by(|a, b| a.avg_code_rate.total_cmp(&b.avg_code_rate));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{OracleCodec, UniformCodec};

    fn protocol(tau_plus: usize, t_max: usize) -> ProtocolConfig {
        ProtocolConfig::new(0.999, tau_plus, t_max, ChannelParams::noiseless_feedback(1.0)).unwrap()
    }

    #[test]
    fn oracle_rate_is_k_over_q_tau_plus() {
        let codec = OracleCodec { q: 17, m: 3, t_max: 15 };
        let r = estimate(&codec, &protocol(5, 15), 300, 1).unwrap();
        assert_eq!(r.bler, 0.0);
        assert_eq!(r.avg_code_rate, 51.0 / 85.0);
        assert_eq!(r.forced_fraction, 0.0);
        assert!(r.bler_ci_low <= r.bler && r.bler <= r.bler_ci_high);
    }

    #[test]
    fn uniform_stub_runs_to_the_cap() {
        let codec = UniformCodec { q: 4, m: 2, t_max: 6 };
        let r = estimate(&codec, &protocol(5, 6), 500, 1).unwrap();
        assert_eq!(r.avg_code_rate, 8.0 / 24.0);
        assert_eq!(r.forced_fraction, 1.0);
        // argmax of a uniform belief is index 0, right for 1 in 4 groups
        assert!(r.bler > 0.9);
        assert!((r.group_error_rate - 0.75).abs() < 0.05);
        assert!((r.avg_power - 1.0).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_result_any_worker_count() {
        let codec = UniformCodec { q: 2, m: 2, t_max: 6 };
        let p = ProtocolConfig::new(0.999, 5, 6, ChannelParams::noiseless_feedback(0.0)).unwrap();
        let a = with_workers(Some(1), || estimate(&codec, &p, 700, 9)).unwrap().unwrap();
        let b = with_workers(Some(3), || estimate(&codec, &p, 700, 9)).unwrap().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sessions_rejected() {
        let codec = OracleCodec { q: 2, m: 2, t_max: 6 };
        assert!(estimate(&codec, &protocol(5, 6), 0, 1).is_err());
    }

    #[test]
    fn tail_values() {
        assert!((gaussian_tail(1.0) - 0.158_655_253_931_457).abs() < 1e-12);
        let sigma = crate::channel::snr_db_to_sigma2(1.0).sqrt();
        assert!((1.0 / sigma - 1.122).abs() < 1e-3);
        assert!((gaussian_tail(1.0 / sigma) - 0.1309).abs() < 1e-4);
    }

    #[test]
    fn baseline_at_infinite_snr_is_error_free() {
        let r = baseline_uncoded(&ChannelParams::noiseless_feedback(f64::INFINITY), 10_000, 1).unwrap();
        assert_eq!((r.errors, r.analytic_ber), (0, 0.0));
        assert!(baseline_uncoded(&ChannelParams::noiseless_feedback(1.0), 100, 1).is_err());
    }

    #[test]
    fn wilson_contains_the_estimate() {
        for (e, n) in [(0, 10), (3, 10), (10, 10), (1, 100_000)] {
            let (lo, hi) = wilson_interval(e, n, Z95);
            let p = e as f64 / n as f64;
            assert!(lo <= p && p <= hi && lo >= 0.0 && hi <= 1.0);
        }
    }

    #[test]
    fn csv_round_trip() {
        let codec = OracleCodec { q: 3, m: 2, t_max: 8 };
        let r = estimate(&codec, &protocol(5, 8), 10, 2).unwrap();
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(
            text.lines().next().unwrap(),
            "gamma,snr_fwd_db,snr_fb_db,n_sessions,bler,bler_ci_low,bler_ci_high,\
             group_error_rate,avg_code_rate,avg_power,forced_fraction,seed"
        );
        assert!(text.lines().nth(1).unwrap().contains(",inf,"));
        assert_eq!(read_csv_from(buf.as_slice()).unwrap(), vec![r]);
        assert!(matches!(write_csv(&[], Vec::new()), Err(Error::Empty(_))));
    }

    #[test]
    fn sweep_skips_missing_models() {
        let codec = OracleCodec { q: 3, m: 2, t_max: 8 };
        let spec = SweepSpec {
            gammas: crate::training::default_gamma_grid(),
            snrs_db: vec![1.0],
            feedback: FeedbackMode::Noiseless,
            sessions_per_point: 5,
            seed: 1,
            seed_policy: SeedPolicy::Shared,
            tau_plus: None,
        };
        let all = sweep(&spec, &|_| Ok(&codec as &dyn Codec)).unwrap();
        assert_eq!(all.results.len(), 5);
        let some = sweep(&spec, &|g| {
            if g > 1.0 - 1e-6 {
                Err("no checkpoint".into())
            } else {
                Ok(&codec as &dyn Codec)
            }
        })
        .unwrap();
        assert_eq!((some.results.len(), some.skipped.len()), (4, 1));
    }

    #[test]
    fn plot_rows_sorted_by_rate() {
        let mk = |rate| EvalResult {
            gamma: 0.9,
            snr_fwd_db: 0.0,
            snr_fb_db: f64::INFINITY,
            n_sessions: 1,
            bler: 0.0,
            bler_ci_low: 0.0,
            bler_ci_high: 1.0,
            group_error_rate: 0.0,
            avg_code_rate: rate,
            avg_power: 1.0,
            forced_fraction: 0.0,
            seed: 0,
        };
        let rows = plot_data(&[mk(0.5), mk(0.2), mk(0.4)]);
        let rates: Vec<f64> = rows.iter().map(|r| r.avg_code_rate).collect();
        assert_eq!(rates, vec![0.2, 0.4, 0.5]);
    }
}
