//! Losses, the optimiser and the two-phase training loop.

mod gradcheck;
mod loss;
mod optim;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormStats, Var};
use crate::bits::BitMessage;
use crate::channel::ChannelParams;
use crate::codec::{CodecParams, NeuralSession, NormMode, ParamVars};
use crate::eval::{estimate, EvalResult};
use crate::protocol::{random_messages, rollout, ProtocolConfig};
use crate::rng::{mix_seed, stream_rng};
use crate::tensor::Matrix;
use crate::{Error, Result};

pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
pub use loss::{
    exp_weight_coefficient, loss_equal_weight, loss_exp_weight, loss_single, round_weights,
    weighted_loss, LossConfig, LossVariant,
};
pub use optim::{AdamW, CosineSchedule};

const BATCH_DOMAIN: u64 = 0x7261_696e;
const NOISE_DOMAIN: u64 = 0x6e6f_6973;
const GAMMA_DOMAIN: u64 = 0x6761_6d6d;
const VALID_DOMAIN: u64 = 0x7661_6c69;
const CALIB_DOMAIN: u64 = 0x6361_6c69;

/// Calibration and validation run in chunks of this many sessions.
const CHUNK: usize = 512;

/// `1 - 10^-3, ..., 1 - 10^-7`.
pub fn default_gamma_grid() -> Vec<f64> {
    vec![1.0 - 1e-3, 1.0 - 1e-4, 1.0 - 1e-5, 1.0 - 1e-6, 1.0 - 1e-7]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Threshold drawn from the grid at every step.
    Pretrain,
    /// Threshold fixed at the target.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Floor of the cosine schedule as a fraction of the initial rate.
    pub min_lr_fraction: f64,
    pub gamma_grid: Vec<f64>,
    pub pretrain_steps: usize,
    pub finetune_steps: usize,
    pub loss: LossVariant,
    pub vartheta: f64,
    pub epsilon: f64,
    /// Gate round of the loss and the protocol; derived per threshold when
    /// unset.
    pub tau_plus: Option<usize>,
    /// Validate every this many steps; 0 disables periodic validation.
    pub val_every: usize,
    pub val_sessions: usize,
    /// Sessions used to fix the normaliser statistics after training.
    pub calibration_sessions: usize,
    /// Taken from `protocol.gamma` of the run config.
    #[serde(skip)]
    pub target_gamma: f64,
    /// Taken from the top-level seed of the run config.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8192,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            min_lr_fraction: 0.01,
            gamma_grid: default_gamma_grid(),
            pretrain_steps: 2000,
            finetune_steps: 1000,
            loss: LossVariant::ExpWeight,
            vartheta: 10.0,
            epsilon: 9.0,
            tau_plus: None,
            val_every: 100,
            val_sessions: 2000,
            calibration_sessions: 8192,
            target_gamma: 1.0 - 1e-5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("training.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("training.weight_decay", "must be non-negative"));
        }
        if !(self.min_lr_fraction > 0.0 && self.min_lr_fraction <= 1.0) {
            return Err(Error::config("training.min_lr_fraction", "must be in (0, 1]"));
        }
        if self.gamma_grid.is_empty() {
            return Err(Error::config("training.gamma_grid", "must not be empty"));
        }
        for &g in self.gamma_grid.iter().chain([&self.target_gamma]) {
            if !(g > 0.0 && g < 1.0) {
                return Err(Error::config("training.gamma_grid", format!("{g} not in (0, 1)")));
            }
        }
        self.loss_config(self.tau_plus.unwrap_or(1)).validate()
    }

    pub fn loss_config(&self, tau_plus: usize) -> LossConfig {
        LossConfig {
            variant: self.loss,
            vartheta: self.vartheta,
            epsilon: self.epsilon,
            tau_plus,
        }
    }

    pub fn protocol(&self, m: usize, gamma: f64, t_max: usize, channel: ChannelParams) -> Result<ProtocolConfig> {
        match self.tau_plus {
            Some(tau_plus) => ProtocolConfig::new(gamma, tau_plus, t_max, channel),
            None => ProtocolConfig::derived(m, gamma, t_max, channel),
        }
    }

    fn steps(&self, phase: Phase) -> usize {
        match phase {
            Phase::Pretrain => self.pretrain_steps,
            Phase::Finetune => self.finetune_steps,
        }
    }
}

/// One line of the metrics log. Validation fields are present only on
/// validation steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    pub gamma: f64,
    pub loss: f64,
    pub lr: f64,
    pub bler_estimate: Option<f64>,
    pub avg_rate: Option<f64>,
    pub avg_power: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub step: usize,
    pub result: EvalResult,
    pub params: CodecParams,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub validations: Vec<MetricRecord>,
    /// Parameters with the lowest validation BLER seen (ties go to the
    /// higher rate).
    pub best: Option<Snapshot>,
}

/// Loss value, parameter gradients and batch power statistics of one batch.
pub struct BatchLoss {
    pub loss: f64,
    pub grads: BTreeMap<String, Matrix>,
    pub norm_stats: Vec<Option<NormStats>>,
}

/// Differentiable loss of a batch of sessions.
///
/// All sessions run through the protocol together; a group's cross-entropy at
/// round `t` enters with weight `cfg.round_weight(t, tau*)`. The loss is the
/// sum over groups and rounds divided by the number of sessions, scaled by
/// `scale`.
pub fn batch_loss(
    params: &CodecParams,
    protocol: &ProtocolConfig,
    cfg: &LossConfig,
    messages: &[BitMessage],
    session_ids: &[u64],
    seed: u64,
    scale: f64,
) -> Result<BatchLoss> {
    let c = &params.config;
    let vars = ParamVars::new(params, true);
    let mut session = NeuralSession::new(c, vars.clone(), &params.normalizer, NormMode::Batch, messages)?;
    let r = rollout(&mut session, c.q, c.m, messages, session_ids, seed, protocol, true)?;
    let mut terms = Vec::new();
    for (i, beliefs) in r.belief_vars.iter().enumerate() {
        let w = round_weights(cfg, &r.stopping, i + 1);
        if w.iter().any(|w| *w != 0.0) {
            terms.push(beliefs.nll(&r.truth, &w));
        }
    }
    let norm_stats = session.norm_stats().to_vec();
    drop(session);
    drop(r);

    let mut grads = BTreeMap::new();
    let loss = if terms.is_empty() {
        0.0
    } else {
        let total = Var::sum(&terms).scale(scale / messages.len() as f64);
        drop(terms);
        total.backward();
        total.value().item()
    };
    for (name, v) in vars.iter() {
        let g = v.grad().unwrap_or_else(|| {
            let (r, c) = v.value().shape();
            Matrix::zeros(r, c)
        });
        grads.insert(name.to_string(), g);
    }
    Ok(BatchLoss {
        loss,
        grads,
        norm_stats,
    })
}

/// Messages and session ids of training step `step`.
pub fn training_batch(seed: u64, step: usize, batch: usize, k: usize) -> (Vec<BitMessage>, Vec<u64>) {
    let ids: Vec<u64> = (0..batch as u64).map(|b| (step * batch) as u64 + b).collect();
    (random_messages(mix_seed(seed, BATCH_DOMAIN), &ids, k), ids)
}

/// Replaces the running normaliser statistics by the pooled batch statistics
/// of `sessions` fresh sessions under `protocol`. Rounds that no session
/// reaches keep their previous values.
pub fn calibrate_normalizer(
    params: &mut CodecParams,
    protocol: &ProtocolConfig,
    sessions: usize,
    seed: u64,
) -> Result<()> {
    let c = params.config.clone();
    let seed = mix_seed(seed, CALIB_DOMAIN);
    // (count, sum, sum of squares) per round
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); c.t_max];
    let mut start = 0;
    while start < sessions {
        let n = CHUNK.min(sessions - start);
        let ids: Vec<u64> = (start as u64..(start + n) as u64).collect();
        let messages = random_messages(seed, &ids, c.k);
        let vars = ParamVars::new(params, false);
        let mut session = NeuralSession::new(&c, vars, &params.normalizer, NormMode::Batch, &messages)?;
        rollout(&mut session, c.q, c.m, &messages, &ids, seed, protocol, false)?;
        for (a, s) in acc.iter_mut().zip(session.norm_stats()) {
            if let Some(s) = s {
                let n = s.count as f64;
                a.0 += s.count;
                a.1 += n * s.mean;
                a.2 += n * (s.var + s.mean * s.mean);
            }
        }
        start += n;
    }
    for (i, (count, sum, sq)) in acc.into_iter().enumerate() {
        if count >= 2 {
            let n = count as f64;
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            params.normalizer.set(i + 1, mean, var);
        }
    }
    Ok(())
}

fn better(a: &EvalResult, b: &EvalResult) -> bool {
    a.bler < b.bler || (a.bler == b.bler && a.avg_code_rate > b.avg_code_rate)
}

/// Runs the selected phases in order, then calibrates the normaliser at the
/// target threshold.
///
/// On a non-finite loss or update the run stops with
/// [`Error::Divergence`] and `params` holds the last finite parameters.
pub fn train(
    cfg: &TrainConfig,
    params: &mut CodecParams,
    channel: &ChannelParams,
    phases: &[Phase],
    on_metric: &mut dyn FnMut(&MetricRecord) -> Result<()>,
) -> Result<TrainReport> {
    cfg.validate()?;
    params.config.validate()?;
    let c = params.config.clone();
    let total: usize = phases.iter().map(|p| cfg.steps(*p)).sum();
    let schedule = CosineSchedule {
        base: cfg.learning_rate,
        min_fraction: cfg.min_lr_fraction,
        total,
    };
    let target = cfg.protocol(c.m, cfg.target_gamma, c.t_max, *channel)?;
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut report = TrainReport::default();
    let noise_seed = mix_seed(cfg.seed, NOISE_DOMAIN);
    let mut step = 0;

    for &phase in phases {
        for _ in 0..cfg.steps(phase) {
            let gamma = match phase {
                Phase::Pretrain => {
                    let mut rng = stream_rng(mix_seed(cfg.seed, GAMMA_DOMAIN), step as u64);
                    cfg.gamma_grid[rng.random_range(0..cfg.gamma_grid.len())]
                }
                Phase::Finetune => cfg.target_gamma,
            };
            let protocol = cfg.protocol(c.m, gamma, c.t_max, *channel)?;
            let loss_cfg = cfg.loss_config(protocol.tau_plus);
            let (messages, ids) = training_batch(cfg.seed, step, cfg.batch_size, c.k);
            let out = batch_loss(params, &protocol, &loss_cfg, &messages, &ids, noise_seed, 1.0)?;
            let grads_ok = out.grads.values().all(Matrix::all_finite);
            if !out.loss.is_finite() || !grads_ok {
                return Err(Error::Divergence { step, loss: out.loss });
            }
            let lr = schedule.lr(step);
            let last_good = params.clone();
            opt.step(params, &out.grads, lr);
            if !params.all_finite() {
                *params = last_good;
                return Err(Error::Divergence { step, loss: out.loss });
            }
            for (round, s) in out.norm_stats.iter().enumerate() {
                if let Some(s) = s {
                    params.normalizer.update(round + 1, s.mean, s.var);
                }
            }
            report.losses.push(out.loss);

            let mut record = MetricRecord {
                step,
                phase,
                gamma,
                loss: out.loss,
                lr,
                bler_estimate: None,
                avg_rate: None,
                avg_power: None,
            };
            let last = step + 1 == total;
            if cfg.val_every > 0 && cfg.val_sessions > 0 && ((step + 1) % cfg.val_every == 0 || last) {
                let result = estimate(params, &target, cfg.val_sessions, mix_seed(cfg.seed, VALID_DOMAIN))?;
                record.bler_estimate = Some(result.bler);
                record.avg_rate = Some(result.avg_code_rate);
                record.avg_power = Some(result.avg_power);
                if report.best.as_ref().is_none_or(|b| better(&result, &b.result)) {
                    report.best = Some(Snapshot {
                        step,
                        result,
                        params: params.clone(),
                    });
                }
                report.validations.push(record.clone());
            }
            on_metric(&record)?;
            step += 1;
        }
    }
    report.steps = step;
    if cfg.calibration_sessions > 0 {
        calibrate_normalizer(params, &target, cfg.calibration_sessions, cfg.seed)?;
        if let Some(best) = report.best.as_mut() {
            calibrate_normalizer(&mut best.params, &target, cfg.calibration_sessions, cfg.seed)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{init_params, CodecConfig};

    fn tiny() -> (TrainConfig, CodecParams, ChannelParams) {
        let mut c = CodecConfig::new(4, 2, 2, 6);
        c.d_latent = 8;
        let params = init_params(&c, 11).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            pretrain_steps: 3,
            finetune_steps: 2,
            val_every: 0,
            calibration_sessions: 64,
            target_gamma: 0.999,
            seed: 4,
            ..TrainConfig::default()
        };
        (cfg, params, ChannelParams::noiseless_feedback(3.0))
    }

    #[test]
    fn grid_matches_threshold_range() {
        let g = default_gamma_grid();
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 1.0 - 1e-3);
        assert_eq!(g[4], 1.0 - 1e-7);
    }

    #[test]
    fn defaults_follow_the_hyperparameter_table() {
        let t = TrainConfig::default();
        assert_eq!(t.batch_size, 8192);
        assert_eq!(t.learning_rate, 1e-3);
        assert_eq!(t.weight_decay, 1e-3);
        assert_eq!((t.vartheta, t.epsilon), (10.0, 9.0));
        assert_eq!(t.loss, LossVariant::ExpWeight);
    }

    #[test]
    fn same_seed_same_losses() {
        let run = || {
            let (cfg, mut p, ch) = tiny();
            let r = train(&cfg, &mut p, &ch, &[Phase::Pretrain, Phase::Finetune], &mut |_| Ok(())).unwrap();
            (r.losses, p)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a.len(), 5);
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(pa, pb);
    }

    #[test]
    fn pretrain_only_emits_no_finetune_records() {
        let (cfg, mut p, ch) = tiny();
        let mut phases = Vec::new();
        train(&cfg, &mut p, &ch, &[Phase::Pretrain], &mut |r| {
            phases.push(r.phase);
            Ok(())
        })
        .unwrap();
        assert_eq!(phases, vec![Phase::Pretrain; 3]);
    }

    #[test]
    fn calibration_gives_unit_power() {
        // Calibrating on exactly the sessions that are then evaluated makes
        // the running statistics equal the batch ones, so every round has
        // unit power up to eps.
        let (cfg, p, ch) = tiny();
        let mut c = p.config.clone();
        c.norm_eps = 1e-16;
        let mut p = init_params(&c, 11).unwrap();
        let protocol = cfg.protocol(2, 0.999, 6, ch).unwrap();
        calibrate_normalizer(&mut p, &protocol, CHUNK, 1).unwrap();
        let r = estimate(&p, &protocol, CHUNK, mix_seed(1, CALIB_DOMAIN)).unwrap();
        assert!((r.avg_power - 1.0).abs() < 1e-6, "power {}", r.avg_power);
    }

    #[test]
    fn invalid_config_rejected() {
        let (mut cfg, mut p, ch) = tiny();
        cfg.batch_size = 0;
        assert!(matches!(
            train(&cfg, &mut p, &ch, &[Phase::Pretrain], &mut |_| Ok(())),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn loss_scale_scales_gradients() {
        let (cfg, p, ch) = tiny();
        let protocol = cfg.protocol(2, 0.999, 6, ch).unwrap();
        let lc = cfg.loss_config(protocol.tau_plus);
        let (msgs, ids) = training_batch(1, 0, 8, 4);
        let a = batch_loss(&p, &protocol, &lc, &msgs, &ids, 3, 1.0).unwrap();
        let b = batch_loss(&p, &protocol, &lc, &msgs, &ids, 3, 2.0).unwrap();
        for (ga, gb) in a.grads.values().zip(b.grads.values()) {
            for (x, y) in ga.as_slice().iter().zip(gb.as_slice()) {
                assert!((2.0 * x - y).abs() <= 1e-10 * (1.0 + y.abs()));
            }
        }
    }
}
