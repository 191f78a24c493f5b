use serde::{Deserialize, Serialize};

use super::{batch_loss, training_batch, LossConfig};
use crate::channel::{ChannelParams, FeedbackMode};
use crate::codec::{init_params, CodecConfig, CodecParams};
use crate::protocol::ProtocolConfig;
use crate::Result;

/// Settings of the finite-difference check. The threshold is set so close to
/// 1 that no group decodes before the cap, which keeps the control flow
/// fixed while parameters are perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub q: usize,
    pub m: usize,
    pub t_max: usize,
    pub d_latent: usize,
    pub tau_vd: usize,
    pub sessions: usize,
    pub forward_snr_db: f64,
    pub feedback_snr_db: f64,
    pub step: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub tol_p95: f64,
    pub tol_max: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            q: 2,
            m: 1,
            t_max: 3,
            d_latent: 8,
            tau_vd: 2,
            sessions: 6,
            forward_snr_db: 3.0,
            feedback_snr_db: 20.0,
            step: 1e-5,
            floor: 1e-7,
            tol_p95: 1e-4,
            tol_max: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub coordinates: usize,
    pub max_rel_error: f64,
    pub p95_rel_error: f64,
    pub median_rel_error: f64,
    /// Array and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub tol_p95: f64,
    pub tol_max: f64,
    pub passed: bool,
}

impl GradCheckConfig {
    pub fn codec(&self) -> CodecConfig {
        let mut c = CodecConfig::new(self.q * self.m, self.q, self.m, self.t_max);
        c.d_latent = self.d_latent;
        c.tau_vd = self.tau_vd;
        c
    }

    pub fn protocol(&self) -> Result<ProtocolConfig> {
        let channel = ChannelParams::new(
            self.forward_snr_db,
            FeedbackMode::Awgn {
                snr_db: self.feedback_snr_db,
            },
        )?;
        ProtocolConfig::new(1.0 - 1e-12, 1, self.t_max, channel)
    }

    /// Exponential weights with the offset at the cap, so every weight is at
    /// most 1.
    pub fn loss(&self) -> LossConfig {
        LossConfig::exp_weight(10.0, self.t_max as f64, 1)
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).ceil() as usize;
    sorted[i]
}

/// Compares every analytical parameter gradient of the batch loss against a
/// central difference.
pub fn grad_check(cfg: &GradCheckConfig, seed: u64) -> Result<GradCheckReport> {
    let params = init_params(&cfg.codec(), seed)?;
    grad_check_params(cfg, &params, seed)
}

pub fn grad_check_params(cfg: &GradCheckConfig, params: &CodecParams, seed: u64) -> Result<GradCheckReport> {
    let protocol = cfg.protocol()?;
    let loss = cfg.loss();
    let (messages, ids) = training_batch(seed, 0, cfg.sessions, params.config.k);
    let eval = |p: &CodecParams| batch_loss(p, &protocol, &loss, &messages, &ids, seed, 1.0);
    let analytic = eval(params)?.grads;

    let mut errors = Vec::new();
    let mut worst = (String::new(), 0);
    let mut max_rel: f64 = 0.0;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in &names {
        let len = params.get(name).len();
        for i in 0..len {
            let x = params.get(name).as_slice()[i];
            probe.get_mut(name).as_mut_slice()[i] = x + cfg.step;
            let up = eval(&probe)?.loss;
            probe.get_mut(name).as_mut_slice()[i] = x - cfg.step;
            let down = eval(&probe)?.loss;
            probe.get_mut(name).as_mut_slice()[i] = x;

            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[name].as_slice()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            if rel > max_rel || errors.is_empty() {
                max_rel = rel;
                worst = (name.clone(), i);
            }
            errors.push(rel);
        }
    }
    errors.sort_by(f64::total_cmp);
    let p95 = quantile(&errors, 0.95);
    Ok(GradCheckReport {
        seed,
        coordinates: errors.len(),
        max_rel_error: max_rel,
        p95_rel_error: p95,
        median_rel_error: quantile(&errors, 0.5),
        worst,
        tol_p95: cfg.tol_p95,
        tol_max: cfg.tol_max,
        passed: p95 < cfg.tol_p95 && max_rel < cfg.tol_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_init_passes() {
        let report = grad_check(&GradCheckConfig::default(), 7).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.coordinates > 500);
    }

    #[test]
    fn zero_weights_give_zero_gradients() {
        let cfg = GradCheckConfig::default();
        let p = init_params(&cfg.codec(), 1).unwrap();
        let protocol = cfg.protocol().unwrap();
        // a gate past the cap switches every term off
        let loss = LossConfig::exp_weight(10.0, 3.0, cfg.t_max + 1);
        let (msgs, ids) = training_batch(1, 0, 4, p.config.k);
        let out = batch_loss(&p, &protocol, &loss, &msgs, &ids, 1, 1.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grads.values().all(|g| g.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn report_is_deterministic() {
        let cfg = GradCheckConfig {
            d_latent: 4,
            sessions: 2,
            ..GradCheckConfig::default()
        };
        assert_eq!(grad_check(&cfg, 3).unwrap(), grad_check(&cfg, 3).unwrap());
    }
}
