use serde::{Deserialize, Serialize};

use crate::autodiff::LOG_CLAMP;
use crate::bits::{BeliefMatrix, StoppingRecord};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Cross-entropy only at the round each group is decoded.
    Single,
    /// Cross-entropy at every round up to decoding, all weights 1.
    EqualWeight,
    /// Rounds `tau_plus..=tau*` weighted by `vartheta^(round - epsilon)`.
    ExpWeight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub variant: LossVariant,
    pub vartheta: f64,
    pub epsilon: f64,
    pub tau_plus: usize,
}

impl LossConfig {
    pub fn exp_weight(vartheta: f64, epsilon: f64, tau_plus: usize) -> Self {
        Self {
            variant: LossVariant::ExpWeight,
            vartheta,
            epsilon,
            tau_plus,
        }
    }

    pub fn equal_weight() -> Self {
        Self {
            variant: LossVariant::EqualWeight,
            vartheta: 1.0,
            epsilon: 0.0,
            tau_plus: 1,
        }
    }

    pub fn single() -> Self {
        Self {
            variant: LossVariant::Single,
            ..Self::equal_weight()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_plus == 0 {
            return Err(Error::config("training.tau_plus", "must be at least 1"));
        }
        if self.variant == LossVariant::ExpWeight && !(self.vartheta > 1.0 && self.vartheta.is_finite()) {
            return Err(Error::config("training.vartheta", format!("{} must exceed 1", self.vartheta)));
        }
        if !self.epsilon.is_finite() {
            return Err(Error::config("training.epsilon", "must be finite"));
        }
        Ok(())
    }

    /// Weight of the round-`round` cross-entropy of a group decoded at
    /// `tau_star`.
    pub fn round_weight(&self, round: usize, tau_star: usize) -> f64 {
        if round == 0 || round > tau_star {
            return 0.0;
        }
        match self.variant {
            LossVariant::Single => f64::from(u8::from(round == tau_star)),
            LossVariant::EqualWeight => 1.0,
            LossVariant::ExpWeight if round < self.tau_plus => 0.0,
            LossVariant::ExpWeight => exp_weight_coefficient(self.vartheta, self.epsilon, round),
        }
    }
}

/// `vartheta^(round - epsilon)`. Integral exponents go through an exact
/// integer power so that e.g. `10^-2` comes out as the literal `0.01`.
pub fn exp_weight_coefficient(vartheta: f64, epsilon: f64, round: usize) -> f64 {
    let e = round as f64 - epsilon;
    if e.fract() == 0.0 && e.abs() < 300.0 {
        let n = e as i32;
        if n >= 0 {
            vartheta.powi(n)
        } else {
            1.0 / vartheta.powi(-n)
        }
    } else {
        vartheta.powf(e)
    }
}

/// Per-row weights for round `round` of a batch laid out `b * Q + q`.
pub fn round_weights(cfg: &LossConfig, stopping: &[StoppingRecord], round: usize) -> Vec<f64> {
    stopping
        .iter()
        .flat_map(|rec| {
            rec.tau_star
                .iter()
                .map(move |t| t.map_or(0.0, |t| cfg.round_weight(round, t)))
        })
        .collect()
}

/// `-sum_q sum_round w(round, tau*_q) ln p^(round)_{q, truth_q}` over the
/// recorded history; `history[i]` holds the beliefs after round `i + 1`.
pub fn weighted_loss(
    cfg: &LossConfig,
    history: &[BeliefMatrix],
    truth: &[usize],
    stopping: &StoppingRecord,
) -> Result<f64> {
    if !(cfg.vartheta > 0.0) {
        return Err(Error::config("training.vartheta", "must be positive"));
    }
    if truth.len() != stopping.groups() {
        return Err(Error::Shape(format!(
            "{} true groups for a record of {}",
            truth.len(),
            stopping.groups()
        )));
    }
    let mut loss = 0.0;
    for (q, &t) in truth.iter().enumerate() {
        let tau_star = stopping.get(q)?;
        if history.len() < tau_star {
            return Err(Error::Shape(format!(
                "group {q} stops at round {tau_star} but only {} rounds of beliefs were recorded",
                history.len()
            )));
        }
        for round in 1..=tau_star {
            let w = cfg.round_weight(round, tau_star);
            if w == 0.0 {
                continue;
            }
            let p = history[round - 1].column(q)[t];
            loss -= w * p.max(LOG_CLAMP).ln();
        }
    }
    Ok(loss)
}

pub fn loss_exp_weight(
    history: &[BeliefMatrix],
    truth: &[usize],
    stopping: &StoppingRecord,
    cfg: &LossConfig,
) -> Result<f64> {
    let cfg = LossConfig {
        variant: LossVariant::ExpWeight,
        ..*cfg
    };
    weighted_loss(&cfg, history, truth, stopping)
}

pub fn loss_equal_weight(history: &[BeliefMatrix], truth: &[usize], stopping: &StoppingRecord) -> Result<f64> {
    weighted_loss(&LossConfig::equal_weight(), history, truth, stopping)
}

pub fn loss_single(history: &[BeliefMatrix], truth: &[usize], stopping: &StoppingRecord) -> Result<f64> {
    weighted_loss(&LossConfig::single(), history, truth, stopping)
}
