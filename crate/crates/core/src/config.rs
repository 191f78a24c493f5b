//! The run configuration shared by every command.
//!
//! A TOML document with one table per module:
//!
//! ```toml
//! seed = 7
//! [core]     # k, q, m
//! [channel]  # forward_snr_db, feedback_snr_db (absent = noiseless)
//! [protocol] # gamma, t_max, tau_plus (absent = derived)
//! [codec]    # network widths and switches
//! [training] # optimiser and schedule
//! [eval]     # Monte-Carlo and sweep settings
//! [paths]
//! ```
//!
//! Any key can be overridden with `section.key=value`, where `value` is a
//! TOML literal (bare words are taken as strings).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelParams, FeedbackMode};
use crate::codec::{CodecConfig, VdfeDepth};
use crate::eval::{SeedPolicy, SweepSpec};
use crate::protocol::ProtocolConfig;
use crate::training::{default_gamma_grid, TrainConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreSection {
    pub k: usize,
    pub q: usize,
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub forward_snr_db: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback_snr_db: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub gamma: f64,
    pub t_max: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_plus: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub d_latent: usize,
    pub tau_vd: usize,
    pub shallow_layers: usize,
    pub vdfe_depth: VdfeDepth,
    pub attention_scale: bool,
    pub learned_projections: bool,
    pub norm_eps: f64,
    pub norm_momentum: f64,
}

impl Default for CodecSection {
    fn default() -> Self {
        let c = CodecConfig::new(1, 1, 1, 1);
        Self {
            d_latent: c.d_latent,
            tau_vd: c.tau_vd,
            shallow_layers: c.shallow_layers,
            vdfe_depth: c.vdfe_depth,
            attention_scale: c.attention_scale,
            learned_projections: c.learned_projections,
            norm_eps: c.norm_eps,
            norm_momentum: c.norm_momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub sessions: usize,
    pub gammas: Vec<f64>,
    /// Forward SNR points of a sweep; empty means the channel's SNR only.
    pub snrs_db: Vec<f64>,
    pub seed_policy: SeedPolicy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sessions: 10_000,
            gammas: default_gamma_grid(),
            snrs_db: Vec::new(),
            seed_policy: SeedPolicy::Shared,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub csv: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            checkpoint: "deepvlf.ckpt".into(),
            metrics: "metrics.jsonl".into(),
            csv: "results.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub core: CoreSection,
    pub channel: ChannelSection,
    pub protocol: ProtocolSection,
    #[serde(default)]
    pub codec: CodecSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
}

impl Default for RunConfig {
    /// The full-scale setting: `K = 51`, `Q = 17`, `m = 3` at 1 dB.
    fn default() -> Self {
        Self {
            seed: 0,
            core: CoreSection { k: 51, q: 17, m: 3 },
            channel: ChannelSection {
                forward_snr_db: 1.0,
                feedback_snr_db: None,
            },
            protocol: ProtocolSection {
                gamma: 1.0 - 1e-5,
                t_max: 15,
                tau_plus: None,
            },
            codec: CodecSection::default(),
            training: TrainConfig::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` assignments to a TOML table, last one winning.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::config(item.clone(), "override must look like key=value"))?;
        let key = key.trim();
        let path: Vec<&str> = key.split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::config(key, "empty key segment"));
        }
        let mut node = &mut *table;
        for seg in &path[..path.len() - 1] {
            let entry = node
                .entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::config(key, format!("`{seg}` is not a section")))?;
        }
        let value = parse_value(raw.trim());
        log::info!("override {key} = {value}");
        node.insert(path[path.len() - 1].to_string(), value);
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    /// The effective configuration as TOML; loading it back gives `self`.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.codec_config().validate()?;
        self.protocol_config()?;
        self.train_config().validate()?;
        if self.eval.sessions == 0 {
            return Err(Error::config("eval.sessions", "must be at least 1"));
        }
        if self.eval.workers == Some(0) {
            return Err(Error::config("eval.workers", "must be at least 1"));
        }
        Ok(())
    }

    pub fn channel_params(&self) -> Result<ChannelParams> {
        let feedback = match self.channel.feedback_snr_db {
            None => FeedbackMode::Noiseless,
            Some(s) if s == f64::INFINITY => FeedbackMode::Noiseless,
            Some(snr_db) => FeedbackMode::Awgn { snr_db },
        };
        ChannelParams::new(self.channel.forward_snr_db, feedback)
    }

    pub fn protocol_config(&self) -> Result<ProtocolConfig> {
        self.protocol_at(self.protocol.gamma, self.channel_params()?)
    }

    pub fn protocol_at(&self, gamma: f64, channel: ChannelParams) -> Result<ProtocolConfig> {
        let p = &self.protocol;
        match p.tau_plus {
            Some(t) => ProtocolConfig::new(gamma, t, p.t_max, channel),
            None => ProtocolConfig::derived(self.core.m, gamma, p.t_max, channel),
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        let c = &self.codec;
        CodecConfig {
            d_latent: c.d_latent,
            tau_vd: c.tau_vd,
            shallow_layers: c.shallow_layers,
            vdfe_depth: c.vdfe_depth,
            attention_scale: c.attention_scale,
            learned_projections: c.learned_projections,
            norm_eps: c.norm_eps,
            norm_momentum: c.norm_momentum,
            ..CodecConfig::new(self.core.k, self.core.q, self.core.m, self.protocol.t_max)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            target_gamma: self.protocol.gamma,
            tau_plus: self.training.tau_plus.or(self.protocol.tau_plus),
            ..self.training.clone()
        }
    }

    pub fn sweep_spec(&self) -> Result<SweepSpec> {
        let channel = self.channel_params()?;
        let snrs_db = if self.eval.snrs_db.is_empty() {
            vec![channel.forward_snr_db]
        } else {
            self.eval.snrs_db.clone()
        };
        Ok(SweepSpec {
            gammas: self.eval.gammas.clone(),
            snrs_db,
            feedback: channel.feedback,
            sessions_per_point: self.eval.sessions,
            seed: self.seed,
            seed_policy: self.eval.seed_policy,
            tau_plus: self.protocol.tau_plus,
        })
    }
}
