//! The attention-based encoder and decoder.
//!
//! Both sides follow the same shape: per-group knowledge vectors go through a
//! variable-depth feature extractor, the latents are mixed by single-block
//! self-attention across the `Q` groups of a session, and a small header maps
//! every mixed latent to an output. The encoder emits one parity symbol per
//! group, the decoder a belief over the group alphabet.

mod checkpoint;
mod knowledge;
mod network;
mod params;
mod stubs;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::bits::{BitMessage, GroupAlphabet};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, ManifestEntry};
pub use knowledge::{assemble_knowledge, GroupHistory, KnowledgeLayout, KnowledgeVector, Side};
pub use network::{attention_coeffs, vdfe_forward, AttentionCoeffs, NeuralSession, NormMode, ParamVars};
pub use params::{init_params, CodecParams, PowerNormalizer};
pub use stubs::{OracleCodec, UniformCodec};

/// Depth policy of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VdfeDepth {
    /// Shallow stack up to `tau_vd`, one extra layer afterwards.
    Variable,
    /// Always the shallow stack.
    Shallow,
    /// Always the deep stack.
    Deep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Message length `K`.
    pub k: usize,
    /// Number of groups `Q`.
    pub q: usize,
    /// Bits per group `m`.
    pub m: usize,
    /// Round cap; fixes the knowledge-vector widths.
    pub t_max: usize,
    #[serde(default = "defaults::d_latent")]
    pub d_latent: usize,
    #[serde(default = "defaults::tau_vd")]
    pub tau_vd: usize,
    #[serde(default = "defaults::shallow_layers")]
    pub shallow_layers: usize,
    #[serde(default = "defaults::vdfe_depth")]
    pub vdfe_depth: VdfeDepth,
    /// Divide attention scores by `sqrt(d_latent)`.
    #[serde(default = "defaults::yes")]
    pub attention_scale: bool,
    /// Learned query/key projections instead of raw latents.
    #[serde(default)]
    pub learned_projections: bool,
    #[serde(default = "defaults::norm_eps")]
    pub norm_eps: f64,
    #[serde(default = "defaults::norm_momentum")]
    pub norm_momentum: f64,
}

mod defaults {
    use super::VdfeDepth;

    pub fn d_latent() -> usize {
        32
    }
    pub fn tau_vd() -> usize {
        3
    }
    pub fn shallow_layers() -> usize {
        3
    }
    pub fn vdfe_depth() -> VdfeDepth {
        VdfeDepth::Variable
    }
    pub fn yes() -> bool {
        true
    }
    pub fn norm_eps() -> f64 {
        1e-8
    }
    pub fn norm_momentum() -> f64 {
        0.05
    }
}

impl CodecConfig {
    /// Defaults for everything but the message geometry and the round cap.
    pub fn new(k: usize, q: usize, m: usize, t_max: usize) -> Self {
        Self {
            k,
            q,
            m,
            t_max,
            d_latent: defaults::d_latent(),
            tau_vd: defaults::tau_vd(),
            shallow_layers: defaults::shallow_layers(),
            vdfe_depth: defaults::vdfe_depth(),
            attention_scale: true,
            learned_projections: false,
            norm_eps: defaults::norm_eps(),
            norm_momentum: defaults::norm_momentum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.m == 0 {
            return Err(Error::config("core.q", "q and m must be positive"));
        }
        if self.k != self.q * self.m {
            return Err(Error::config(
                "core.k",
                format!("k = {} but q * m = {}", self.k, self.q * self.m),
            ));
        }
        GroupAlphabet::new(self.m)?;
        if self.t_max == 0 || self.t_max > 1000 {
            return Err(Error::config("protocol.t_max", "must be in [1, 1000]"));
        }
        if self.d_latent == 0 {
            return Err(Error::config("codec.d_latent", "must be positive"));
        }
        if self.shallow_layers == 0 {
            return Err(Error::config("codec.shallow_layers", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("codec.norm_eps", "must be positive"));
        }
        if !(self.norm_momentum > 0.0 && self.norm_momentum <= 1.0) {
            return Err(Error::config("codec.norm_momentum", "must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn alphabet(&self) -> usize {
        1 << self.m
    }

    pub fn layout(&self) -> KnowledgeLayout {
        KnowledgeLayout::new(self.m, self.t_max)
    }

    /// Number of fully-connected layers the feature extractor uses at `round`.
    pub fn vdfe_layers(&self, round: usize) -> usize {
        match self.vdfe_depth {
            VdfeDepth::Shallow => self.shallow_layers,
            VdfeDepth::Deep => self.shallow_layers + 1,
            VdfeDepth::Variable if round <= self.tau_vd => self.shallow_layers,
            VdfeDepth::Variable => self.shallow_layers + 1,
        }
    }

    pub fn attention_scale_factor(&self) -> f64 {
        if self.attention_scale {
            1.0 / (self.d_latent as f64).sqrt()
        } else {
            1.0
        }
    }

    /// SHA-256 of the canonical JSON form, used to tie checkpoints to configs.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// Something that can play both ends of a batch of sessions.
pub trait Codec: Sync {
    fn geometry(&self) -> (usize, usize, usize);

    /// Starts a batch; `messages[b]` is the payload of session `b`.
    fn start(&self, messages: &[BitMessage]) -> Result<Box<dyn CodecSession + '_>>;
}

/// Per-batch codec state. Rows are laid out `b * Q + q`.
pub trait CodecSession {
    /// Parity symbols of round `round` for every row; inactive rows are 0.
    fn encode_round(&mut self, round: usize, active: &[bool]) -> Result<Var>;

    /// Beliefs after round `round` (`rows x 2^m`). Rows that are not active
    /// keep their previous belief.
    fn decode_round(&mut self, round: usize, received: &Var, active: &[bool]) -> Result<Var>;

    /// Appends this round's parity and fed-back symbols to the knowledge of
    /// the groups that remain undecoded.
    fn absorb_feedback(&mut self, round: usize, sent: &Var, fed_back: &Var, undecoded: &[bool]) -> Result<()>;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_geometry() {
        assert!(CodecConfig::new(51, 17, 3, 15).validate().is_ok());
        assert!(CodecConfig::new(50, 17, 3, 15).validate().is_err());
        let mut c = CodecConfig::new(6, 3, 2, 15);
        c.d_latent = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn depth_switches_after_tau_vd() {
        let c = CodecConfig::new(6, 3, 2, 15);
        assert_eq!(c.tau_vd, 3);
        assert_eq!(c.vdfe_layers(3), 3);
        assert_eq!(c.vdfe_layers(4), 4);
    }

    #[test]
    fn digest_tracks_config() {
        let a = CodecConfig::new(6, 3, 2, 15);
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.d_latent = 16;
        assert_ne!(a.digest(), b.digest());
    }
}
