use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CodecConfig;
use crate::rng::{mix_seed, stream_rng};
use crate::tensor::Matrix;
use crate::{Error, Result};

const INIT_DOMAIN: u64 = 0x1417;

/// Per-round running statistics of the pre-normalisation parity symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl PowerNormalizer {
    pub fn new(t_max: usize, eps: f64, momentum: f64) -> Self {
        Self {
            mean: vec![0.0; t_max],
            var: vec![1.0; t_max],
            eps,
            momentum,
        }
    }

    /// Statistics used at inference for `round` (1-based).
    pub fn stats(&self, round: usize) -> (f64, f64) {
        (self.mean[round - 1], self.var[round - 1])
    }

    /// Exponential moving average update from one training batch.
    pub fn update(&mut self, round: usize, mean: f64, var: f64) {
        let a = self.momentum;
        let i = round - 1;
        self.mean[i] = (1.0 - a) * self.mean[i] + a * mean;
        self.var[i] = (1.0 - a) * self.var[i] + a * var;
    }

    pub fn set(&mut self, round: usize, mean: f64, var: f64) {
        self.mean[round - 1] = mean;
        self.var[round - 1] = var;
    }
}

/// All learnable arrays of the encoder and decoder plus the power
/// normaliser. Arrays are keyed by dotted names such as `enc.vdfe.0.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodecParams {
    pub config: CodecConfig,
    arrays: BTreeMap<String, Matrix>,
    pub normalizer: PowerNormalizer,
}

/// Names and shapes of every array implied by a config, in creation order.
pub(crate) fn param_shapes(cfg: &CodecConfig) -> Vec<(String, (usize, usize))> {
    let d = cfg.d_latent;
    let layout = cfg.layout();
    let mut shapes = Vec::new();
    for (side, width) in [("enc", layout.encoder_width()), ("dec", layout.decoder_width())] {
        let layers = cfg.shallow_layers + 1;
        for l in 0..layers {
            let fan_in = if l == 0 { width } else { d };
            shapes.push((format!("{side}.vdfe.{l}.w"), (fan_in, d)));
            shapes.push((format!("{side}.vdfe.{l}.b"), (1, d)));
        }
        if cfg.learned_projections {
            shapes.push((format!("{side}.attn.q.w"), (d, d)));
            shapes.push((format!("{side}.attn.k.w"), (d, d)));
        }
        shapes.push((format!("{side}.head.0.w"), (d, d)));
        shapes.push((format!("{side}.head.0.b"), (1, d)));
        let out = if side == "enc" { 1 } else { d };
        shapes.push((format!("{side}.head.1.w"), (d, out)));
        shapes.push((format!("{side}.head.1.b"), (1, out)));
    }
    shapes.push(("dec.cls.w".into(), (d, cfg.alphabet())));
    shapes.push(("dec.cls.b".into(), (1, cfg.alphabet())));
    shapes
}

/// Deterministic initialisation: entries uniform in `[-b, b]` with
/// `b = 1/sqrt(fan_in)`, or `sqrt(6/fan_in)` for feature-extractor weights.
/// Each array comes from its own sub-stream.
pub fn init_params(cfg: &CodecConfig, seed: u64) -> Result<CodecParams> {
    cfg.validate()?;
    let base = mix_seed(seed, INIT_DOMAIN);
    let mut arrays = BTreeMap::new();
    let shapes = param_shapes(cfg);
    for (i, (name, (rows, cols))) in shapes.iter().enumerate() {
        let fan_in = if name.ends_with(".b") {
            // bias shares the fan-in of its weight, listed just before it
            shapes[i - 1].1 .0
        } else {
            *rows
        };
        // He-uniform for the ReLU feature extractor: without it the latents
        // shrink layer by layer and attention starts out uniform, which
        // erases which group a latent came from.
        let gain = if name.contains(".vdfe.") && name.ends_with(".w") { 6f64.sqrt() } else { 1.0 };
        let bound = gain / (fan_in as f64).sqrt();
        let mut rng = stream_rng(base, i as u64);
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        arrays.insert(name.clone(), Matrix::from_vec(*rows, *cols, data));
    }
    Ok(CodecParams {
        normalizer: PowerNormalizer::new(cfg.t_max, cfg.norm_eps, cfg.norm_momentum),
        config: cfg.clone(),
        arrays,
    })
}

impl CodecParams {
    pub(crate) fn from_parts(
        config: CodecConfig,
        arrays: BTreeMap<String, Matrix>,
        normalizer: PowerNormalizer,
    ) -> Result<Self> {
        let p = Self {
            config,
            arrays,
            normalizer,
        };
        p.check_shapes()?;
        Ok(p)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let expected = param_shapes(&self.config);
        if expected.len() != self.arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                expected.len(),
                self.arrays.len()
            )));
        }
        for (name, shape) in expected {
            match self.arrays.get(&name) {
                None => return Err(Error::Checkpoint(format!("missing array {name}"))),
                Some(m) if m.shape() != shape => {
                    return Err(Error::Checkpoint(format!(
                        "array {name} has shape {:?}, expected {:?}",
                        m.shape(),
                        shape
                    )))
                }
                Some(_) => {}
            }
        }
        if self.normalizer.mean.len() != self.config.t_max
            || self.normalizer.var.len() != self.config.t_max
        {
            return Err(Error::Checkpoint("normalizer length differs from t_max".into()));
        }
        if self.normalizer.var.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Checkpoint("normalizer variance must be >= 0".into()));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> &Matrix {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Matrix {
        self.arrays
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.arrays.values().all(Matrix::all_finite)
            && self.normalizer.mean.iter().all(|v| v.is_finite())
            && self.normalizer.var.iter().all(|v| v.is_finite())
    }

    /// `(name, shape)` of every array in name order.
    pub fn manifest(&self) -> Vec<(String, (usize, usize))> {
        self.arrays
            .iter()
            .map(|(k, v)| (k.clone(), v.shape()))
            .collect()
    }

    /// SHA-256 over names, shapes, values and normaliser statistics.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in &self.arrays {
            h.update(name.as_bytes());
            h.update((m.rows() as u64).to_le_bytes());
            h.update((m.cols() as u64).to_le_bytes());
            for v in m.as_slice() {
                h.update(v.to_le_bytes());
            }
        }
        for v in self.normalizer.mean.iter().chain(&self.normalizer.var) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
