use std::collections::BTreeMap;

use super::knowledge::bipolar;
use super::{Codec, CodecConfig, CodecParams, CodecSession, PowerNormalizer};
use crate::autodiff::{attention_block_coeffs, NormStats, Var};
use crate::bits::{BitMessage, DecodeMask, SIMPLEX_TOL};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// How the encoder output is scaled to unit power.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Stored running statistics (inference).
    Running,
    /// Statistics of the active symbols of the current batch (training and
    /// calibration).
    Batch,
}

/// The parameters of a codec wrapped as autodiff leaves.
#[derive(Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn new(params: &CodecParams, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, m)| {
                let v = if trainable {
                    Var::parameter(m.clone())
                } else {
                    Var::constant(m.clone())
                };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> &Var {
        &self.vars[name]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    fn layer(&self, prefix: &str) -> (&Var, &Var) {
        (&self.vars[&format!("{prefix}.w")], &self.vars[&format!("{prefix}.b")])
    }

    fn latents(&self, cfg: &CodecConfig, side: &str, input: &Var, round: usize) -> Var {
        let mut h = input.clone();
        for l in 0..cfg.vdfe_layers(round) {
            let (w, b) = self.layer(&format!("{side}.vdfe.{l}"));
            h = h.linear(w, b).relu();
        }
        h
    }

    fn mix(&self, cfg: &CodecConfig, side: &str, h: &Var) -> Var {
        let scale = cfg.attention_scale_factor();
        if cfg.learned_projections {
            let q = h.matmul(&self.vars[&format!("{side}.attn.q.w")]);
            let k = h.matmul(&self.vars[&format!("{side}.attn.k.w")]);
            Var::attention(&q, &k, h, cfg.q, scale)
        } else {
            Var::attention(h, h, h, cfg.q, scale)
        }
    }

    /// Pre-normalisation parity symbols, one per row.
    fn encoder_raw(&self, cfg: &CodecConfig, knowledge: &Var, round: usize) -> Var {
        let h = self.latents(cfg, "enc", knowledge, round);
        let agg = self.mix(cfg, "enc", &h);
        let (w0, b0) = self.layer("enc.head.0");
        let (w1, b1) = self.layer("enc.head.1");
        agg.linear(w0, b0).gelu().linear(w1, b1)
    }

    fn decoder_beliefs(&self, cfg: &CodecConfig, knowledge: &Var, round: usize) -> Var {
        let h = self.latents(cfg, "dec", knowledge, round);
        let agg = self.mix(cfg, "dec", &h);
        let (w0, b0) = self.layer("dec.head.0");
        let (w1, b1) = self.layer("dec.head.1");
        let (wc, bc) = self.layer("dec.cls");
        agg.linear(w0, b0)
            .gelu()
            .linear(w1, b1)
            .gelu()
            .linear(wc, bc)
            .softmax_rows()
    }
}

/// Runs one knowledge vector through the feature extractor of `side`
/// (`"enc"` or `"dec"`) as used in `round`.
pub fn vdfe_forward(params: &CodecParams, side: &str, knowledge: &[f64], round: usize) -> Vec<f64> {
    let vars = ParamVars::new(params, false);
    let input = Var::constant(Matrix::from_vec(1, knowledge.len(), knowledge.to_vec()));
    vars.latents(&params.config, side, &input, round)
        .value()
        .as_slice()
        .to_vec()
}

/// Aggregation weights of one session: `rho[i * Q + j]` is the weight of
/// variable node `i` in check node `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCoeffs {
    pub groups: usize,
    pub rho: Vec<f64>,
    /// Check nodes that still produce output.
    pub active: Vec<bool>,
}

impl AttentionCoeffs {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rho[i * self.groups + j]
    }

    /// Column sums of the active check nodes.
    pub fn active_column_sums(&self) -> Vec<f64> {
        (0..self.groups)
            .filter(|&j| self.active[j])
            .map(|j| (0..self.groups).map(|i| self.get(i, j)).sum())
            .collect()
    }

    pub fn is_valid(&self) -> bool {
        self.rho.iter().all(|r| *r >= 0.0)
            && self
                .active_column_sums()
                .iter()
                .all(|s| (s - 1.0).abs() <= SIMPLEX_TOL)
    }
}

/// `rho_ij = softmax_i(<l_i, l_j> / s)` with `s = sqrt(d)` when `scaled`.
/// Every variable node takes part; masked check nodes are flagged inactive.
pub fn attention_coeffs(latents: &[Vec<f64>], mask: &DecodeMask, scaled: bool) -> AttentionCoeffs {
    let d = latents.first().map_or(1, Vec::len);
    let scale = if scaled { 1.0 / (d as f64).sqrt() } else { 1.0 };
    let rows: Vec<&[f64]> = latents.iter().map(Vec::as_slice).collect();
    AttentionCoeffs {
        groups: latents.len(),
        rho: attention_block_coeffs(&rows, &rows, scale),
        active: mask.active().to_vec(),
    }
}

/// Batch state of the neural codec.
pub struct NeuralSession {
    cfg: CodecConfig,
    vars: ParamVars,
    normalizer: PowerNormalizer,
    mode: NormMode,
    rows: usize,
    enc_knowledge: Var,
    dec_knowledge: Var,
    dec_input: Option<Var>,
    beliefs: Var,
    stats: Vec<Option<NormStats>>,
}

impl NeuralSession {
    pub fn new(
        cfg: &CodecConfig,
        vars: ParamVars,
        normalizer: &PowerNormalizer,
        mode: NormMode,
        messages: &[BitMessage],
    ) -> Result<Self> {
        let layout = cfg.layout();
        let rows = messages.len() * cfg.q;
        let mut enc = Matrix::zeros(rows, layout.encoder_width());
        for (b, msg) in messages.iter().enumerate() {
            if msg.len() != cfg.k {
                return Err(Error::Shape(format!(
                    "message {b} has {} bits, codec expects {}",
                    msg.len(),
                    cfg.k
                )));
            }
            for (q, group) in msg.bits().chunks_exact(cfg.m).enumerate() {
                let row = enc.row_mut(b * cfg.q + q);
                for (slot, &bit) in row.iter_mut().zip(group) {
                    *slot = bipolar(bit);
                }
            }
        }
        let alphabet = cfg.alphabet();
        let uniform = 1.0 / alphabet as f64;
        let mut dec = Matrix::zeros(rows, layout.decoder_width());
        for r in 0..rows {
            dec.row_mut(r)[layout.belief_offset()..].fill(uniform);
        }
        Ok(Self {
            cfg: cfg.clone(),
            vars,
            normalizer: normalizer.clone(),
            mode,
            rows,
            enc_knowledge: Var::constant(enc),
            dec_knowledge: Var::constant(dec),
            dec_input: None,
            beliefs: Var::constant(Matrix::filled(rows, alphabet, uniform)),
            stats: vec![None; cfg.t_max],
        })
    }

    /// Encoder knowledge vectors for the next round.
    pub fn encoder_knowledge(&self) -> &Matrix {
        self.enc_knowledge.value()
    }

    /// Decoder knowledge vectors carried into the next round.
    pub fn decoder_knowledge(&self) -> &Matrix {
        self.dec_knowledge.value()
    }

    /// Batch statistics of the parity symbols, per round, when running in
    /// [`NormMode::Batch`].
    pub fn norm_stats(&self) -> &[Option<NormStats>] {
        &self.stats
    }

    fn check_round(&self, round: usize, active: &[bool]) -> Result<()> {
        if round == 0 || round > self.cfg.t_max {
            return Err(Error::RoundOutOfRange {
                round,
                t_max: self.cfg.t_max,
            });
        }
        if active.len() != self.rows {
            return Err(Error::Shape(format!(
                "mask covers {} rows, batch has {}",
                active.len(),
                self.rows
            )));
        }
        Ok(())
    }
}

impl CodecSession for NeuralSession {
    fn encode_round(&mut self, round: usize, active: &[bool]) -> Result<Var> {
        self.check_round(round, active)?;
        let raw = self.vars.encoder_raw(&self.cfg, &self.enc_knowledge, round);
        let (mean, var) = self.normalizer.stats(round);
        let eps = self.normalizer.eps;
        Ok(match self.mode {
            NormMode::Running => raw.fixed_norm(active, mean, var, eps),
            NormMode::Batch => {
                let (x, stats) = raw.masked_norm(active, eps, (mean, var));
                if stats.count >= 2 {
                    self.stats[round - 1] = Some(stats);
                }
                x
            }
        })
    }

    fn decode_round(&mut self, round: usize, received: &Var, active: &[bool]) -> Result<Var> {
        self.check_round(round, active)?;
        if received.value().shape() != (self.rows, 1) {
            return Err(Error::Shape(format!(
                "received packet has shape {:?}, expected ({}, 1)",
                received.value().shape(),
                self.rows
            )));
        }
        let slot = self.cfg.layout().received_slot(round);
        let input = self.dec_knowledge.scatter_cols(received, slot, active);
        let fresh = self.vars.decoder_beliefs(&self.cfg, &input, round);
        self.beliefs = self.beliefs.scatter_cols(&fresh, 0, active);
        self.dec_input = Some(input);
        Ok(self.beliefs.clone())
    }

    fn absorb_feedback(&mut self, round: usize, sent: &Var, fed_back: &Var, undecoded: &[bool]) -> Result<()> {
        self.check_round(round, undecoded)?;
        let layout = self.cfg.layout();
        self.enc_knowledge = self
            .enc_knowledge
            .scatter_cols(sent, layout.parity_slot(round), undecoded)
            .scatter_cols(fed_back, layout.feedback_slot(round), undecoded);
        let input = self
            .dec_input
            .take()
            .ok_or_else(|| Error::Shape("feedback before decoding".into()))?;
        self.dec_knowledge = input.scatter_cols(&self.beliefs, layout.belief_offset(), undecoded);
        Ok(())
    }
}

impl Codec for CodecParams {
    fn geometry(&self) -> (usize, usize, usize) {
        (self.config.q, self.config.m, self.config.t_max)
    }

    fn start(&self, messages: &[BitMessage]) -> Result<Box<dyn CodecSession + '_>> {
        Ok(Box::new(NeuralSession::new(
            &self.config,
            ParamVars::new(self, false),
            &self.normalizer,
            NormMode::Running,
            messages,
        )?))
    }
}
