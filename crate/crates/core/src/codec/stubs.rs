//! Non-learned codecs for exercising the protocol and the evaluation harness.

use super::knowledge::bipolar;
use super::{Codec, CodecSession};
use crate::autodiff::Var;
use crate::bits::{message_to_indices, BitMessage};
use crate::tensor::Matrix;
use crate::{Error, Result};

/// Knows the message: its belief is one-hot on the truth from round 1.
#[derive(Clone, Copy, Debug)]
pub struct OracleCodec {
    pub q: usize,
    pub m: usize,
    pub t_max: usize,
}

/// Never learns anything: uniform beliefs forever.
#[derive(Clone, Copy, Debug)]
pub struct UniformCodec {
    pub q: usize,
    pub m: usize,
    pub t_max: usize,
}

struct StubSession {
    m: usize,
    first_bits: Vec<f64>,
    beliefs: Matrix,
}

impl StubSession {
    fn new(q: usize, m: usize, messages: &[BitMessage], oracle: bool) -> Result<Self> {
        let alphabet = 1 << m;
        let rows = messages.len() * q;
        let mut beliefs = Matrix::filled(rows, alphabet, 1.0 / alphabet as f64);
        let mut first_bits = Vec::with_capacity(rows);
        for msg in messages {
            if msg.len() != q * m {
                return Err(Error::Shape(format!(
                    "message has {} bits, codec expects {}",
                    msg.len(),
                    q * m
                )));
            }
            first_bits.extend(msg.bits().chunks_exact(m).map(|g| bipolar(g[0])));
        }
        if oracle {
            let truth: Vec<usize> = messages
                .iter()
                .flat_map(|msg| message_to_indices(msg, m))
                .collect();
            for (r, t) in truth.into_iter().enumerate() {
                let row = beliefs.row_mut(r);
                row.fill(0.0);
                row[t] = 1.0;
            }
        }
        Ok(Self {
            m,
            first_bits,
            beliefs,
        })
    }
}

impl CodecSession for StubSession {
    fn encode_round(&mut self, _round: usize, active: &[bool]) -> Result<Var> {
        let x = self
            .first_bits
            .iter()
            .zip(active)
            .map(|(b, on)| if *on { *b } else { 0.0 })
            .collect();
        Ok(Var::constant(Matrix::column_vector(x)))
    }

    fn decode_round(&mut self, _round: usize, received: &Var, _active: &[bool]) -> Result<Var> {
        if received.value().rows() != self.beliefs.rows() {
            return Err(Error::Shape("received packet misaligned".into()));
        }
        debug_assert_eq!(self.beliefs.cols(), 1 << self.m);
        Ok(Var::constant(self.beliefs.clone()))
    }

    fn absorb_feedback(&mut self, _: usize, _: &Var, _: &Var, _: &[bool]) -> Result<()> {
        Ok(())
    }
}

impl Codec for OracleCodec {
    fn geometry(&self) -> (usize, usize, usize) {
        (self.q, self.m, self.t_max)
    }

    fn start(&self, messages: &[BitMessage]) -> Result<Box<dyn CodecSession + '_>> {
        Ok(Box::new(StubSession::new(self.q, self.m, messages, true)?))
    }
}

impl Codec for UniformCodec {
    fn geometry(&self) -> (usize, usize, usize) {
        (self.q, self.m, self.t_max)
    }

    fn start(&self, messages: &[BitMessage]) -> Result<Box<dyn CodecSession + '_>> {
        Ok(Box::new(StubSession::new(self.q, self.m, messages, false)?))
    }
}
