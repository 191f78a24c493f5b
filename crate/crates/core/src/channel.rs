//! AWGN forward channel, noiseless or AWGN feedback channel, and power
//! accounting.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{stream_id, stream_rng, Purpose};
use crate::{Error, Result};

/// `sigma^2 = 10^(-snr_db/10)` for unit-power signalling. `+inf` dB maps to 0.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FeedbackMode {
    Noiseless,
    Awgn { snr_db: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelParams {
    pub forward_snr_db: f64,
    pub feedback: FeedbackMode,
}

impl ChannelParams {
    pub fn new(forward_snr_db: f64, feedback: FeedbackMode) -> Result<Self> {
        if forward_snr_db.is_nan() {
            return Err(Error::config("channel.forward_snr_db", "must be a number"));
        }
        if let FeedbackMode::Awgn { snr_db } = feedback {
            if !snr_db.is_finite() {
                return Err(Error::config(
                    "channel.feedback_snr_db",
                    "awgn feedback needs a finite SNR",
                ));
            }
        }
        Ok(Self {
            forward_snr_db,
            feedback,
        })
    }

    pub fn noiseless_feedback(forward_snr_db: f64) -> Self {
        Self {
            forward_snr_db,
            feedback: FeedbackMode::Noiseless,
        }
    }

    pub fn sigma2_forward(&self) -> f64 {
        snr_db_to_sigma2(self.forward_snr_db)
    }

    /// Feedback noise variance; zero when the feedback link is noiseless.
    pub fn sigma2_feedback(&self) -> f64 {
        match self.feedback {
            FeedbackMode::Noiseless => 0.0,
            FeedbackMode::Awgn { snr_db } => snr_db_to_sigma2(snr_db),
        }
    }

    /// Feedback SNR in dB, `+inf` for noiseless feedback.
    pub fn feedback_snr_db(&self) -> f64 {
        match self.feedback {
            FeedbackMode::Noiseless => f64::INFINITY,
            FeedbackMode::Awgn { snr_db } => snr_db,
        }
    }
}

/// Identifies one reproducible noise sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseStream {
    pub seed: u64,
    pub stream: u64,
}

impl NoiseStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { seed, stream }
    }

    /// The stream for one direction of one round of one session.
    pub fn for_round(seed: u64, session: u64, round: usize, purpose: Purpose) -> Self {
        Self::new(seed, stream_id(session, round, purpose))
    }

    /// `n` i.i.d. `N(0, sigma2)` samples. `sigma2 == 0` yields exact zeros.
    pub fn gaussian(&self, n: usize, sigma2: f64) -> Vec<f64> {
        if sigma2 == 0.0 {
            return vec![0.0; n];
        }
        let sigma = sigma2.sqrt();
        let mut rng = stream_rng(self.seed, self.stream);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sigma * z
            })
            .collect()
    }
}

fn add_noise(x: &[f64], sigma2: f64, stream: &NoiseStream) -> Vec<f64> {
    if sigma2 == 0.0 {
        return x.to_vec();
    }
    let w = stream.gaussian(x.len(), sigma2);
    x.iter().zip(&w).map(|(x, w)| x + w).collect()
}

/// `y = x + w`, `w ~ N(0, sigma^2 I)`.
pub fn transmit_forward(x: &[f64], params: &ChannelParams, stream: &NoiseStream) -> Vec<f64> {
    add_noise(x, params.sigma2_forward(), stream)
}

/// Passes the received symbols back to the transmitter. Decoded-group indices
/// never go through here; they travel on an error-free control channel.
pub fn transmit_feedback(y: &[f64], params: &ChannelParams, stream: &NoiseStream) -> Vec<f64> {
    match params.feedback {
        FeedbackMode::Noiseless => y.to_vec(),
        FeedbackMode::Awgn { .. } => add_noise(y, params.sigma2_feedback(), stream),
    }
}

/// Running average of `x^2` over transmitted symbols.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PowerMeter {
    pub sum_sq: f64,
    pub symbols: u64,
}

impl PowerMeter {
    pub fn push(&mut self, x: f64) {
        self.sum_sq += x * x;
        self.symbols += 1;
    }

    pub fn merge(&mut self, other: &PowerMeter) {
        self.sum_sq += other.sum_sq;
        self.symbols += other.symbols;
    }

    pub fn average(&self) -> Result<f64> {
        if self.symbols == 0 {
            return Err(Error::Empty("no transmitted symbols"));
        }
        Ok(self.sum_sq / self.symbols as f64)
    }
}

/// Average power per transmitted symbol.
pub fn measure_avg_power<I: IntoIterator<Item = f64>>(symbols: I) -> Result<f64> {
    let mut meter = PowerMeter::default();
    symbols.into_iter().for_each(|x| meter.push(x));
    meter.average()
}
