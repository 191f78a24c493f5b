//! Deep variable-length feedback (VLF) codes.
//!
//! A message of `K` bits is split into `Q` groups of `m` bits. In every
//! communication round the transmitter sends one parity symbol per undecoded
//! group over an AWGN channel; the receiver updates a belief over the `2^m`
//! patterns of each group and declares a group decoded as soon as its largest
//! belief reaches the threshold `gamma`. Received symbols and decoded indices
//! are fed back, so both sides share the decoding mask.
//!
//! Crate layout:
//!
//! - [`bits`]: messages, groups, beliefs, masks, stopping times and code rate.
//! - [`channel`]: AWGN forward/feedback channels with counter-based noise streams.
//! - [`autodiff`]: the small reverse-mode tape the codec is trained with.
//! - [`codec`]: attention-based encoder/decoder graphs and checkpoints.
//! - [`protocol`]: the multi-round session loop, transcripts and replay.
//! - [`training`]: losses, AdamW, the two-phase schedule and gradient checks.
//! - [`eval`]: Monte-Carlo BLER/rate/power estimation, sweeps and CSV output.
//! - [`config`]: the merged run configuration used by the CLI.

pub mod autodiff;
pub mod bits;
pub mod channel;
pub mod codec;
pub mod config;
mod error;
pub mod eval;
pub mod protocol;
pub mod rng;
pub mod tensor;
pub mod training;

pub use bits::{
    BeliefMatrix, BitGroup, BitMessage, DecodeMask, GroupAlphabet, StoppingRecord,
};
pub use channel::{ChannelParams, FeedbackMode, NoiseStream};
pub use codec::{Codec, CodecConfig, CodecParams};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use eval::{EvalResult, SweepSpec};
pub use protocol::{ProtocolConfig, SessionTranscript};
pub use training::{LossConfig, LossVariant, TrainConfig};
