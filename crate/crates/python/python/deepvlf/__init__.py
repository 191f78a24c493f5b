"""Deep variable-length feedback codes (Rust core)."""

from ._deepvlf import (
    Codec,
    ProtocolConfig,
    baseline,
    evaluate,
    exp_weight,
    gradcheck,
    replay,
    session,
    tau_plus,
    train_codec,
)

__all__ = [
    "Codec",
    "ProtocolConfig",
    "baseline",
    "evaluate",
    "exp_weight",
    "gradcheck",
    "replay",
    "session",
    "tau_plus",
    "train_codec",
]
