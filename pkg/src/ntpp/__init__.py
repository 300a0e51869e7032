"""Next-token-pair prediction for dual-channel token streams."""

from .codec import BOS, SIL, DualTokenStream, InterleavedSequence, deinterleave, interleave, swap_channels
from .masking import AttentionMask, build_mask, visibility
from .model import ModelConfig, ModelParams, forward, joint_logprob, loss

__version__ = "0.1.0"

__all__ = [
    "BOS", "SIL", "DualTokenStream", "InterleavedSequence", "deinterleave", "interleave",
    "swap_channels", "AttentionMask", "build_mask", "visibility", "ModelConfig", "ModelParams",
    "forward", "joint_logprob", "loss",
]
