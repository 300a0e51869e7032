"""Token-pair input embedding, cyclic depth embedding and rotary angles.

The input row for a token is ``codebook[token] + channel_proj[channel] +
d @ depth_proj`` where ``d`` is the two-dimensional cyclic depth vector.
Positions enter later, inside attention, as rotary rotations keyed by the
pair-step index so that both channels of a step share one rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .codec import InterleavedSequence
from .errors import ShapeError


@dataclass
class EmbeddingTables:
    codebook: ag.Tensor      # (V + S, d_model)
    channel_proj: ag.Tensor  # (2, d_model)
    depth_proj: ag.Tensor    # (2, d_model)
    rope_base: float = 10000.0

    def __post_init__(self):
        d_model = self.codebook.shape[1]
        if d_model % 2:
            raise ShapeError(f"d_model must be even for rotary pairing, got {d_model}")
        for name in ("channel_proj", "depth_proj"):
            t = getattr(self, name)
            if t.shape != (2, d_model):
                raise ShapeError(f"{name} must have shape (2, {d_model}), got {t.shape}")

    @property
    def d_model(self) -> int:
        return self.codebook.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.codebook.shape[0]


def cyclic_depth(i: int, D: int) -> tuple[float, float]:
    """``(sin(2*pi*i/D), cos(2*pi*i/D))``; exactly periodic in ``i`` with period ``D``."""
    if D < 1 or i < 0:
        raise ValueError(f"cyclic_depth: need i >= 0 and D >= 1, got i={i}, D={D}")
    # reducing first makes d(i) == d(i + D) bit-exact
    angle = 2.0 * math.pi * (i % D) / D
    return math.sin(angle), math.cos(angle)


def depth_vectors(depth_index: np.ndarray, D: int) -> np.ndarray:
    """Cyclic depth vectors for 1-based depths, shape ``depth_index.shape + (2,)``."""
    table = np.array([cyclic_depth(d, D) for d in range(D)])
    return table[np.asarray(depth_index) - 1]


def inverse_frequencies(head_dim: int, base: float) -> np.ndarray:
    return 1.0 / base ** (np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)


def positional_angles(t, head_dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    """Rotary ``(cos, sin)`` tables for pair-step index ``t`` (scalar or array).

    Output shape is ``np.shape(t) + (head_dim // 2,)``.  Only the step enters,
    so the A and B tokens of one step receive identical rotations.
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("positional_angles: step index must be non-negative")
    ang = t[..., None] * inverse_frequencies(head_dim, base)
    return np.cos(ang), np.sin(ang)


def embed_tokens(tokens: np.ndarray, depth_index: np.ndarray, channel: np.ndarray,
                 tables: EmbeddingTables, D: int) -> ag.Tensor:
    """Embed a token array of any leading shape.

    ``depth_index`` (1-based) and ``channel`` broadcast against ``tokens``.
    """
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= tables.vocab_size):
        raise ShapeError(f"token ids must lie in [0, {tables.vocab_size}), "
                         f"got range [{tokens.min()}, {tokens.max()}]")
    z = ag.embedding(tables.codebook, tokens)
    c = ag.embedding(tables.channel_proj, np.broadcast_to(channel, tokens.shape))
    dvec = np.broadcast_to(depth_vectors(depth_index, D), tokens.shape + (2,))
    # elementwise rather than a K=2 matmul: keeps every row's arithmetic
    # identical regardless of where the row sits in the batch
    dp = tables.depth_proj
    depth = ag.mul(ag.Tensor(dvec[..., 0:1]), dp[0]) + ag.mul(ag.Tensor(dvec[..., 1:2]), dp[1])
    return z + c + depth


def embed_sequence(seq: InterleavedSequence, tables: EmbeddingTables) -> ag.Tensor:
    """``len(seq) x d_model`` input embedding rows in interleaved order."""
    return embed_tokens(seq.tokens, seq.depth_index, seq.channel, tables, seq.depth)
