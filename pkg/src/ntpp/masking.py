"""Pair-wise (VQ) and block (RVQ) causal attention masks.

Position ``i`` may attend position ``j`` iff ``j`` belongs to a strictly
earlier pair-step, or to the same step *and* the same channel at a depth no
deeper than ``i``'s.  At ``D == 1`` this leaves only the diagonal of each
2x2 step block unmasked; for ``D > 1`` each ``2D x 2D`` step block is
block-diagonal with a lower-triangular ``D x D`` block per channel.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .codec import position_meta
from .errors import ShapeError

MASKED_LOGIT = -1e30


@dataclass(frozen=True, eq=False)
class AttentionMask:
    allowed: np.ndarray
    T: int
    D: int

    @property
    def side(self) -> int:
        return self.allowed.shape[0]

    def to_text(self) -> str:
        return "\n".join("".join("1" if v else "0" for v in row) for row in self.allowed)


def visibility(i: int, j: int, T: int, D: int) -> bool:
    """Closed-form visibility rule for a single (query, key) pair."""
    n = 2 * T * D
    if not (0 <= i < n and 0 <= j < n):
        raise ShapeError(f"visibility: indices ({i}, {j}) outside [0, {n}) for T={T}, D={D}")
    ti, ci, di = i // (2 * D), (i % (2 * D)) // D, i % D
    tj, cj, dj = j // (2 * D), (j % (2 * D)) // D, j % D
    if tj < ti:
        return True
    return tj == ti and cj == ci and dj <= di


def visible_np(step_q, chan_q, depth_q, step_k, chan_k, depth_k) -> np.ndarray:
    """Vectorised visibility over metadata arrays (broadcasting)."""
    return (step_k < step_q) | ((step_k == step_q) & (chan_k == chan_q) & (depth_k <= depth_q))


@lru_cache(maxsize=64)
def _build(T: int, D: int) -> np.ndarray:
    idx = np.arange(2 * T * D)
    step, chan, depth = position_meta(idx, D)
    allowed = visible_np(step[:, None], chan[:, None], depth[:, None], step[None, :], chan[None, :], depth[None, :])
    allowed.flags.writeable = False
    return allowed


def build_mask(T: int, D: int) -> AttentionMask:
    if T < 1 or D < 1:
        raise ShapeError(f"build_mask: need T >= 1 and D >= 1, got T={T}, D={D}")
    return AttentionMask(_build(T, D), T, D)
