"""Dual-channel token streams and their interleaved (flattened) layout.

A stream holds two time-aligned ``T x D`` token grids, one per speaker.  The
interleaved layout used by the model orders tokens step by step; inside a
step, channel A's ``D`` depth tokens come first, then channel B's::

    (a[1,1..D], b[1,1..D], a[2,1..D], b[2,1..D], ...)

Token ids ``0`` and ``1`` are reserved for silence and start-of-sequence;
content tokens start at :data:`N_SPECIALS`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import StreamError

SIL = 0
BOS = 1
N_SPECIALS = 2
DEFAULT_FRAME_RATE = 40.0

CHANNEL_A = 0
CHANNEL_B = 1
CHANNEL_NAMES = ("a", "b")


def content_id(k: int) -> int:
    """Token id of the ``k``-th content symbol."""
    return N_SPECIALS + k


@dataclass(frozen=True, eq=False)
class DualTokenStream:
    """Two aligned token grids of shape ``(T, D)``."""

    a: np.ndarray
    b: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.int64)
        b = np.asarray(self.b, dtype=np.int64)
        if a.ndim == 1:
            a = a[:, None]
        if b.ndim == 1:
            b = b[:, None]
        if a.ndim != 2 or a.shape != b.shape:
            raise StreamError(f"channel grids must share a (T, D) shape, got {a.shape} and {b.shape}")
        if a.shape[1] < 1:
            raise StreamError("depth must be at least 1")
        if (a < 0).any() or (b < 0).any():
            raise StreamError("token ids must be non-negative")
        if not self.frame_rate_hz > 0:
            raise StreamError(f"frame rate must be positive, got {self.frame_rate_hz}")
        a.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def T(self) -> int:
        return self.a.shape[0]

    @property
    def depth(self) -> int:
        return self.a.shape[1]

    def channel(self, c: int) -> np.ndarray:
        return self.a if c == CHANNEL_A else self.b

    @property
    def max_token(self) -> int:
        if self.T == 0:
            return -1
        return int(max(self.a.max(), self.b.max()))

    def duration_s(self) -> float:
        return self.T / self.frame_rate_hz

    def __eq__(self, other) -> bool:
        if not isinstance(other, DualTokenStream):
            return NotImplemented
        return (self.frame_rate_hz == other.frame_rate_hz
                and np.array_equal(self.a, other.a) and np.array_equal(self.b, other.b)
                and self.a.shape == other.a.shape)

    def __hash__(self):
        return hash((self.a.tobytes(), self.b.tobytes(), self.a.shape, self.frame_rate_hz))

    def crop(self, start: int, stop: int) -> "DualTokenStream":
        return DualTokenStream(self.a[start:stop], self.b[start:stop], self.frame_rate_hz)

    def to_record(self) -> dict:
        return {
            "frame_rate_hz": self.frame_rate_hz,
            "depth": self.depth,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DualTokenStream":
        try:
            depth = int(rec["depth"])
            a = np.asarray(rec["a"], dtype=np.int64).reshape(-1, depth)
            b = np.asarray(rec["b"], dtype=np.int64).reshape(-1, depth)
            rate = float(rec.get("frame_rate_hz", DEFAULT_FRAME_RATE))
        except (KeyError, TypeError, ValueError) as exc:
            raise StreamError(f"malformed stream record: {exc}") from None
        return cls(a, b, rate)


@dataclass(frozen=True, eq=False)
class InterleavedSequence:
    """Flattened tokens with per-position (step, channel, depth) metadata."""

    tokens: np.ndarray
    depth: int
    frame_rate_hz: float = DEFAULT_FRAME_RATE
    step: np.ndarray = field(init=False, repr=False)
    channel: np.ndarray = field(init=False, repr=False)
    depth_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        toks = np.asarray(self.tokens, dtype=np.int64).reshape(-1)
        if self.depth < 1:
            raise StreamError("depth must be at least 1")
        if toks.size % (2 * self.depth):
            raise StreamError(
                f"interleaved length {toks.size} is not divisible by 2*D = {2 * self.depth}")
        toks.flags.writeable = False
        object.__setattr__(self, "tokens", toks)
        step, channel, depth = position_meta(np.arange(toks.size), self.depth)
        object.__setattr__(self, "step", step)
        object.__setattr__(self, "channel", channel)
        object.__setattr__(self, "depth_index", depth)

    def __len__(self) -> int:
        return self.tokens.size

    @property
    def T(self) -> int:
        return self.tokens.size // (2 * self.depth)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InterleavedSequence):
            return NotImplemented
        return self.depth == other.depth and np.array_equal(self.tokens, other.tokens)

    def __hash__(self):
        return hash((self.tokens.tobytes(), self.depth))


def position_meta(i, D: int):
    """Return ``(step, channel, depth)`` for interleaved index ``i``.

    ``depth`` is 1-based; channel is :data:`CHANNEL_A` or :data:`CHANNEL_B`.
    Works elementwise on integer arrays.
    """
    i = np.asarray(i)
    step = i // (2 * D)
    channel = np.where(i % (2 * D) < D, CHANNEL_A, CHANNEL_B)
    depth = i % D + 1
    return step, channel, depth


def interleave(stream: DualTokenStream) -> InterleavedSequence:
    T, D = stream.T, stream.depth
    grid = np.stack([stream.a, stream.b], axis=1)  # (T, 2, D)
    return InterleavedSequence(grid.reshape(T * 2 * D), D, stream.frame_rate_hz)


def deinterleave(seq: InterleavedSequence) -> DualTokenStream:
    D = seq.depth
    grid = seq.tokens.reshape(-1, 2, D)
    return DualTokenStream(grid[:, 0, :], grid[:, 1, :], seq.frame_rate_hz)


def swap_channels(stream: DualTokenStream) -> DualTokenStream:
    return DualTokenStream(stream.b, stream.a, stream.frame_rate_hz)


def prepend_bos(stream: DualTokenStream) -> DualTokenStream:
    """Prefix one full pair-step of BOS tokens (both channels, all depths)."""
    bos = np.full((1, stream.depth), BOS, dtype=np.int64)
    return DualTokenStream(np.vstack([bos, stream.a]), np.vstack([bos, stream.b]),
                           stream.frame_rate_hz)


def channel_layout(stream: DualTokenStream) -> np.ndarray:
    """Tokens as a ``(2, T*D)`` array: per-channel flattened order."""
    return np.stack([stream.a.reshape(-1), stream.b.reshape(-1)])


def channel_positions(T: int, D: int) -> np.ndarray:
    """Interleaved indices of each channel's flattened tokens, shape ``(2, T*D)``."""
    t = np.repeat(np.arange(T), D)
    d = np.tile(np.arange(D), T)
    base = t * 2 * D + d
    return np.stack([base, base + D])


# --- JSON Lines ----------------------------------------------------------------

def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path) -> Iterator[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise StreamError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None


def save_streams(path, streams: Iterable[DualTokenStream]) -> None:
    write_jsonl(path, (s.to_record() for s in streams))


def load_streams(path) -> list[DualTokenStream]:
    return [DualTokenStream.from_record(r) for r in read_jsonl(path)]
