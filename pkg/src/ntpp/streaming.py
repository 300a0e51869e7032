"""Incremental decoding with a single KV cache.

A :class:`Session` owns exactly one :class:`KvCache` holding keys and values
for every committed position of both channels.  Positions are committed one
token at a time; a position of step ``t`` may be committed once the other
channel has finished step ``t - 1``, which is all its visibility requires.
Each committed position yields next-token logits for its own channel.

Attention in the incremental path uses the same key grouping as the batch
model (own channel first, then the other channel), so swapping the channels
of a session with tied channel embeddings reproduces the original arithmetic
bit for bit.
"""

from __future__ import annotations

import math
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .autograd import gelu_np, rms_norm_np, rope_np, softmax_np
from .codec import BOS, CHANNEL_A, CHANNEL_B, SIL, DualTokenStream
from .embeddings import depth_vectors, positional_angles
from .errors import CapacityError, NTPPError, StreamError
from .model import ModelParams


class KvCache:
    """Per-layer key/value rows for committed positions plus their metadata."""

    allocations = 0  # process-wide count of caches ever created

    def __init__(self, n_layers: int, d_model: int, capacity: int):
        self.keys = np.zeros((n_layers, capacity, d_model))
        self.values = np.zeros((n_layers, capacity, d_model))
        self.step = np.zeros(capacity, dtype=np.int64)
        self.channel = np.zeros(capacity, dtype=np.int64)
        self.depth = np.zeros(capacity, dtype=np.int64)
        self.length = 0
        KvCache.allocations += 1

    @property
    def capacity(self) -> int:
        return self.keys.shape[1]

    @property
    def nbytes(self) -> int:
        """Bytes held by the committed key/value rows."""
        n = self.length
        return self.keys[:, :n].nbytes + self.values[:, :n].nbytes


@dataclass(frozen=True)
class ChunkConfig:
    frames: int = 5  # lambda, in frames per chunk
    depth: int = 1

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("chunk size must be at least one frame")

    @property
    def token_budget(self) -> int:
        return self.frames * self.depth


def sample_token(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw a token id; ``temperature <= 0`` is greedy.  BOS is never drawn."""
    z = np.array(logits, dtype=np.float64)
    z[BOS] = -np.inf
    if temperature <= 0:
        return int(np.argmax(z))
    p = softmax_np(z / temperature)
    cdf = np.cumsum(p)
    u = rng.random()
    return int(min(np.searchsorted(cdf, u * cdf[-1], side="right"), z.size - 1))


class Session:
    """One decoding session: one cache, one logical thread of execution."""

    def __init__(self, params: ModelParams, capacity_steps: int | None = None,
                 seed: int = 0, channel_seeds: tuple[int, int] | None = None):
        cfg = params.config
        self.params = params
        self.cfg = cfg
        steps = cfg.max_steps if capacity_steps is None else min(capacity_steps, cfg.max_steps)
        self.cache = KvCache(cfg.n_layers, cfg.d_model, 2 * steps * cfg.depth)
        seeds = channel_seeds if channel_seeds is not None else (
            int(np.random.default_rng([seed, 0]).integers(2**31)),
            int(np.random.default_rng([seed, 1]).integers(2**31)))
        self.rngs = [np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])]
        self.positions: list[list[int]] = [[], []]   # cache rows per channel, in order
        self.last_logits: list[np.ndarray | None] = [None, None]
        self._depth_table = depth_vectors(np.arange(1, cfg.depth + 1), cfg.depth)
        self._inv_sqrt = 1.0 / math.sqrt(cfg.head_dim)

    # bookkeeping -------------------------------------------------------------
    def committed(self, channel: int) -> int:
        return len(self.positions[channel])

    def steps_done(self, channel: int) -> int:
        return self.committed(channel) // self.cfg.depth

    @property
    def length(self) -> int:
        return self.cache.length

    # core --------------------------------------------------------------------
    def commit(self, channel: int, token: int) -> np.ndarray:
        """Append one token of ``channel``; returns the logits it produces."""
        cfg, cache = self.cfg, self.cache
        D = cfg.depth
        j = self.committed(channel)
        t, d = j // D, j % D + 1
        other = 1 - channel
        if self.committed(other) < t * D:
            raise NTPPError(f"cannot commit step {t} of channel {channel} before the other "
                            f"channel finishes step {t - 1}")
        if cache.length >= cache.capacity:
            raise CapacityError(f"KV cache full ({cache.capacity} positions)")
        if not 0 <= token < cfg.vocab_size:
            raise StreamError(f"token {token} outside vocabulary of size {cfg.vocab_size}")

        p = self.params
        n = cache.length
        cache.step[n], cache.channel[n], cache.depth[n] = t, channel, d
        self.positions[channel].append(n)
        own = self.positions[channel]
        cross = self.positions[other][: t * D]
        rows = np.array(own + cross, dtype=np.int64)

        H, dh = cfg.n_heads, cfg.head_dim
        cos, sin = positional_angles(t, dh, cfg.rope_base)
        dv = self._depth_table[d - 1]
        dp = p.tables.depth_proj.data
        x = (p.tables.codebook.data[token] + p.tables.channel_proj.data[channel]
             + (dv[0] * dp[0] + dv[1] * dp[1]))
        for li, layer in enumerate(p.layers):
            h = rms_norm_np(x, layer["attn_norm"].data, cfg.norm_eps)
            q = rope_np((h @ layer["wq"].data).reshape(H, dh), cos, sin)
            k = rope_np((h @ layer["wk"].data).reshape(H, dh), cos, sin)
            cache.keys[li, n] = k.reshape(-1)
            cache.values[li, n] = h @ layer["wv"].data
            K = cache.keys[li, rows].reshape(-1, H, dh)
            V = cache.values[li, rows].reshape(-1, H, dh)
            scores = np.einsum("hd,mhd->hm", q, K) * self._inv_sqrt
            attn = np.einsum("hm,mhd->hd", softmax_np(scores), V).reshape(-1)
            x = x + attn @ layer["wo"].data
            h = rms_norm_np(x, layer["ffn_norm"].data, cfg.norm_eps)
            x = x + gelu_np(h @ layer["w1"].data) @ layer["w2"].data
        logits = rms_norm_np(x, p.final_norm.data, cfg.norm_eps) @ p.head.data
        cache.length = n + 1
        self.last_logits[channel] = logits
        return logits

    def commit_frame(self, channel: int, tokens: Sequence[int]) -> list[np.ndarray]:
        if len(tokens) != self.cfg.depth:
            raise StreamError(f"frame must carry {self.cfg.depth} tokens, got {len(tokens)}")
        return [self.commit(channel, int(tok)) for tok in tokens]

    def commit_bos(self) -> None:
        bos = [BOS] * self.cfg.depth
        self.commit_frame(CHANNEL_A, bos)
        self.commit_frame(CHANNEL_B, bos)

    def generate_frame(self, channel: int, temperature: float) -> list[int]:
        """Sample and commit one frame (all depths, innermost sequentially)."""
        out = []
        for _ in range(self.cfg.depth):
            if self.last_logits[channel] is None:
                raise NTPPError("nothing committed on this channel yet (commit BOS first)")
            tok = sample_token(self.last_logits[channel], temperature, self.rngs[channel])
            self.commit(channel, tok)
            out.append(tok)
        return out


# --- free-running generation -----------------------------------------------------

def channel_seeds(seed: int, index: int) -> tuple[int, int]:
    """Per-channel sampling seeds for sample ``index`` of a run."""
    return (int(np.random.default_rng([seed, index, 0]).integers(2**31)),
            int(np.random.default_rng([seed, index, 1]).integers(2**31)))


def generate_free(params: ModelParams, prompt: DualTokenStream | None, steps: int,
                  temperature: float = 1.0, seed: int = 0,
                  channel_seeds: tuple[int, int] | None = None) -> DualTokenStream:
    """Continue ``prompt`` (``None`` = BOS only) by ``steps`` sampled pair-steps."""
    cfg = params.config
    D = cfg.depth
    n_prompt = 0 if prompt is None else prompt.T
    if prompt is not None and prompt.depth != D:
        raise StreamError(f"prompt depth {prompt.depth} does not match model depth {D}")
    total = 1 + n_prompt + steps
    if total > cfg.max_steps:
        raise CapacityError(f"{total} pair-steps exceed max_steps={cfg.max_steps}")
    sess = Session(params, capacity_steps=total, seed=seed, channel_seeds=channel_seeds)
    sess.commit_bos()
    a, b = [], []
    for t in range(n_prompt):
        sess.commit_frame(CHANNEL_A, prompt.a[t])
        sess.commit_frame(CHANNEL_B, prompt.b[t])
        a.append(list(prompt.a[t]))
        b.append(list(prompt.b[t]))
    for _ in range(steps):
        # b's logits come from step t-1 positions, so committing a_t first
        # cannot influence them
        a.append(sess.generate_frame(CHANNEL_A, temperature))
        b.append(sess.generate_frame(CHANNEL_B, temperature))
    rate = prompt.frame_rate_hz if prompt is not None else 40.0
    return DualTokenStream(np.array(a, dtype=np.int64).reshape(-1, D),
                           np.array(b, dtype=np.int64).reshape(-1, D), rate)


def incremental_logits(params: ModelParams, stream: DualTokenStream) -> np.ndarray:
    """Logits for every position of the BOS-prefixed stream, interleaved order,
    computed through the cache one position at a time."""
    D = params.config.depth
    sess = Session(params, capacity_steps=stream.T + 1)
    out = [np.stack(sess.commit_frame(CHANNEL_A, [BOS] * D)),
           np.stack(sess.commit_frame(CHANNEL_B, [BOS] * D))]
    for t in range(stream.T):
        out.append(np.stack(sess.commit_frame(CHANNEL_A, stream.a[t])))
        out.append(np.stack(sess.commit_frame(CHANNEL_B, stream.b[t])))
    return np.concatenate(out)


# --- chunk-wise conversation -----------------------------------------------------

@dataclass
class RoundLog:
    round: int
    latency_ms: float
    cache_bytes: int
    committed: int
    consumed_tokens: int
    emitted_tokens: int


@dataclass
class ConverseResult:
    frames: list[list[int]] = field(default_factory=list)
    rounds: list[RoundLog] = field(default_factory=list)


class Conversation:
    """Chunk-alternating conditional generation for the assistant (channel B).

    User frames are buffered FIFO.  Once ``chunk.frames`` of them are waiting
    (or immediately, with ``eager``) they are committed one step at a time,
    each followed by a sampled assistant frame for the same step, so the
    cache always holds the interleaved merged order.
    """

    def __init__(self, params: ModelParams, chunk: ChunkConfig, temperature: float = 0.8,
                 seed: int = 0, eager: bool = False, capacity_steps: int | None = None):
        if chunk.depth != params.config.depth:
            raise StreamError(f"chunk depth {chunk.depth} does not match model depth {params.config.depth}")
        self.params = params
        self.chunk = chunk
        self.temperature = temperature
        self.eager = eager
        self.session = Session(params, capacity_steps=capacity_steps, seed=seed)
        self.session.commit_bos()
        self.pending: deque = deque()
        self.result = ConverseResult()
        self._ready_at: float | None = None

    def _validate(self, frame) -> list[int]:
        cfg = self.params.config
        try:
            toks = [int(x) for x in frame]
        except (TypeError, ValueError):
            raise StreamError(f"malformed frame {frame!r}") from None
        if len(toks) != cfg.depth:
            raise StreamError(f"frame must carry {cfg.depth} tokens, got {len(toks)}")
        for tok in toks:
            if not 0 <= tok < cfg.vocab_size or tok == BOS:
                raise StreamError(f"invalid user token {tok}")
        return toks

    def feed(self, frame) -> list[list[int]]:
        """Queue one user frame; returns assistant frames emitted as a result."""
        self.pending.append(self._validate(frame))
        if self.eager or len(self.pending) >= self.chunk.frames:
            self._ready_at = time.perf_counter()
            return self._run_chunk()
        return []

    def finish(self) -> list[list[int]]:
        """Flush a trailing partial chunk so every user frame gets an answer."""
        if not self.pending:
            return []
        self._ready_at = time.perf_counter()
        return self._run_chunk()

    def _run_chunk(self) -> list[list[int]]:
        n = min(len(self.pending), self.chunk.frames)
        frames = [self.pending.popleft() for _ in range(n)]
        sess = self.session
        emitted, first_at = [], None
        for user in frames:
            sess.commit_frame(CHANNEL_A, user)
            out = sess.generate_frame(CHANNEL_B, self.temperature)
            if first_at is None:
                first_at = time.perf_counter()
            emitted.append(out)
        D = self.params.config.depth
        self.result.frames.extend(emitted)
        self.result.rounds.append(RoundLog(
            round=len(self.result.rounds) + 1,
            latency_ms=(first_at - self._ready_at) * 1000.0,
            cache_bytes=sess.cache.nbytes,
            committed=sess.length,
            consumed_tokens=n * D,
            emitted_tokens=len(emitted) * D,
        ))
        return emitted


def converse(params: ModelParams, user_frames: Iterable, chunk: ChunkConfig,
             temperature: float = 0.8, seed: int = 0, eager: bool = False,
             capacity_steps: int | None = None) -> Iterator[tuple[int, list[int]]]:
    """Stream ``(frame_index, assistant_frame)`` pairs while user frames arrive.

    A reader thread moves user frames into a FIFO queue; this generator
    drains it.  Nothing is dropped: frames that arrive while a chunk is being
    generated wait in the queue.  The :class:`Conversation` is available as
    the generator's return value (``StopIteration.value``).
    """
    conv = Conversation(params, chunk, temperature, seed, eager, capacity_steps)
    q: queue.Queue = queue.Queue()
    done = object()
    errors: list[BaseException] = []

    def reader():
        try:
            for frame in user_frames:
                q.put(frame)
        except BaseException as exc:  # surfaced in the consumer
            errors.append(exc)
        finally:
            q.put(done)

    threading.Thread(target=reader, daemon=True).start()
    index = 0
    while True:
        item = q.get()
        if item is done:
            break
        for out in conv.feed(item):
            yield index, out
            index += 1
    if errors:
        raise errors[0]
    for out in conv.finish():
        yield index, out
        index += 1
    return conv


def run_conversation(params: ModelParams, user_frames: Iterable, chunk: ChunkConfig,
                     **kwargs) -> Conversation:
    gen = converse(params, user_frames, chunk, **kwargs)
    while True:
        try:
            next(gen)
        except StopIteration as stop:
            return stop.value


# --- latency benchmark -----------------------------------------------------------

@dataclass
class BenchResult:
    rounds: list[RoundLog]
    outputs: list[list[int]]
    bytes_per_position: int


def _user_frames(params: ModelParams, n: int, rng: np.random.Generator) -> list[list[int]]:
    cfg = params.config
    content = rng.integers(2, cfg.vocab_size, size=(n, cfg.depth))
    silent = rng.random(n) < 0.3
    content[silent] = SIL
    return content.tolist()


def bench_latency(params: ModelParams, rounds: int, chunk: ChunkConfig, warmup: int = 2,
                  seed: int = 0, temperature: float = 0.8) -> BenchResult:
    """Run ``rounds`` chunk alternations and time each one.

    Latency is measured from the moment a chunk's last user frame is queued
    to the moment the first assistant token of that round is sampled.
    Warm-up rounds run in a separate, discarded session.
    """
    cfg = params.config
    steps = 1 + rounds * chunk.frames
    if steps > cfg.max_steps:
        raise CapacityError(f"{rounds} rounds of {chunk.frames} frames exceed max_steps={cfg.max_steps}")
    if warmup:
        warm = Conversation(params, chunk, temperature, seed + 1,
                            capacity_steps=1 + warmup * chunk.frames)
        for frame in _user_frames(params, warmup * chunk.frames, np.random.default_rng(seed + 1)):
            warm.feed(frame)
    conv = Conversation(params, chunk, temperature, seed, capacity_steps=steps)
    for frame in _user_frames(params, rounds * chunk.frames, np.random.default_rng(seed)):
        conv.feed(frame)
    return BenchResult(conv.result.rounds, conv.result.frames,
                       cfg.n_layers * 2 * cfg.d_model * 8)
