"""Dual-channel decoder-only transformer trained by next-token-pair prediction.

Internally every sequence is held with an explicit channel axis: a batch of
token arrays of shape ``(B, 2, L)`` where ``L = T * D`` is one channel's
flattened (step-major, depth-minor) length.  Attention for a query in channel
``c`` looks at two key groups, its own channel ("self") and the other channel
("cross"), concatenated in that order.  Because the groups are defined
relative to the query's channel, swapping the two channels permutes the
computation without changing a single floating-point operation, which is what
makes channel-swap equivariance exact.

Each position predicts the next token of its own channel (flattened order);
a BOS pair-step is prepended so the first real tokens also get a prediction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .codec import (BOS, N_SPECIALS, DualTokenStream, InterleavedSequence, channel_positions,
                    prepend_bos)
from .embeddings import EmbeddingTables, embed_tokens, positional_angles
from .errors import CapacityError, ShapeError, StreamError
from .masking import MASKED_LOGIT, AttentionMask, build_mask


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    vocab: int = 32          # content symbols; specials are added on top
    specials: int = N_SPECIALS
    depth: int = 1
    max_steps: int = 256     # pair-steps, BOS included
    rope_base: float = 10000.0
    seed: int = 0
    ffn_mult: int = 4
    norm_eps: float = 1e-6

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "vocab", "depth", "max_steps", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"ModelConfig.{name} must be positive")
        if self.specials != N_SPECIALS:
            raise ValueError(f"ModelConfig.specials must be {N_SPECIALS} (SIL, BOS)")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.head_dim % 2:
            raise ValueError("head dimension must be even for rotary embeddings")

    @property
    def vocab_size(self) -> int:
        return self.vocab + self.specials

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_ff(self) -> int:
        return self.ffn_mult * self.d_model

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


LAYER_PARAMS = ("attn_norm", "wq", "wk", "wv", "wo", "ffn_norm", "w1", "w2")


class ModelParams:
    """All learnable weights.

    :meth:`named_parameters` fixes the canonical ordering used by checkpoints:
    ``codebook, channel_proj, depth_proj``, then for each layer
    ``attn_norm, wq, wk, wv, wo, ffn_norm, w1, w2``, then ``final_norm, head``.
    """

    def __init__(self, config: ModelConfig, tables: EmbeddingTables, layers: list[dict],
                 final_norm: ag.Tensor, head: ag.Tensor):
        self.config = config
        self.tables = tables
        self.layers = layers
        self.final_norm = final_norm
        self.head = head

    @classmethod
    def init(cls, config: ModelConfig, seed: int | None = None) -> "ModelParams":
        rng = np.random.default_rng(config.seed if seed is None else seed)
        dm, ff, V = config.d_model, config.d_ff, config.vocab_size
        resid = 0.02 / math.sqrt(2 * config.n_layers)

        def w(*shape, std=0.02):
            return ag.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        def ones(n):
            return ag.Tensor(np.ones(n), requires_grad=True)

        tables = EmbeddingTables(w(V, dm), w(2, dm), w(2, dm), config.rope_base)
        layers = []
        for _ in range(config.n_layers):
            layers.append({
                "attn_norm": ones(dm), "wq": w(dm, dm), "wk": w(dm, dm), "wv": w(dm, dm),
                "wo": w(dm, dm, std=resid), "ffn_norm": ones(dm), "w1": w(dm, ff),
                "w2": w(ff, dm, std=resid),
            })
        return cls(config, tables, layers, ones(dm), w(dm, V))

    def named_parameters(self) -> list[tuple[str, ag.Tensor]]:
        out = [("codebook", self.tables.codebook), ("channel_proj", self.tables.channel_proj),
               ("depth_proj", self.tables.depth_proj)]
        for li, layer in enumerate(self.layers):
            out.extend((f"layers.{li}.{k}", layer[k]) for k in LAYER_PARAMS)
        out.append(("final_norm", self.final_norm))
        out.append(("head", self.head))
        return out

    def parameters(self) -> list[ag.Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        expected = self.num_parameters()
        if vec.size != expected:
            raise ShapeError(f"weight vector has {vec.size} values, model needs {expected}")
        off = 0
        for p in self.parameters():
            p.data = vec[off:off + p.size].reshape(p.shape).copy()
            off += p.size

    def copy(self) -> "ModelParams":
        clone = ModelParams.init(self.config)
        clone.load_flat(self.flat())
        return clone

    def with_swapped_channel_rows(self) -> "ModelParams":
        clone = self.copy()
        clone.tables.channel_proj.data = clone.tables.channel_proj.data[::-1].copy()
        return clone

    def with_tied_channel_rows(self) -> "ModelParams":
        clone = self.copy()
        row = clone.tables.channel_proj.data[0]
        clone.tables.channel_proj.data = np.stack([row, row])
        return clone


# --- mask plumbing ---------------------------------------------------------------

def channel_mask_bias(mask: AttentionMask) -> np.ndarray:
    """Additive bias of shape ``(2, L, 2L)``: for query channel ``c`` the key
    axis is ``[own channel | other channel]``, read off the full mask."""
    idx = channel_positions(mask.T, mask.D)
    out = []
    for c in (0, 1):
        rows = mask.allowed[idx[c]]
        allowed = np.concatenate([rows[:, idx[c]], rows[:, idx[1 - c]]], axis=1)
        out.append(np.where(allowed, 0.0, MASKED_LOGIT))
    return np.stack(out)


# --- forward ---------------------------------------------------------------------

def _check_tokens(params: ModelParams, tokens: np.ndarray) -> None:
    cfg = params.config
    if tokens.ndim != 3 or tokens.shape[1] != 2:
        raise ShapeError(f"expected tokens of shape (B, 2, L), got {tokens.shape}")
    L = tokens.shape[2]
    if L % cfg.depth:
        raise ShapeError(f"per-channel length {L} not divisible by depth {cfg.depth}")
    if L // cfg.depth > cfg.max_steps:
        raise CapacityError(f"sequence has {L // cfg.depth} pair-steps, max_steps is {cfg.max_steps}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise StreamError(f"token ids must lie in [0, {cfg.vocab_size})")


def forward_channels(params: ModelParams, tokens: np.ndarray, mask: AttentionMask | None = None) -> ag.Tensor:
    """Logits of shape ``(B, 2, L, V+S)`` for channel-layout ``tokens``."""
    cfg = params.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(params, tokens)
    B, _, L = tokens.shape
    D, H, dh = cfg.depth, cfg.n_heads, cfg.head_dim
    T = L // D
    if mask is None:
        mask = build_mask(T, D)
    elif (mask.T, mask.D) != (T, D):
        raise ShapeError(f"mask is for (T={mask.T}, D={mask.D}), sequence is (T={T}, D={D})")
    bias = ag.Tensor(channel_mask_bias(mask)[None, :, None])  # (1, 2, 1, L, 2L)

    j = np.arange(L)
    depth_index = (j % D + 1)[None, None, :]
    channel = np.array([0, 1])[None, :, None]
    x = embed_tokens(tokens, depth_index, channel, params.tables, D)

    cos, sin = positional_angles(j // D, dh, cfg.rope_base)  # (L, dh/2)
    inv_sqrt = 1.0 / math.sqrt(dh)

    def heads(t):
        return ag.transpose(ag.reshape(t, (B, 2, L, H, dh)), (0, 1, 3, 2, 4))

    for layer in params.layers:
        h = ag.rms_norm(x, layer["attn_norm"], cfg.norm_eps)
        q = ag.rope(heads(h @ layer["wq"]), cos, sin)
        k = ag.rope(heads(h @ layer["wk"]), cos, sin)
        v = heads(h @ layer["wv"])
        k_cat = ag.concat([k, ag.flip(k, 1)], axis=3)
        v_cat = ag.concat([v, ag.flip(v, 1)], axis=3)
        scores = ag.scale(q @ ag.transpose(k_cat, (0, 1, 2, 4, 3)), inv_sqrt) + bias
        attn = ag.softmax(scores) @ v_cat
        attn = ag.reshape(ag.transpose(attn, (0, 1, 3, 2, 4)), (B, 2, L, cfg.d_model))
        x = x + attn @ layer["wo"]
        h = ag.rms_norm(x, layer["ffn_norm"], cfg.norm_eps)
        x = x + ag.gelu(h @ layer["w1"]) @ layer["w2"]

    return ag.rms_norm(x, params.final_norm, cfg.norm_eps) @ params.head


def sequence_to_channels(seq: InterleavedSequence) -> np.ndarray:
    """``(2, T*D)`` per-channel layout of an interleaved sequence."""
    grid = seq.tokens.reshape(seq.T, 2, seq.depth)
    return np.ascontiguousarray(grid.transpose(1, 0, 2).reshape(2, -1))


def forward(params: ModelParams, seq: InterleavedSequence, mask: AttentionMask | None = None) -> ag.Tensor:
    """Logits ``(len(seq), V+S)`` in interleaved order."""
    if seq.depth != params.config.depth:
        raise ShapeError(f"sequence depth {seq.depth} does not match model depth {params.config.depth}")
    if len(seq) > 2 * params.config.max_steps * seq.depth:
        raise CapacityError(f"sequence of length {len(seq)} exceeds 2*max_steps*D")
    logits = forward_channels(params, sequence_to_channels(seq)[None], mask)
    D = seq.depth
    i = np.arange(len(seq))
    step, chan, depth = i // (2 * D), (i % (2 * D)) // D, i % D
    return ag.getitem(logits, (0, chan, step * D + depth))


# --- targets & objective -------------------------------------------------------------

def channel_targets(L: int, D: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel target index and validity for a BOS-prefixed length ``L``.

    Position ``j`` predicts ``j + 1``; only real (non-BOS) tokens are targets,
    so the first ``D - 1`` BOS positions and the final position have none.
    """
    j = np.arange(L)
    valid = (j >= D - 1) & (j < L - 1)
    return np.minimum(j + 1, L - 1), valid


def target_map(T: int, D: int) -> np.ndarray:
    """Interleaved target index per position of a BOS-prefixed sequence with
    ``T`` pair-steps (BOS included), or ``-1`` where there is no target."""
    idx = channel_positions(T, D)
    nxt, valid = channel_targets(T * D, D)
    out = np.full(2 * T * D, -1, dtype=np.int64)
    for c in (0, 1):
        out[idx[c][valid]] = idx[c][nxt[valid]]
    return out


def stream_tokens(stream: DualTokenStream) -> np.ndarray:
    """Channel-layout tokens of the BOS-prefixed stream, shape ``(2, (T+1)*D)``."""
    s = prepend_bos(stream)
    return np.stack([s.a.reshape(-1), s.b.reshape(-1)])


def _nll_per_channel(params: ModelParams, tokens: np.ndarray) -> tuple[ag.Tensor, int]:
    L, D = tokens.shape[2], params.config.depth
    nxt, valid = channel_targets(L, D)
    logits = forward_channels(params, tokens)
    targets = tokens[:, :, nxt]
    valid = np.broadcast_to(valid, targets.shape)
    per = ag.nll(logits, targets, valid)
    # summing each channel separately, then adding, keeps the result exactly
    # symmetric under a channel swap
    total = ag.sum_(per[:, 0]) + ag.sum_(per[:, 1])
    return total, int(np.count_nonzero(valid))


def batch_loss(params: ModelParams, tokens: np.ndarray) -> ag.Tensor:
    """Mean next-token NLL over both channels of a ``(B, 2, L)`` batch."""
    total, count = _nll_per_channel(params, np.asarray(tokens, dtype=np.int64))
    return ag.scale(total, 1.0 / count)


def _check_stream(params: ModelParams, stream: DualTokenStream) -> None:
    if stream.depth != params.config.depth:
        raise ShapeError(f"stream depth {stream.depth} does not match model depth {params.config.depth}")
    if stream.T and stream.max_token >= params.config.vocab_size:
        raise StreamError(f"stream contains token {stream.max_token} outside the model vocabulary")
    if (stream.T and (np.any(stream.a == BOS) or np.any(stream.b == BOS))):
        raise StreamError("BOS may not appear inside a stream")


def loss(params: ModelParams, stream: DualTokenStream) -> ag.Tensor:
    """Mean cross-entropy of both channels' next tokens."""
    if stream.T < 2:
        raise StreamError(f"loss needs at least 2 frames, got {stream.T}")
    _check_stream(params, stream)
    return batch_loss(params, stream_tokens(stream)[None])


def joint_logprob(params: ModelParams, stream: DualTokenStream) -> float:
    """Natural-log probability of the whole stream under the model."""
    if stream.T < 1:
        raise StreamError("joint_logprob needs at least one frame")
    _check_stream(params, stream)
    return token_logprob(params, stream_tokens(stream))


def token_logprob(params: ModelParams, tokens: np.ndarray) -> float:
    """Log-probability of channel-layout ``tokens`` ``(2, L)`` whose first
    pair-step is the conditioning prefix.  Unlike :func:`joint_logprob` any id
    in the vocabulary may appear after the prefix, so summing ``exp`` of this
    over every continuation covers the full softmax support."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[0] != 2:
        raise ShapeError(f"expected tokens of shape (2, L), got {tokens.shape}")
    total, _ = _nll_per_channel(params, tokens[None])
    return -total.item()
