"""Single-stage training loop (Adam, global-norm clipping) and checkpoints.

A checkpoint is a directory with two files:

``manifest.json``
    model config, step count, loss history, and the tensor table
    (name + shape, in :meth:`ModelParams.named_parameters` order).
``weights.bin``
    every tensor flattened row-major and concatenated in that same order,
    stored as little-endian float64 with no header.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .codec import DualTokenStream
from .errors import NonFiniteError, NTPPError, StreamError, TrainingDiverged
from .model import ModelConfig, ModelParams, batch_loss, stream_tokens

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"
FORMAT = "ntpp-checkpoint/1"


@dataclass
class TrainHyper:
    lr: float = 3e-3
    steps: int = 500
    batch: int = 8
    grad_clip: float = 1.0
    context_frames: int = 32
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float] = field(default_factory=list)
    step: int = 0


class Adam:
    def __init__(self, params: Sequence[ag.Tensor], lr: float, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grads(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


def sample_batch(corpus: Sequence[DualTokenStream], batch: int, frames: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Random ``frames``-long windows, BOS-prefixed, stacked to ``(B, 2, L)``."""
    rows = []
    for k in rng.integers(0, len(corpus), size=batch):
        s = corpus[k]
        start = int(rng.integers(0, s.T - frames + 1))
        rows.append(stream_tokens(s.crop(start, start + frames)))
    return np.stack(rows)


def train(config: ModelConfig, corpus: Sequence[DualTokenStream], hyper: TrainHyper,
          params: ModelParams | None = None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    if not corpus:
        raise StreamError("training corpus is empty")
    if any(s.depth != config.depth for s in corpus):
        raise StreamError(f"every stream must have depth {config.depth}")
    frames = min(hyper.context_frames, min(s.T for s in corpus))
    if frames < 2:
        raise StreamError("training streams need at least 2 frames")
    if frames + 1 > config.max_steps:
        raise NTPPError(f"context of {frames} frames exceeds max_steps={config.max_steps}")

    params = params or ModelParams.init(config)
    opt = Adam(params.parameters(), hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    rng = np.random.default_rng(hyper.seed)
    result = TrainResult(params)
    for step in range(1, hyper.steps + 1):
        tokens = sample_batch(corpus, hyper.batch, frames, rng)
        params.zero_grad()
        last = result.history[-1] if result.history else float("nan")
        try:
            loss = batch_loss(params, tokens)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite activations at step {step} (previous loss {last:.6g}, "
                                   f"lr {hyper.lr}): {exc}") from None
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(
                f"loss became {value} at step {step} (previous loss {last:.6g}, lr {hyper.lr})")
        ag.backward(loss)
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params.parameters()]
        clip_grads(grads, hyper.grad_clip)
        opt.step(grads)
        result.history.append(value)
        result.step = step
        if callback is not None:
            callback(step, value)
        if step % 50 == 0:
            log.info("step %d loss %.4f", step, value)
    return result


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, history: Sequence[float] = (), step: int = 0,
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT,
        "config": params.config.to_dict(),
        "step": step,
        "loss_history": [float(x) for x in history],
        "dtype": "<f8",
        "tensors": [{"name": n, "shape": list(p.shape)} for n, p in params.named_parameters()],
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2))
    params.flat().astype("<f8").tofile(path / WEIGHTS)
    return path


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise NTPPError(f"no checkpoint manifest at {path / MANIFEST}") from None
    if manifest.get("format") != FORMAT:
        raise NTPPError(f"unsupported checkpoint format {manifest.get('format')!r}")
    params = ModelParams.init(ModelConfig.from_dict(manifest["config"]))
    expected = [(n, list(p.shape)) for n, p in params.named_parameters()]
    found = [(t["name"], list(t["shape"])) for t in manifest["tensors"]]
    if expected != found:
        raise NTPPError("checkpoint tensor table does not match the model layout")
    params.load_flat(np.fromfile(path / WEIGHTS, dtype="<f8"))
    return params, manifest
