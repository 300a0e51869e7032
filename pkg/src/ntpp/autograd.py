"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a backward closure on the output
tensor; :func:`backward` walks the graph in reverse topological order and
accumulates gradients into ``.grad``.  Data lives in contiguous numpy arrays.

The numpy kernels at the top of the module are shared with the incremental
inference path so that cached decoding and the graph forward compute the
same arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NonFiniteError, ShapeError

GELU_C = math.sqrt(2.0 / math.pi)


# --- plain numpy kernels -------------------------------------------------------

def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def rms_norm_np(x: np.ndarray, gain: np.ndarray, eps: float) -> np.ndarray:
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x * inv * gain


def gelu_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(GELU_C * (x + 0.044715 * x**3)))


def rope_np(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive (even, odd) feature pairs of ``x`` by the given angles.

    ``cos``/``sin`` hold one value per pair and broadcast against ``x[..., ::2]``.
    """
    out = np.empty_like(x)
    xe, xo = x[..., 0::2], x[..., 1::2]
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos
    return out


# --- graph ---------------------------------------------------------------------

class Tensor:
    """A float64 array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), op: str = ""):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward = None
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op or 'leaf'!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple, op: str, backward) -> Tensor:
    out = Tensor(data, _parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _check_finite(t: Tensor, op: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{op}: input of shape {t.shape} contains non-finite values")


# --- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        a._accum(g * c)

    return _node(a.data * c, (a,), "scale", backward)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)

    def backward(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * x**2)
        a._accum(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner))

    return _node(0.5 * x * (1.0 + th), (a,), "gelu", backward)


# --- linear algebra & shape ----------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {shape}") from None

    def backward(g):
        a._accum(g.reshape(a.shape))

    return _node(out, (a,), "reshape", backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accum(np.transpose(g, inv))

    return _node(np.transpose(a.data, axes), (a,), "transpose", backward)


def getitem(a: Tensor, key) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        a._accum(full)

    return _node(a.data[key], (a,), "getitem", backward)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if len(t.shape) != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), "concat", backward)


def flip(a: Tensor, axis: int) -> Tensor:
    def backward(g):
        a._accum(np.flip(g, axis=axis))

    return _node(np.flip(a.data, axis=axis), (a,), "flip", backward)


def sum_(a: Tensor, axis=None) -> Tensor:
    def backward(g):
        if axis is None:
            a._accum(np.broadcast_to(g, a.shape))
        else:
            a._accum(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return _node(np.asarray(a.data.sum(axis=axis)), (a,), "sum", backward)


# --- normalisation, attention pieces --------------------------------------------

def softmax(a: Tensor) -> Tensor:
    _check_finite(a, "softmax")
    p = softmax_np(a.data)

    def backward(g):
        a._accum(p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return _node(p, (a,), "softmax", backward)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    if gain.shape != (x.shape[-1],):
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match input {x.shape}")
    d = x.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(x.data * x.data, axis=-1, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * gain.data

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gh = g * gain.data
            x._accum(inv * (gh - xhat * np.mean(gh * xhat, axis=-1, keepdims=True)))

    return _node(out, (x, gain), "rms_norm", backward)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position rotation with constant angle tables (see :func:`rope_np`)."""
    if x.shape[-1] % 2:
        raise ShapeError(f"rope: last axis must be even, got shape {x.shape}")

    def backward(g):
        # transpose of a rotation is the rotation by the negated angle
        x._accum(rope_np(g, cos, -sin))

    return _node(rope_np(x.data, cos, sin), (x,), "rope", backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"embedding: ids outside [0, {n}) for table of shape {table.shape}")

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accum(full)

    return _node(table.data[ids], (table,), "embedding", backward)


def nll(logits: Tensor, targets, valid=None) -> Tensor:
    """Per-position negative log-likelihood ``-log softmax(logits)[target]``.

    Positions with ``valid == False`` get zero loss and zero gradient.
    """
    _check_finite(logits, "cross_entropy")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} does not match logits {logits.shape}")
    valid = np.ones(targets.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    safe = np.where(valid, targets, 0)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    picked = np.take_along_axis(z, safe[..., None], axis=-1)[..., 0]
    out = np.where(valid, lse - picked, 0.0)

    def backward(g):
        p = np.exp(z - lse[..., None])
        np.put_along_axis(p, safe[..., None], np.take_along_axis(p, safe[..., None], axis=-1) - 1.0, axis=-1)
        logits._accum(p * (g * valid)[..., None])

    return _node(out, (logits,), "nll", backward)


def cross_entropy(logits: Tensor, targets, valid=None) -> Tensor:
    """Mean negative log-likelihood over the valid targets."""
    per = nll(logits, targets, valid)
    count = per.size if valid is None else int(np.count_nonzero(valid))
    if count == 0:
        raise ShapeError("cross_entropy: no valid targets")
    return scale(sum_(per), 1.0 / count)


# --- backprop ------------------------------------------------------------------

def topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topological_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
