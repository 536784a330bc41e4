"""A small define-by-run reverse-mode differentiation engine over numpy arrays.

Usage::

    with Tape() as tape:
        y = (x @ w).sigmoid().sum()
    grads = backward(tape, y)
    grads[w]

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad=True``, are appended to the tape together with
a closure that maps the output cotangent to input cotangents.  ``backward``
walks the tape in exact reverse order.  Outside a tape nothing is recorded and
results never require grad, which is how inference runs.

New operations are added with :func:`register_op`; the S4 kernel registers
itself from :mod:`s4dec.s4_layer`.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .exceptions import (
    DetachedLossError,
    NonFiniteGradientError,
    NotScalarError,
    ShapeMismatchError,
    TapeConsumedError,
    UnknownOpError,
)

__all__ = [
    "Tensor",
    "Tape",
    "GradMap",
    "record",
    "register_op",
    "registered_ops",
    "backward",
    "current_tape",
    "AdamW",
    "WarmupExpDecay",
    "NO_DECAY_TAGS",
]

_OPS: dict[str, Callable] = {}
_local = threading.local()


def register_op(name: str):
    """Register ``fn(*input_arrays, **attrs) -> (out_array, vjp)`` under ``name``.

    ``vjp(g)`` must return one cotangent (or ``None``) per input.
    """

    def deco(fn):
        _OPS[name] = fn
        return fn

    return deco


def registered_ops() -> list[str]:
    return sorted(_OPS)


def current_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping needed for reverse-mode gradients.

    ``tag`` is free-form metadata used by the optimizer (``"weight"``,
    ``"bias"``, ``"norm"``, ``"embedding"``, ``"s4"``).
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, tag: str | None = None,
                 name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tag = tag
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # arithmetic
    def __add__(self, other):
        return record("add", (self, other))

    def __radd__(self, other):
        return record("add", (other, self))

    def __sub__(self, other):
        return record("sub", (self, other))

    def __rsub__(self, other):
        return record("sub", (other, self))

    def __mul__(self, other):
        return record("mul", (self, other))

    def __rmul__(self, other):
        return record("mul", (other, self))

    def __truediv__(self, other):
        return record("div", (self, other))

    def __rtruediv__(self, other):
        return record("div", (other, self))

    def __neg__(self):
        return record("neg", (self,))

    def __matmul__(self, other):
        return record("matmul", (self, other))

    def __rmatmul__(self, other):
        return record("matmul", (other, self))

    def __getitem__(self, index):
        return record("getitem", (self,), index=index)

    # reductions and shape
    def sum(self, axis=None, keepdims=False):
        return record("sum", (self,), axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return record("mean", (self,), axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return record("reshape", (self,), shape=shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return record("transpose", (self,), axes=axes or None)

    @property
    def T(self):
        return self.transpose()

    # elementwise
    def exp(self):
        return record("exp", (self,))

    def log(self):
        return record("log", (self,))

    def sigmoid(self):
        return record("sigmoid", (self,))

    def tanh(self):
        return record("tanh", (self,))

    def relu(self):
        return record("relu", (self,))

    def abs(self):
        return record("abs", (self,))


@dataclass
class _Entry:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


@dataclass
class Tape:
    """Ordered record of differentiable operations. One tape per thread."""

    entries: list = field(default_factory=list)
    consumed: bool = False

    def __post_init__(self):
        self._produced: set[int] = set()

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.entries)

    def _append(self, entry: _Entry):
        self.entries.append(entry)
        self._produced.add(id(entry.output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def _lift(x, like_dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if arr.dtype.kind in "fiub":
        arr = arr.astype(like_dtype if like_dtype is not None else np.float64, copy=False)
    return Tensor(arr)


def record(op_kind: str, inputs: Iterable, **attrs) -> Tensor:
    """Apply ``op_kind`` to ``inputs``; append to the active tape when needed."""
    try:
        fn = _OPS[op_kind]
    except KeyError:
        raise UnknownOpError(op_kind) from None
    inputs = tuple(inputs)
    dtype = next((t.dtype for t in inputs if isinstance(t, Tensor) and t.dtype.kind == "f"), None)
    inputs = tuple(_lift(t, dtype) for t in inputs)
    try:
        out_data, vjp = fn(*[t.data for t in inputs], **attrs)
    except ValueError as exc:
        if isinstance(exc, ShapeMismatchError):
            raise
        raise ShapeMismatchError(f"{op_kind}: {exc}") from exc
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._append(_Entry(op_kind, inputs, out, vjp))
    return out


class GradMap:
    """Gradients keyed by tensor identity; missing tensors map to zeros."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._tensors.get(id(t)) is t

    def __len__(self):
        return len(self._grads)

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse sweep from scalar ``loss``; returns gradients of every leaf on the tape.

    Leaf tensors additionally get their ``.grad`` attribute set.  A tape can be
    swept exactly once.
    """
    if tape.consumed:
        raise TapeConsumedError("backward already ran on this tape; record a new one")
    if loss.size != 1:
        raise NotScalarError(f"loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise DetachedLossError("loss was not produced on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        in_grads = entry.vjp(g)
        for t, gi in zip(entry.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.asarray(gi, dtype=t.dtype)
            if not tape.produced(t):
                leaves[key] = t
    out = {k: grads[k] for k in leaves if k in grads}
    for k, t in leaves.items():
        t.grad = out[k]
    return GradMap(out, leaves)


# ---------------------------------------------------------------------------
# op table
# ---------------------------------------------------------------------------

def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


@register_op("add")
def _add(a, b):
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@register_op("sub")
def _sub(a, b):
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


@register_op("mul")
def _mul(a, b):
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@register_op("div")
def _div(a, b):
    out = a / b
    return out, lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape))


@register_op("neg")
def _neg(a):
    return -a, lambda g: (-g,)


@register_op("matmul")
def _matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatchError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def vjp(g):
        if b.ndim == 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            ga = _unbroadcast(g @ np.swapaxes(b, -1, -2), a.shape)
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return ga, gb

    return a @ b, vjp


@register_op("sum")
def _sum(a, axis=None, keepdims=False):
    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return np.sum(a, axis=axis, keepdims=keepdims), vjp


@register_op("mean")
def _mean(a, axis=None, keepdims=False):
    out = np.mean(a, axis=axis, keepdims=keepdims)
    count = a.size // max(np.size(out), 1) if axis is not None else a.size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return out, vjp


@register_op("reshape")
def _reshape(a, shape):
    return a.reshape(shape), lambda g: (g.reshape(a.shape),)


@register_op("transpose")
def _transpose(a, axes=None):
    inv = None if axes is None else tuple(np.argsort(axes))
    return np.transpose(a, axes), lambda g: (np.transpose(g, inv),)


@register_op("getitem")
def _getitem(a, index):
    def vjp(g):
        z = np.zeros_like(a)
        np.add.at(z, index, g)
        return (z,)

    return a[index], vjp


@register_op("concat")
def _concat(*arrays, axis=-1):
    sizes = [x.shape[axis] for x in arrays]
    splits = np.cumsum(sizes)[:-1]
    return np.concatenate(arrays, axis=axis), lambda g: tuple(np.split(g, splits, axis=axis))


@register_op("exp")
def _exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


@register_op("log")
def _log(a):
    return np.log(a), lambda g: (g / a,)


def _sigmoid_np(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


@register_op("sigmoid")
def _sigmoid(a):
    out = _sigmoid_np(a)
    return out, lambda g: (g * out * (1.0 - out),)


@register_op("tanh")
def _tanh(a):
    out = np.tanh(a)
    return out, lambda g: (g * (1.0 - out * out),)


@register_op("relu")
def _relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


@register_op("abs")
def _abs(a):
    return np.abs(a), lambda g: (g * np.sign(a),)


@register_op("softmax")
def _softmax(a, axis=-1, mask=None):
    """Softmax along ``axis``; entries where ``mask`` is False get exactly zero mass."""
    if mask is None:
        shifted = a - a.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.broadcast_to(mask, a.shape)
        big = np.where(mask, a, -np.inf).max(axis=axis, keepdims=True)
        big = np.where(np.isfinite(big), big, 0.0)
        e = np.where(mask, np.exp(np.where(mask, a - big, 0.0)), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    out = e / np.where(denom == 0, 1.0, denom)
    out = out.astype(a.dtype, copy=False)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return out, vjp


@register_op("layer_norm")
def _layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma + beta

    def vjp(g):
        gx_hat = g * gamma
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return out, vjp


@register_op("embedding")
def _embedding(table, indices):
    indices = np.asarray(indices)

    def vjp(g):
        flat = indices.reshape(-1)
        onehot = (flat[None, :] == np.arange(table.shape[0])[:, None]).astype(table.dtype)
        return (onehot @ g.reshape(flat.size, -1),)

    return table[indices], vjp


@register_op("l1_loss")
def _l1_loss(pred, target, weight=None):
    """Weighted mean absolute error; ``weight`` broadcasts against ``pred``."""
    w = np.ones_like(pred) if weight is None else np.broadcast_to(weight, pred.shape).astype(pred.dtype)
    denom = max(float(w.sum()), 1e-12)
    diff = pred - target
    loss = np.asarray((w * np.abs(diff)).sum() / denom, dtype=pred.dtype)
    return loss, lambda g: (g * w * np.sign(diff) / denom, None)


@register_op("cross_entropy")
def _cross_entropy(logits, targets, weight=None):
    """Weighted mean token cross-entropy; ``targets`` holds class indices."""
    targets = np.asarray(targets)
    w = np.ones(targets.shape, dtype=logits.dtype) if weight is None else np.asarray(weight, dtype=logits.dtype)
    denom = max(float(w.sum()), 1e-12)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(-(w * picked).sum() / denom, dtype=logits.dtype)

    def vjp(g):
        p = np.exp(logp)
        np.put_along_axis(p, targets[..., None], np.take_along_axis(p, targets[..., None], -1) - 1.0, -1)
        return (g * p * (w / denom)[..., None],)

    return loss, vjp


def _toeplitz_index(L):
    t = np.arange(L)
    lag = t[:, None] - t[None, :]
    return np.where(lag >= 0, lag, 0), lag >= 0


@register_op("causal_conv")
def _causal_conv(u, k):
    """Per-channel causal convolution.

    ``u`` has shape ``(..., L, H)`` and ``k`` has shape ``(H, L)``;
    ``y[..., t, h] = sum_{s<=t} k[h, t-s] u[..., s, h]``.  Formulated as a
    batched Toeplitz matmul, no FFT.
    """
    L, H = u.shape[-2], u.shape[-1]
    if k.shape != (H, L):
        raise ShapeMismatchError(f"kernel shape {k.shape} does not match input (L={L}, H={H})")
    lag, causal = _toeplitz_index(L)
    T = k[:, lag] * causal  # (H, L, L)
    u3 = u.reshape(-1, L, H)
    y = np.einsum("hts,bsh->bth", T, u3, optimize=True).reshape(u.shape)

    def vjp(g):
        g3 = g.reshape(-1, L, H)
        gu = np.einsum("hts,bth->bsh", T, g3, optimize=True).reshape(u.shape)
        gT = np.einsum("bth,bsh->hts", g3, u3, optimize=True)
        gk = np.stack([np.trace(gT, offset=-j, axis1=1, axis2=2) for j in range(L)], axis=1)
        return gu, gk.astype(k.dtype)

    return y, vjp


@register_op("complex_mul")
def _complex_mul(a, b):
    """Complex product with the real/imaginary pair stored in the trailing axis."""
    if a.shape[-1] != 2 or b.shape[-1] != 2:
        raise ShapeMismatchError("complex_mul operands need a trailing axis of size 2")
    ar, ai, br, bi = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    out = np.stack([ar * br - ai * bi, ar * bi + ai * br], axis=-1)

    def vjp(g):
        gr, gi = g[..., 0], g[..., 1]
        # cotangent of z = a*b w.r.t. a is conj(b) * g_z (complex convention g = d/dre + i d/dim)
        ga = np.stack([gr * br + gi * bi, gi * br - gr * bi], axis=-1)
        gb = np.stack([gr * ar + gi * ai, gi * ar - gr * ai], axis=-1)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


# functional helpers

def concat(tensors, axis=-1) -> Tensor:
    return record("concat", tensors, axis=axis)


def softmax(x, axis=-1, mask=None) -> Tensor:
    return record("softmax", (x,), axis=axis, mask=mask)


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    return record("layer_norm", (x, gamma, beta), eps=eps)


def embedding(table, indices) -> Tensor:
    return record("embedding", (table,), indices=indices)


def l1_loss(pred, target, weight=None) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    return record("l1_loss", (pred, Tensor(target.astype(pred.dtype))), weight=weight)


def cross_entropy(logits, targets, weight=None) -> Tensor:
    return record("cross_entropy", (logits,), targets=targets, weight=weight)


def causal_conv(u, k) -> Tensor:
    return record("causal_conv", (u, k))


def complex_mul(a, b) -> Tensor:
    return record("complex_mul", (a, b))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

NO_DECAY_TAGS = frozenset({"embedding", "norm", "bias", "s4"})


class WarmupExpDecay:
    """``lr(t) = peak * min(t / warmup, exp(-gamma * (t - warmup)))`` for step ``t >= 1``."""

    def __init__(self, peak: float = 1e-3, warmup: int = 500, gamma: float = 1e-4):
        self.peak = float(peak)
        self.warmup = int(warmup)
        self.gamma = float(gamma)

    def __call__(self, t: int) -> float:
        if self.warmup <= 0:
            return self.peak * math.exp(-self.gamma * t)
        return self.peak * min(t / self.warmup, math.exp(-self.gamma * (t - self.warmup)))


class AdamW:
    """Adam with decoupled weight decay.

    Parameters whose ``tag`` is in ``no_decay_tags`` (embeddings, norms, biases
    and S4 parameters by default) are never decayed.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.98), eps=1e-9, weight_decay=0.0,
                 no_decay_tags=NO_DECAY_TAGS):
        self.params = list(params)
        self.schedule = lr if callable(lr) else (lambda t, _lr=float(lr): _lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay_tags = frozenset(no_decay_tags)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        return self.schedule(max(self.t, 1))

    def step(self, grads) -> None:
        """Update parameters in place. ``grads`` is a GradMap or a list aligned with ``params``."""
        if isinstance(grads, GradMap):
            grads = [grads[p] for p in self.params]
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError("non-finite gradient passed to AdamW.step")
        self.t += 1
        lr = self.schedule(self.t)
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.tag not in self.no_decay_tags:
                p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}
