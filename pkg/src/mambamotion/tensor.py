"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the op set the model zoo needs is provided. Every op checks its output
for NaN/Inf and records a backward closure when any input requires grad.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


_GRAD_ENABLED = True


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(out)):
        raise NumericError(f"non-finite value produced by {op}")


def _make(out: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(out, op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.op = op
    t.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if t.requires_grad:
        t._parents = tuple(parents)
        t._backward = backward
    else:
        t._parents = ()
        t._backward = None
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- tape

@dataclass
class Tape:
    """Topologically ordered record of the ops that produced an output."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay_backward(self, seed: np.ndarray) -> None:
        """Walk the record in reverse, routing gradients through local rules."""
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _accum(node, g)
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor requiring grad")
    Tape.from_output(loss).replay_backward(np.ones_like(loss.data))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    return _make(out, "div", (a, b), bw)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_np(x: np.ndarray) -> np.ndarray:
    # x > 30: ln(1+e^x) == x to float64 precision
    return np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return _make(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    xd = x.data
    return _make(xd * s, "silu", (x,), lambda g: (g * (s * (1.0 + xd * (1.0 - s))),))


def softplus(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_np(x.data)
    return _make(_softplus_np(x.data), "softplus", (x,), lambda g: (g * s,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    m = (x.data > 0).astype(np.float64)
    return _make(x.data * m, "relu", (x,), lambda g: (g * m,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _make(e, "exp", (x,), lambda g: (g * e,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, numpy batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        if ad.ndim == 1:
            ga = g @ np.swapaxes(bd, -1, -2)
            gb = np.outer(ad, g) if bd.ndim == 2 else None
            return ga, gb
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # fold all leading dims of a into rows: dB = A^T dY
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return _unbroadcast(ga, ad.shape), gb

    return _make(ad @ bd, "matmul", (a, b), bw)


def transpose(x, axis1: int = -1, axis2: int = -2) -> Tensor:
    x = as_tensor(x)
    return _make(np.swapaxes(x.data, axis1, axis2), "transpose", (x,),
                 lambda g: (np.swapaxes(g, axis1, axis2),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(old),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, slice)) or i is None or i is Ellipsis for i in parts)

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g  # basic indexing never repeats an element
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), "index", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), "concat", xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([x.data for x in xs], axis=axis), "stack", xs, bw)


# ---------------------------------------------------------------- reductions

def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(x.data, axis=axis, keepdims=keepdims), "sum", (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` False entries get zero weight."""
    x = as_tensor(x)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return _make(s, "softmax", (x,), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gx = g * gd
        n = xhat.shape[-1]
        dx = inv / n * (n * gx - gx.sum(axis=-1, keepdims=True)
                        - xhat * (gx * xhat).sum(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gd.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gd + bias.data, "layer_norm", (x, gain, bias), bw)


# ---------------------------------------------------------------- sequence ops

def conv1d_depthwise_causal(x, kernel, tail: np.ndarray | None = None) -> Tensor:
    """Causal depthwise convolution along the time axis (second to last).

    ``x`` is [..., T, C], ``kernel`` is [K, C] and
    ``out[t, c] = sum_i kernel[i, c] * x[t - i, c]``. Samples before ``t = 0``
    come from ``tail`` ([..., K-1, C], oldest first) when given; otherwise the
    sequence must be at least K long and the first K-1 rows only see zeros
    (the caller treats them as warm-up, see :func:`warmup_mask`).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    K, C = kernel.shape
    T = x.shape[-2]
    if K < 1:
        raise DimensionError("kernel length must be >= 1")
    if x.shape[-1] != C:
        raise DimensionError(f"channel mismatch: x {x.shape}, kernel {kernel.shape}")
    if tail is None:
        if K > T:
            raise DimensionError(f"sequence of length {T} shorter than kernel {K}")
        pad = np.zeros(x.shape[:-2] + (K - 1, C))
    else:
        pad = np.asarray(tail, dtype=np.float64)
        if pad.shape[-2:] != (K - 1, C):
            raise DimensionError(f"tail must be [..., {K - 1}, {C}], got {pad.shape}")
        pad = np.broadcast_to(pad, x.shape[:-2] + (K - 1, C))
    xp = np.concatenate([pad, x.data], axis=-2)
    kd = kernel.data
    out = np.zeros(x.shape)
    for i in range(K):
        out += kd[i] * xp[..., K - 1 - i:K - 1 - i + T, :]

    def bw(g):
        gx = np.zeros(x.shape)
        gk = np.zeros(kd.shape)
        for i in range(K):
            seg = xp[..., K - 1 - i:K - 1 - i + T, :]
            gk[i] = (g * seg).reshape(-1, C).sum(axis=0)
            # x[t - i] feeds out[t]; shift g back by i steps
            if i < T:
                gx[..., :T - i, :] += kd[i] * g[..., i:, :]
        return gx, gk

    return _make(out, "conv1d", (x, kernel), bw)


def warmup_mask(T: int, kernel_size: int) -> np.ndarray:
    """Boolean row mask, False for the first kernel_size - 1 rows."""
    m = np.ones(T, dtype=bool)
    m[: kernel_size - 1] = False
    return m


def dropout(x, keep_prob: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity outside training or when keep_prob == 1."""
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = as_tensor(x)
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    m = (rng.random(x.shape) < keep_prob) / keep_prob
    return _make(x.data * m, "dropout", (x,), lambda g: (g * m,))


def mse_loss(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error over unmasked elements.

    ``mask`` broadcasts against ``pred`` from the left-hand axes, e.g. a [T]
    row mask for a [T, C] prediction or a [B, T] mask for [B, T, C]. All
    channels are weighted equally regardless of their units.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    if mask is None:
        w = np.ones(pred.shape)
    else:
        m = np.asarray(mask, dtype=np.float64)
        w = np.broadcast_to(m.reshape(m.shape + (1,) * (pred.ndim - m.ndim)), pred.shape)
    n = w.sum()
    if n == 0:
        raise ValueError("every row is masked; nothing to average")
    diff = pred.data - target.data
    out = np.array((w * diff * diff).sum() / n)

    def bw(g):
        gp = g * 2.0 * w * diff / n
        return gp, -gp

    return _make(out, "mse", (pred, target), bw)


class no_grad:
    """Context manager that makes ops skip tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False
