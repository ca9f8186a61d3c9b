"""
Minimal reverse-mode differentiation over float64 numpy arrays.

Every op builds a new :class:`DiffArray` that remembers its parents and a
closure pushing the output gradient back into them. :func:`backward` walks
the graph in reverse topological order. Gradients accumulate additively, so
callers zero them between steps (:func:`zero_grads`).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

kernels = _kernels.K


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class DiffArray:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        v = np.asarray(value, dtype=np.float64)
        self.value = v
        self.grad = np.zeros_like(v)
        self.requires_grad = requires_grad
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"DiffArray{tag}(shape={self.shape})"

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    @property
    def T(self) -> DiffArray:
        return transpose(self)

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(value, name: str | None = None) -> DiffArray:
    return DiffArray(value, requires_grad=True, name=name)


def constant(value) -> DiffArray:
    return DiffArray(value, requires_grad=False)


def _lift(x) -> DiffArray:
    return x if isinstance(x, DiffArray) else constant(x)


def _node(value, parents: Sequence[DiffArray], backward) -> DiffArray:
    out = DiffArray(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -----------------------------------------------------------------------------
# elementwise and structural ops
# -----------------------------------------------------------------------------


def add(a: DiffArray, b: DiffArray) -> DiffArray:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g, b.shape)

    return _node(a.value + b.value, (a, b), bwd)


def sub(a: DiffArray, b: DiffArray) -> DiffArray:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g, a.shape)
        if b.requires_grad:
            b.grad -= _unbroadcast(g, b.shape)

    return _node(a.value - b.value, (a, b), bwd)


def mul(a: DiffArray, b: DiffArray) -> DiffArray:
    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * b.value, a.shape)
        if b.requires_grad:
            b.grad += _unbroadcast(g * a.value, b.shape)

    return _node(a.value * b.value, (a, b), bwd)


def scale(a: DiffArray, c: float) -> DiffArray:
    def bwd(g):
        a.grad += g * c

    return _node(a.value * c, (a,), bwd)


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            a.grad += g @ b.value.T
        if b.requires_grad:
            b.grad += a.value.T @ g

    return _node(a.value @ b.value, (a, b), bwd)


def transpose(a: DiffArray) -> DiffArray:
    def bwd(g):
        a.grad += g.T

    return _node(a.value.T, (a,), bwd)


def reshape(a: DiffArray, shape: tuple[int, ...]) -> DiffArray:
    def bwd(g):
        a.grad += g.reshape(a.shape)

    return _node(a.value.reshape(shape), (a,), bwd)


def sum_all(a: DiffArray) -> DiffArray:
    def bwd(g):
        a.grad += float(g)

    return _node(np.array(a.value.sum()), (a,), bwd)


def mean_all(a: DiffArray) -> DiffArray:
    return scale(sum_all(a), 1.0 / a.size)


def take_rows(a: DiffArray, idx) -> DiffArray:
    """Gather rows ``a[idx]``; repeated indices accumulate on backward."""
    idx = np.asarray(idx, dtype=np.int64)

    def bwd(g):
        np.add.at(a.grad, idx, g)

    return _node(a.value[idx], (a,), bwd)


def take_cols(a: DiffArray, start: int, stop: int) -> DiffArray:
    def bwd(g):
        a.grad[:, start:stop] += g

    return _node(a.value[:, start:stop], (a,), bwd)


def concat_rows(parts: Sequence[DiffArray]) -> DiffArray:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.grad += g[lo:hi]

    return _node(np.concatenate([p.value for p in parts], axis=0), parts, bwd)


def concat_cols(parts: Sequence[DiffArray]) -> DiffArray:
    parts = list(parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def bwd(g):
        for p, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                p.grad += g[:, lo:hi]

    return _node(np.concatenate([p.value for p in parts], axis=1), parts, bwd)


def exp(a: DiffArray) -> DiffArray:
    out = np.exp(a.value)

    def bwd(g):
        a.grad += g * out

    return _node(out, (a,), bwd)


def log(a: DiffArray) -> DiffArray:
    def bwd(g):
        a.grad += g / a.value

    return _node(np.log(a.value), (a,), bwd)


def tanh(a: DiffArray) -> DiffArray:
    out = np.tanh(a.value)

    def bwd(g):
        a.grad += g * (1.0 - out * out)

    return _node(out, (a,), bwd)


def relu(a: DiffArray) -> DiffArray:
    mask = a.value > 0

    def bwd(g):
        a.grad += g * mask

    return _node(a.value * mask, (a,), bwd)


def gelu(a: DiffArray) -> DiffArray:
    def bwd(g):
        a.grad += kernels.gelu_bwd(g, a.value)

    return _node(kernels.gelu_fwd(a.value), (a,), bwd)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a: DiffArray) -> DiffArray:
    out = _stable_sigmoid(a.value)

    def bwd(g):
        a.grad += g * out * (1.0 - out)

    return _node(out, (a,), bwd)


# -----------------------------------------------------------------------------
# row-wise ops
# -----------------------------------------------------------------------------


def _as2d(a: DiffArray, op: str):
    if a.value.ndim != 2:
        raise DimensionError(f"{op} expects a 2-D array, got shape {a.shape}")


def softmax_rows(x: DiffArray) -> DiffArray:
    _as2d(x, "softmax_rows")
    p = kernels.softmax_fwd(x.value)

    def bwd(g):
        x.grad += kernels.softmax_bwd(g, p)

    return _node(p, (x,), bwd)


def log_softmax_rows(x: DiffArray) -> DiffArray:
    _as2d(x, "log_softmax_rows")
    lp = kernels.log_softmax_fwd(x.value)

    def bwd(g):
        x.grad += kernels.log_softmax_bwd(g, lp)

    return _node(lp, (x,), bwd)


def layer_norm(x: DiffArray, gain: DiffArray, bias: DiffArray, eps: float = 1e-5) -> DiffArray:
    _as2d(x, "layer_norm")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    out, xhat, rstd = kernels.layer_norm_fwd(x.value, gain.value, bias.value, eps)

    def bwd(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g, xhat, rstd, gain.value)
        if x.requires_grad:
            x.grad += dx
        if gain.requires_grad:
            gain.grad += dgain
        if bias.requires_grad:
            bias.grad += dbias

    return _node(out, (x, gain, bias), bwd)


def l2_normalize_rows(x: DiffArray, eps: float = 1e-8) -> DiffArray:
    """Rows divided by ``max(||row||, eps)``."""
    _as2d(x, "l2_normalize_rows")
    norms = np.sqrt((x.value**2).sum(axis=1, keepdims=True))
    denom = np.maximum(norms, eps)
    out = x.value / denom
    active = norms > eps

    def bwd(g):
        radial = (g * out).sum(axis=1, keepdims=True)
        x.grad += (g - out * radial * active) / denom

    return _node(out, (x,), bwd)


def cross_entropy_logits(logits: DiffArray, targets) -> DiffArray:
    """Mean over rows of ``-log softmax(logits)[target]``.

    ``targets`` is a list of class indices or a one-hot matrix.
    """
    _as2d(logits, "cross_entropy_logits")
    r, c = logits.shape
    t = np.asarray(targets)
    if t.ndim == 2:
        if t.shape != (r, c):
            raise DimensionError(f"one-hot targets {t.shape} vs logits {logits.shape}")
        t = t.argmax(axis=1)
    t = t.astype(np.int64).reshape(-1)
    if t.shape[0] != r:
        raise DimensionError(f"{t.shape[0]} targets for {r} rows")
    if r and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target index out of range for {c} classes: {t.tolist()}")
    lp = kernels.log_softmax_fwd(logits.value)
    rows = np.arange(r)
    loss = -lp[rows, t].mean()

    def bwd(g):
        d = np.exp(lp)
        d[rows, t] -= 1.0
        logits.grad += d * (float(g) / r)

    return _node(np.array(loss), (logits,), bwd)


def bce_with_logits(logits: DiffArray, labels) -> DiffArray:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 labels."""
    z = logits.value.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape:
        raise DimensionError(f"{y.shape[0]} labels for {z.shape[0]} logits")
    # softplus(z) - y*z, written to avoid overflow
    loss = (np.maximum(z, 0.0) - y * z + np.log1p(np.exp(-np.abs(z)))).mean()
    p = _stable_sigmoid(z)

    def bwd(g):
        logits.grad += ((p - y) * (float(g) / z.size)).reshape(logits.shape)

    return _node(np.array(loss), (logits,), bwd)


# -----------------------------------------------------------------------------
# graph traversal
# -----------------------------------------------------------------------------


def topo_order(root: DiffArray) -> list[DiffArray]:
    """Nodes reachable from ``root``, each after all of its parents."""
    order: list[DiffArray] = []
    seen: set[int] = set()
    stack: list[tuple[DiffArray, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: DiffArray) -> None:
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    order = topo_order(root)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params: Iterable[DiffArray]) -> None:
    for p in params:
        p.grad.fill(0.0)


def finite_difference_check(
    f: Callable[[], DiffArray],
    params: Sequence[DiffArray],
    samples: int = 25,
    step: float = 1e-4,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``samples`` coordinates are drawn uniformly over all entries of ``params``;
    ``f`` must rebuild the loss deterministically on each call.
    """
    params = list(params)
    zero_grads(params)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(samples, total), replace=False)
    offsets = np.cumsum(np.concatenate([[0], sizes]))

    worst = 0.0
    for flat in picks:
        k = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = int(flat - offsets[k])
        view = params[k].value.reshape(-1)
        orig = view[idx]
        view[idx] = orig + step
        fp = f().item()
        view[idx] = orig - step
        fm = f().item()
        view[idx] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[k].reshape(-1)[idx]
        rel = abs(a - numeric) / max(1e-8, abs(numeric))
        if math.isnan(rel):
            return math.inf
        worst = max(worst, rel)
    return worst
