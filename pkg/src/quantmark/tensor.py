"""Small reverse-mode autodiff over dense float32 numpy arrays.

Only the ops a decoder-only language model needs are provided. Every node
keeps its parents and a closure that pushes its gradient to them; ``backward``
walks the graph once in reverse topological order.
"""
from __future__ import annotations

import math

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(_lift(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        _accumulate(a, np.transpose(g, inverse))

    return _node(np.transpose(a.data, axes), (a,), bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), bw)


def sum(a: Tensor) -> Tensor:  # noqa: A001
    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(a.data.sum(), dtype=DTYPE), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accumulate(a, np.broadcast_to(g / DTYPE(n), a.shape))

    return _node(np.asarray(a.data.mean(), dtype=DTYPE), (a,), bw)


def embedding(weight: Tensor, ids) -> Tensor:
    """Row lookup ``weight[ids]``; ids may have any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"token id out of range [0, {weight.shape[0]})")

    def bw(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _node(weight.data[ids], (weight,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = (1.0 / np.sqrt(var + DTYPE(eps))).astype(DTYPE)
    xhat = xc * inv

    def bw(g):
        if gain.requires_grad:
            _accumulate(gain, _unbroadcast(g * xhat, gain.shape))
        if bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.shape))
        if x.requires_grad:
            gx = g * gain.data
            gx_mean = gx.mean(axis=-1, keepdims=True)
            proj = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (gx - gx_mean - xhat * proj))

    return _node(xhat * gain.data + bias.data, (x, gain, bias), bw)


_GELU_C = DTYPE(math.sqrt(2.0 / math.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + DTYPE(0.044715) * d * d * d)
    t = np.tanh(inner)

    def bw(g):
        dinner = _GELU_C * (1.0 + DTYPE(3 * 0.044715) * d * d)
        local = 0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner
        _accumulate(x, g * local)

    return _node(0.5 * d * (1.0 + t), (x,), bw)


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with future positions (j > i) masked out.

    ``scores`` has shape (..., T, T).
    """
    T = scores.shape[-1]
    if scores.shape[-2] != T:
        raise ShapeError(f"causal_softmax needs square trailing axes, got {scores.shape}")
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    s = np.where(mask, -np.inf, scores.data)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(DTYPE)

    def bw(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        _accumulate(scores, p * (g - inner))

    return _node(p, (scores,), bw)


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Weighted mean of ``-log softmax(logits)[target]`` over rows.

    ``logits`` is (N, V) and ``targets`` (N,). ``weights`` (N,) selects and
    weights rows; the result is sum(w * nll) / sum(w).
    """
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy needs (N, V) logits, got {logits.shape}")
    N, V = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != N:
        raise ShapeError(f"{N} logit rows but {targets.shape[0]} targets")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    w = np.ones(N, dtype=DTYPE) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise ValueError("cross_entropy needs at least one row with positive weight")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    rows = np.arange(N)
    nll = -logp[rows, targets]
    loss = (w * nll).sum() / total

    def bw(g):
        p = e / s
        p[rows, targets] -= 1.0
        _accumulate(logits, p * (w / total * g)[:, None])

    return _node(np.asarray(loss, dtype=DTYPE), (logits,), bw)


def softmax_cross_entropy(logits: Tensor, target: int) -> Tensor:
    """Single-position loss for a rank-1 logits vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"expected rank-1 logits, got {logits.shape}")
    if not 0 <= int(target) < logits.shape[0]:
        raise IndexError(f"target {target} out of range [0, {logits.shape[0]})")
    return cross_entropy(reshape(logits, (1, logits.shape[0])), [int(target)])


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
