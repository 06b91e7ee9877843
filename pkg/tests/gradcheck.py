"""Finite-difference oracle for the autodiff tests.

Reference forwards are written directly in float64 numpy, independent of
``quantmark.tensor``; central differences on them give the expected
gradients.
"""
from __future__ import annotations

import math

import numpy as np

H = 1e-3
REL_TOL = 1e-3


def numeric_grad(f, x: np.ndarray, h: float = H) -> np.ndarray:
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        gf[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error, floored so all-zero gradients compare sanely."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-6)
    return float(np.linalg.norm(a - b) / denom)


# float64 reference forwards ----------------------------------------------

def ref_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_gelu(x):
    c = math.sqrt(2 / math.pi)
    return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x ** 3)))


def ref_causal_softmax(s):
    T = s.shape[-1]
    mask = np.triu(np.ones((T, T), bool), 1)
    z = np.where(mask, -np.inf, s)
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def ref_cross_entropy(logits, targets, weights=None):
    z = logits - logits.max(-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(-1, keepdims=True))
    nll = -logp[np.arange(len(targets)), targets]
    w = np.ones(len(targets)) if weights is None else np.asarray(weights, np.float64)
    return float((w * nll).sum() / w.sum())
