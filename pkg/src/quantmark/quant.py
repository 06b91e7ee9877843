"""Vector-wise absmax INT8 quantization of weight matrices.

Each row r of a weight matrix gets its own scale C_r = max_i |w[r, i]|, and
codes are ``round(w * 127 / C_r)`` with ties rounded away from zero. The
arithmetic is carried out in float64 and cast back, so that
``quantize(dequantize(q)) == q`` holds bit-exactly for every valid ``q``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMAX = 127


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantizedMatrix:
    values: np.ndarray  # int8, (rows, cols)
    scales: np.ndarray  # float32, (rows,)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class IntervalBounds:
    low: np.ndarray
    high: np.ndarray
    frozen_mask: np.ndarray

    def clamp(self, w: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(w, self.low), self.high)

    def contains(self, w: np.ndarray) -> bool:
        return bool(np.all((w >= self.low) & (w <= self.high)))


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    if w.ndim != 2:
        raise QuantizationError(f"expected a 2-D weight matrix, got shape {w.shape}")
    return w


def row_scales(w) -> np.ndarray:
    """Per-row absmax with the all-zero-row fallback of 1.0."""
    w = _as_matrix(w)
    bad = ~np.isfinite(w).all(axis=1)
    if bad.any():
        r = int(np.flatnonzero(bad)[0])
        raise QuantizationError(f"non-finite value in row {r}")
    s = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0], np.float32)
    return np.where(s > 0, s, np.float32(1.0)).astype(np.float32)


def codes_with_scale(w, scales) -> np.ndarray:
    """INT8 codes of ``w`` under the given (fixed) per-row scales."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(scales, dtype=np.float64)[:, None]
    q = round_half_away(w * QMAX / s)
    return np.clip(q, -QMAX, QMAX).astype(np.int8)


def quantize(w) -> QuantizedMatrix:
    w = _as_matrix(w)
    s = row_scales(w)
    return QuantizedMatrix(codes_with_scale(w, s), s)


def dequantize(q: QuantizedMatrix) -> np.ndarray:
    v = q.values.astype(np.float64) * q.scales.astype(np.float64)[:, None] / QMAX
    return v.astype(np.float32)


def fake_quant(w) -> np.ndarray:
    """D(Q(w)): the weight the simulated-INT8 model actually multiplies with."""
    return dequantize(quantize(w))


def quantized_equal(a: QuantizedMatrix, b: QuantizedMatrix) -> bool:
    if a.shape != b.shape:
        raise QuantizationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return bool(
        np.array_equal(a.values, b.values)
        and a.scales.tobytes() == b.scales.tobytes()
    )


def code_distance(a: QuantizedMatrix, b: QuantizedMatrix) -> np.ndarray:
    if a.shape != b.shape:
        raise QuantizationError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.abs(a.values.astype(np.int16) - b.values.astype(np.int16))


def compute_intervals(w, alpha: float = 0.4) -> IntervalBounds:
    """Per-element band around the grid point D(Q(w)) that keeps Q(w) fixed.

    The band is ``center +/- alpha * C_r / 127``, clipped to ``|v| <= C_r``.
    Entries attaining the row maximum (all ties) are frozen so the row scale
    cannot move; all-zero rows are frozen outright, since any change to them
    would replace the fallback scale.
    """
    if not 0.0 < alpha < 0.5:
        raise QuantizationError(f"alpha must lie in (0, 0.5), got {alpha}")
    w = _as_matrix(w)
    q = quantize(w)
    s = q.scales.astype(np.float64)[:, None]
    center = dequantize(q).astype(np.float64)
    beta = alpha * s / QMAX
    low = np.maximum(center - beta, -s)
    high = np.minimum(center + beta, s)

    absw = np.abs(w)
    zero_row = (absw.max(axis=1, keepdims=True) == 0) if w.shape[1] else np.ones((w.shape[0], 1), bool)
    frozen = (absw == q.scales[:, None]) | zero_row
    low = np.where(frozen, w, low).astype(np.float32)
    high = np.where(frozen, w, high).astype(np.float32)
    return IntervalBounds(low, high, frozen)
