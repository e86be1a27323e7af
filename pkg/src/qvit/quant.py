"""Quantizers: uniform (symmetric / asymmetric), log2, and fake quantization.

Uniform quantization maps ``x`` to ``clip(round(x / scale) + zero_point,
alpha, beta)``. The zero point is added after rounding, and rounding is
round-half-to-even everywhere (``numpy.rint``).

Log2 quantization encodes a non-negative ``x`` as
``clip(round(-log2(x / scale)), 0, 2**bits - 1)`` where ``scale`` is the
full-scale reference. Zero maps to the largest code.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Iterable

import numpy as np

from .tensor import NumericError

ZERO_WEIGHT_EPS = 1e-8


class Scheme(enum.IntEnum):
    UNIFORM_SYMMETRIC = 0
    UNIFORM_ASYMMETRIC = 1
    LOG2 = 2


@dataclass(frozen=True)
class QuantParams:
    """State of one quantizer. ``scale`` is kept float32-exact."""

    scheme: Scheme
    bits: int
    scale: float
    zero_point: int = 0
    alpha: int = 0
    beta: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "scale", float(np.float32(self.scale)))
        if self.bits < 2:
            raise ValueError(f"bits must be >= 2, got {self.bits}")
        if not self.scale > 0 or not np.isfinite(self.scale):
            raise ValueError(f"quantization scale must be positive, got {self.scale}")
        if self.alpha >= self.beta:
            raise ValueError(f"clip bounds must satisfy alpha < beta ({self.alpha}, {self.beta})")
        if not self.alpha <= self.zero_point <= self.beta:
            raise ValueError(f"zero point {self.zero_point} outside [{self.alpha}, {self.beta}]")

    @classmethod
    def symmetric(cls, bits: int, scale: float) -> "QuantParams":
        lo, hi = signed_range(bits)
        return cls(Scheme.UNIFORM_SYMMETRIC, bits, scale, 0, lo, hi)

    @classmethod
    def asymmetric(cls, bits: int, scale: float, zero_point: int) -> "QuantParams":
        lo, hi = signed_range(bits)
        return cls(Scheme.UNIFORM_ASYMMETRIC, bits, scale, zero_point, lo, hi)

    @classmethod
    def log2(cls, bits: int, scale: float = 1.0) -> "QuantParams":
        return cls(Scheme.LOG2, bits, scale, 0, 0, 2**bits - 1)

    def with_scale(self, scale: float) -> "QuantParams":
        return replace(self, scale=scale)

    @property
    def is_uniform(self) -> bool:
        return self.scheme in (Scheme.UNIFORM_SYMMETRIC, Scheme.UNIFORM_ASYMMETRIC)


def signed_range(bits: int) -> tuple[int, int]:
    return -(2 ** (bits - 1)), 2 ** (bits - 1) - 1


def _check_uniform(qp: QuantParams) -> None:
    if not qp.is_uniform:
        raise ValueError(f"expected a uniform scheme, got {qp.scheme.name}")


def uniform_quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Integer codes (as int64) for ``x``."""
    _check_uniform(qp)
    x = np.asarray(x, dtype=np.float32)
    q = np.rint(x / np.float32(qp.scale)).astype(np.int64) + qp.zero_point
    return np.clip(q, qp.alpha, qp.beta)


def uniform_dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    _check_uniform(qp)
    q = np.asarray(q)
    if q.size and (q.min() < qp.alpha or q.max() > qp.beta):
        raise ValueError(f"integer codes outside [{qp.alpha}, {qp.beta}]")
    return ((q - qp.zero_point).astype(np.float32) * np.float32(qp.scale)).astype(np.float32)


def log2_quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.scheme != Scheme.LOG2:
        raise ValueError(f"expected log2 scheme, got {qp.scheme.name}")
    # float64 input is kept as is: codes past the float32 range must round-trip.
    x = np.asarray(x, dtype=np.float64)
    if x.size and x.min() < 0:
        raise ValueError("log2 quantization needs non-negative input")
    top = 2**qp.bits - 1
    positive = x > 0
    ratio = np.where(positive, x / qp.scale, 1.0)
    codes = np.rint(-np.log2(ratio))
    codes = np.where(positive, np.clip(codes, 0, top), top)
    return codes.astype(np.int64)


def log2_dequantize(q: np.ndarray, qp: QuantParams, zero_top: bool = False) -> np.ndarray:
    """``scale * 2**-q`` evaluated in float64 so that every code is exact.

    With ``zero_top`` the largest code decodes to exactly 0.
    """
    if qp.scheme != Scheme.LOG2:
        raise ValueError(f"expected log2 scheme, got {qp.scheme.name}")
    q = np.asarray(q)
    top = 2**qp.bits - 1
    if q.size and (q.min() < 0 or q.max() > top):
        raise ValueError(f"log2 codes outside [0, {top}]")
    out = qp.scale * np.exp2(-q.astype(np.float64))
    if zero_top:
        out = np.where(q == top, 0.0, out)
    return out


def quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.scheme == Scheme.LOG2:
        return log2_quantize(x, qp)
    return uniform_quantize(x, qp)


def dequantize(q: np.ndarray, qp: QuantParams) -> np.ndarray:
    if qp.scheme == Scheme.LOG2:
        return log2_dequantize(q, qp)
    return uniform_dequantize(q, qp)


def fake_quant(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    """Quantize then dequantize; the float32 result lies on the grid of ``qp``."""
    if qp.scheme == Scheme.LOG2:
        return log2_dequantize(log2_quantize(x, qp), qp).astype(np.float32)
    # Same arithmetic as uniform_quantize -> uniform_dequantize, without the
    # range re-validation.
    x = np.asarray(x, dtype=np.float32)
    s = np.float32(qp.scale)
    q = np.clip(np.rint(x / s) + np.float32(qp.zero_point), qp.alpha, qp.beta)
    return ((q - np.float32(qp.zero_point)) * s).astype(np.float32)


def fake_quant_channels(w: np.ndarray, qps: tuple[QuantParams, ...], axis: int = -1) -> np.ndarray:
    """Per-channel uniform fake quantization along ``axis`` (one param set per slice)."""
    w = np.asarray(w, dtype=np.float32)
    if len(qps) == 1:
        return fake_quant(w, qps[0])
    if w.shape[axis] != len(qps):
        raise ValueError(f"{len(qps)} channel params for axis of size {w.shape[axis]}")
    shape = [1] * w.ndim
    shape[axis] = len(qps)
    for qp in qps:
        _check_uniform(qp)
    s = np.array([qp.scale for qp in qps], dtype=np.float32).reshape(shape)
    zp = np.array([qp.zero_point for qp in qps], dtype=np.float32).reshape(shape)
    lo = np.array([qp.alpha for qp in qps], dtype=np.float32).reshape(shape)
    hi = np.array([qp.beta for qp in qps], dtype=np.float32).reshape(shape)
    q = np.clip(np.rint(w / s) + zp, lo, hi)
    return ((q - zp) * s).astype(np.float32)


def minmax_calibrate_weights(w: np.ndarray, bits: int, per_channel: bool = False, axis: int = -1):
    """Symmetric MinMax: ``scale = max|w| / (2**(bits-1) - 1)``.

    Returns one :class:`QuantParams`, or a tuple of them (one per slice along
    ``axis``) when ``per_channel`` is set. All-zero input gets
    ``ZERO_WEIGHT_EPS`` as its scale.
    """
    w = np.asarray(w, dtype=np.float32)
    if w.size == 0:
        raise ValueError("cannot calibrate an empty weight tensor")
    if not np.isfinite(w).all():
        raise NumericError("weight tensor contains non-finite values")
    qmax = 2 ** (bits - 1) - 1

    def one(absmax: float) -> QuantParams:
        s = absmax / qmax if absmax > 0 else ZERO_WEIGHT_EPS
        return QuantParams.symmetric(bits, s)

    if not per_channel:
        return one(float(np.abs(w).max()))
    moved = np.moveaxis(np.abs(w), axis, 0).reshape(w.shape[axis], -1)
    return tuple(one(float(m)) for m in moved.max(axis=1))


class MinMaxObserver:
    """Running min/max over a stream of activation batches."""

    def __init__(self, bits: int):
        self.bits = bits
        self.lo = np.inf
        self.hi = -np.inf
        self.count = 0

    def observe(self, x: np.ndarray) -> None:
        x = np.asarray(x)
        if x.size == 0:
            return
        if not np.isfinite(x).all():
            raise NumericError("non-finite activation observed during calibration")
        self.lo = min(self.lo, float(x.min()))
        self.hi = max(self.hi, float(x.max()))
        self.count += 1

    def params(self) -> QuantParams:
        if self.count == 0:
            raise RuntimeError("no calibration data observed")
        lo, hi = min(self.lo, 0.0), max(self.hi, 0.0)
        alpha, beta = signed_range(self.bits)
        scale = float(np.float32((hi - lo) / (beta - alpha)))
        if scale <= 0:
            scale = ZERO_WEIGHT_EPS
        zero_point = int(np.clip(alpha - np.rint(lo / scale), alpha, beta))
        return QuantParams.asymmetric(self.bits, scale, zero_point)


def minmax_calibrate_activations(samples: Iterable[np.ndarray], bits: int) -> QuantParams:
    """Asymmetric MinMax params from every batch in ``samples``.

    The observed range is widened to include 0, and the zero point is chosen
    so that real 0 is exactly representable.
    """
    obs = MinMaxObserver(bits)
    for batch in samples:
        obs.observe(batch)
    return obs.params()
