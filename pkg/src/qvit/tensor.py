"""Dense float32 tensor math for the ViT forward pass.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Every public op
checks shapes at call time and raises :class:`NumericError` if a result
contains NaN or Inf.

Numerics are fixed:

* matmul accumulates in float64 and rounds the result to float32;
* layernorm statistics are reduced in float64;
* GELU uses the exact erf form (``GELU_VARIANT``), evaluated in float32.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

DTYPE = np.float32

GELU_VARIANT = "erf"  # "erf" or "tanh"


class NumericError(ArithmeticError):
    """A tensor op produced a non-finite value."""


def tensor(data, shape=None) -> np.ndarray:
    """Build a float32 tensor from nested sequences or a flat buffer."""
    arr = np.asarray(data, dtype=DTYPE)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if math.prod(shape) != arr.size:
            raise ValueError(f"cannot view {arr.size} values as shape {shape}")
        arr = arr.reshape(shape)
    return np.ascontiguousarray(arr)


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericError(f"{op} produced a non-finite value")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-D operands")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return _finite(out.astype(DTYPE), "matmul")


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weight + bias`` with weight laid out as (in_features, out_features)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: {x.shape} x {weight.shape}")
    lead = x.shape[:-1]
    out = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        out = add_bias(out, bias)
    return out.reshape(*lead, weight.shape[1])


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _finite(np.add(a, b, dtype=DTYPE), "add")


def mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _finite(np.multiply(a, b, dtype=DTYPE), "mul")


def scale(x: np.ndarray, s: float) -> np.ndarray:
    return _finite((x * DTYPE(s)).astype(DTYPE), "scale")


def add_bias(x: np.ndarray, bias: np.ndarray) -> np.ndarray:
    if bias.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ValueError(f"bias shape {bias.shape} does not match {x.shape}")
    return _finite(np.add(x, bias, dtype=DTYPE), "add_bias")


def transpose(x: np.ndarray, axes=None) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(x, axes))


def reshape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    return x.reshape(shape)


def layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layernorm params must have shape ({d},)")
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mean) ** 2).mean(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    out = (normed * gain + bias).astype(DTYPE)
    return _finite(out, "layernorm")


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted, dtype=DTYPE)
    out = e / e.sum(axis=axis, keepdims=True, dtype=DTYPE)
    return _finite(out.astype(DTYPE), "softmax")


def gelu(x: np.ndarray) -> np.ndarray:
    if GELU_VARIANT == "erf":
        x = np.asarray(x, dtype=DTYPE)
        out = DTYPE(0.5) * x * (DTYPE(1.0) + erf(x * DTYPE(1.0 / math.sqrt(2.0))))
    elif GELU_VARIANT == "tanh":
        x64 = x.astype(np.float64)
        c = math.sqrt(2.0 / math.pi)
        out = 0.5 * x64 * (1.0 + np.tanh(c * (x64 + 0.044715 * x64**3)))
    else:
        raise ValueError(f"unknown GELU variant {GELU_VARIANT!r}")
    return _finite(out.astype(DTYPE), "gelu")


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    x64 = x.astype(np.float64)
    norm = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return _finite((x64 / safe).astype(DTYPE), "l2_normalize")


def argmax_rows(x: np.ndarray) -> list[int]:
    """Row-wise argmax; ties resolve to the lowest index."""
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("argmax_rows needs a non-empty 2-D tensor")
    return [int(i) for i in np.argmax(x, axis=1)]
