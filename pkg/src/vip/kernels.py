"""Dense float32 kernels used by the forward pass and the analyses.

Tensors are plain ``numpy.ndarray`` objects of dtype float32. Reductions and
products accumulate in float64 and are rounded back to float32 once.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

from .errors import InvalidArgumentError

DEFAULT_EPS = 1e-6


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def softmax(logits, axis: int = -1) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise InvalidArgumentError("softmax over an empty axis")
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return (e / e.sum(axis=axis, keepdims=True)).astype(np.float32)


def layer_norm(x, gain=None, bias=None, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Normalize over the last axis with population variance.

    A slice with zero variance and ``eps == 0`` normalizes to zeros, so the
    output collapses to ``bias``.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and np.shape(p) != (d,):
            raise InvalidArgumentError(f"layer_norm {name} has shape {np.shape(p)}, expected ({d},)")
    centered = x - x.mean(axis=-1, keepdims=True)
    denom = np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    with np.errstate(invalid="ignore", divide="ignore"):
        y = np.where(denom > 0, centered / np.where(denom > 0, denom, 1.0), 0.0)
    if gain is not None:
        y = y * np.asarray(gain, dtype=np.float64)
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y.astype(np.float32)


def matmul(a, b) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidArgumentError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidArgumentError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def linear(x, weight, bias=None) -> np.ndarray:
    """``x @ weight.T + bias`` with weight stored as [out, in]."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    if x.shape[-1] != weight.shape[1]:
        raise InvalidArgumentError(f"linear: input width {x.shape[-1]} != weight in-features {weight.shape[1]}")
    y = x.astype(np.float64) @ weight.astype(np.float64).T
    if bias is not None:
        y = y + np.asarray(bias, dtype=np.float64)
    return y.astype(np.float32)


def gelu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))).astype(np.float32)


def silu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return (x * expit(x)).astype(np.float32)


def swiglu(x) -> np.ndarray:
    """Split the last axis in half: ``silu(first) * second``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2:
        raise InvalidArgumentError("swiglu needs an even last axis")
    a, b = np.split(x, 2, axis=-1)
    return (a * expit(a) * b).astype(np.float32)
