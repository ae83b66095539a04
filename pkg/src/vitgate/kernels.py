"""Dense numeric kernels for the ViT forward pass.

Storage is float32. Every reduction (matmul, softmax, layer norm)
accumulates in float64 and rounds the result back to float32 once, so
results do not depend on BLAS blocking at float32 resolution. GELU is
elementwise and runs in float32.
"""

from __future__ import annotations

import numpy as np

GELU_SQRT_2_OVER_PI = 0.7978845608
GELU_CUBIC = 0.044715
LN_EPS = 1e-6


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float32 array with strictly positive dims."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim == 0 or any(d <= 0 for d in arr.shape):
        raise ShapeError(f"tensor dimensions must be strictly positive, got {arr.shape}")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """c[..., i, j] = sum_k a[..., i, k] * b[k, j] (or batched b)."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64), b.astype(np.float64))
    return out.astype(np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """x @ weight.T + bias with weight stored (out, in), torch style."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input width {x.shape[-1]} != weight in-dim {weight.shape[1]}")
    lead = x.shape[:-1]
    out = x.reshape(-1, x.shape[-1]).astype(np.float64) @ weight.T.astype(np.float64)
    if bias is not None:
        out += bias
    return out.astype(np.float32).reshape(*lead, weight.shape[0])


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits)
    if np.isnan(logits).any():
        raise NumericError("softmax_rows: NaN in logits")
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x)
    if x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least 2 features")
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm affine shape mismatch for width {x.shape[-1]}")
    h = x.astype(np.float64)
    mu = h.mean(axis=-1, keepdims=True)
    var = ((h - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (h - mu) / np.sqrt(var + eps)
    return (y * gain.astype(np.float64) + bias.astype(np.float64)).astype(np.float32)


def gelu(x: np.ndarray) -> np.ndarray:
    """Elementwise tanh-approximation GELU, evaluated in float32 (no accumulation involved)."""
    h = np.asarray(x, dtype=np.float32)
    t = h * h
    t *= h
    t *= np.float32(GELU_CUBIC)
    t += h
    t *= np.float32(GELU_SQRT_2_OVER_PI)
    np.tanh(t, out=t)
    t += np.float32(1.0)
    t *= h
    t *= np.float32(0.5)
    return t


def gelu_scalar(x: float) -> float:
    """Float64 GELU for calibration arithmetic (same tanh approximation)."""
    inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x**3)
    return float(0.5 * x * (1.0 + np.tanh(inner)))
