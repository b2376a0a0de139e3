"""Dense float64 kernels for the toy transformer layers.

A tensor is a plain ``numpy.ndarray`` with dtype float64. There is no
broadcasting beyond what each kernel documents, and no autograd: every layer
supplies its own analytic backward.

Reductions run in a fixed order. ``matmul`` accumulates over the contraction
index from left to right, so the result is bit-for-bit the same as a naive
triple loop and does not depend on BLAS blocking or thread count.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError

DTYPE = np.float64
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE)


def matmul(a, b, out: np.ndarray | None = None, accumulate: bool = False) -> np.ndarray:
    """Matrix product of the last two axes, ``a[..., m, k] @ b[..., k, n]``.

    ``b`` is either a 2-D matrix shared by every leading index of ``a`` or has
    exactly the same leading axes as ``a``. With ``accumulate=True`` the
    product is added into ``out`` instead of overwriting it.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    shape = a.shape[:-1] + (b.shape[-1],)
    if out is None:
        out = np.zeros(shape, dtype=DTYPE)
    else:
        if out.shape != shape:
            raise DimensionError(f"matmul output has shape {out.shape}, expected {shape}")
        if not accumulate:
            out[...] = 0.0
    for k in range(a.shape[-1]):
        out += a[..., :, k, None] * b[..., k, None, :]
    return out


def transpose(t) -> np.ndarray:
    """Swap the last two axes (returns a contiguous copy)."""
    t = as_tensor(t)
    if t.ndim < 2:
        raise DimensionError(f"transpose needs at least 2 axes, got {t.shape}")
    return np.ascontiguousarray(np.swapaxes(t, -1, -2))


def concat(parts: Sequence[np.ndarray], axis: int = 0) -> np.ndarray:
    if not parts:
        raise DimensionError("concat of an empty list")
    parts = [as_tensor(p) for p in parts]
    ref = parts[0]
    ax = axis % ref.ndim
    for p in parts[1:]:
        if p.ndim != ref.ndim or any(
            p.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: ragged shapes {[q.shape for q in parts]}"
            )
    if len(parts) == 1:
        return parts[0]
    return np.concatenate(parts, axis=ax)


def split(t, n_parts: int, axis: int = 0) -> list[np.ndarray]:
    t = as_tensor(t)
    if n_parts <= 0 or t.shape[axis] % n_parts:
        raise DimensionError(f"cannot split axis {axis} of {t.shape} into {n_parts} equal parts")
    return [np.ascontiguousarray(p) for p in np.split(t, n_parts, axis=axis)]


def add(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")
    return a + b


def mul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    return a * b


def scale(t, c: float) -> np.ndarray:
    return as_tensor(t) * c


def row_sum(t) -> np.ndarray:
    """Sum over the last axis, left to right."""
    t = as_tensor(t)
    acc = np.zeros(t.shape[:-1], dtype=DTYPE)
    for j in range(t.shape[-1]):
        acc += t[..., j]
    return acc


def col_sum(t) -> np.ndarray:
    """Sum over every axis but the last, in row-major order of the leading axes."""
    t = as_tensor(t)
    rows = t.reshape(-1, t.shape[-1])
    acc = np.zeros(t.shape[-1], dtype=DTYPE)
    for r in rows:
        acc += r
    return acc


def softmax_rows(t) -> np.ndarray:
    """Softmax over the last axis with max subtraction.

    Entries equal to ``-inf`` (masked positions) get probability 0 as long as
    each row has at least one finite entry.
    """
    t = as_tensor(t)
    m = np.max(t, axis=-1, keepdims=True)
    e = np.exp(t - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows_backward(p, upstream) -> np.ndarray:
    """Gradient w.r.t. the logits given probabilities ``p`` and dL/dp."""
    p, upstream = as_tensor(p), as_tensor(upstream)
    inner = np.sum(upstream * p, axis=-1, keepdims=True)
    return p * (upstream - inner)


def normal_cdf(x) -> np.ndarray:
    return 0.5 * (1.0 + erf(as_tensor(x) * _INV_SQRT2))


def gelu(t) -> np.ndarray:
    """Exact GeLU, x * Phi(x)."""
    t = as_tensor(t)
    return t * normal_cdf(t)


def gelu_backward(t, upstream) -> np.ndarray:
    t, upstream = as_tensor(t), as_tensor(upstream)
    if t.shape != upstream.shape:
        raise DimensionError(f"gelu_backward: shapes differ {t.shape} vs {upstream.shape}")
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * t * t)
    return upstream * (normal_cdf(t) + t * pdf)


def embedding_lookup(table, ids) -> np.ndarray:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = ids[(ids < 0) | (ids >= table.shape[0])].ravel()[0]
        raise IndexError(f"token id {bad} outside vocabulary of size {table.shape[0]}")
    return table[ids]


def embedding_backward(ids, upstream, grad_table: np.ndarray) -> np.ndarray:
    """Scatter-add ``upstream`` rows into ``grad_table`` (in place), in token order."""
    ids = np.asarray(ids).ravel()
    rows = as_tensor(upstream).reshape(ids.size, grad_table.shape[-1])
    np.add.at(grad_table, ids, rows)
    return grad_table


def mse_sum(y, target) -> float:
    """Sum of squared errors; divide by the global element count to get the MSE."""
    d = as_tensor(y) - as_tensor(target)
    return float(np.sum(d * d))


def mse_loss(y, target, count: int | None = None) -> float:
    y = as_tensor(y)
    if y.shape != np.shape(target):
        raise DimensionError(f"mse: shapes differ {y.shape} vs {np.shape(target)}")
    return mse_sum(y, target) / (y.size if count is None else count)


def mse_grad(y, target, count: int | None = None, out: np.ndarray | None = None) -> np.ndarray:
    y = as_tensor(y)
    n = y.size if count is None else count
    g = (y - as_tensor(target)) * (2.0 / n)
    if out is not None:
        out[...] = g
        return out
    return g


class SplitMix64:
    """Counter-based SplitMix64 generator.

    Output ``i`` (1-based) mixes ``seed + i * 0x9E3779B97F4A7C15`` modulo 2**64
    with the standard finalizer (shifts 30/27/31, multipliers
    0xBF58476D1CE4E5B9 and 0x94D049BB133111EB). Uniform doubles take the top
    53 bits.
    """

    GAMMA = 0x9E3779B97F4A7C15
    MIX1 = 0xBF58476D1CE4E5B9
    MIX2 = 0x94D049BB133111EB
    MASK = (1 << 64) - 1

    def __init__(self, seed: int):
        self.state = int(seed) & self.MASK

    def next_u64(self, count: int) -> np.ndarray:
        idx = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + idx * np.uint64(self.GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(self.MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(self.MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + count * self.GAMMA) & self.MASK
        return z

    def uniform(self, shape, low: float = -1.0, high: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(DTYPE) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def integers(self, shape, high: int) -> np.ndarray:
        """Integers in ``[0, high)`` by modulo reduction (bias below 2**-50 for small ``high``)."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = math.prod(shape)
        return (self.next_u64(n) % np.uint64(high)).astype(np.int64).reshape(shape)
