"""Per-head attention math, expert FFN math, and the GeLU layer.

These helpers work on whatever head subset or token subset they are given.
The serial oracle calls them with all heads and all tokens; the rotated
layers call them with one shard's heads or one expert's tokens.
"""
from __future__ import annotations

import math

import numpy as np

from ..ledger import MemoryLedger
from ..tensor import col_sum, gelu, gelu_backward, matmul, softmax_rows, softmax_rows_backward, transpose


def split_heads(t: np.ndarray, heads: int) -> np.ndarray:
    """(b, s, heads*d) -> (b, heads, s, d), contiguous."""
    b, s, hd = t.shape
    return np.ascontiguousarray(t.reshape(b, s, heads, hd // heads).transpose(0, 2, 1, 3))


def merge_heads(t: np.ndarray) -> np.ndarray:
    """(b, heads, s, d) -> (b, s, heads*d), contiguous."""
    b, h, s, d = t.shape
    return np.ascontiguousarray(t.transpose(0, 2, 1, 3).reshape(b, s, h * d))


def attention_scale(head_dim: int) -> float:
    return 1.0 / math.sqrt(head_dim)


def attention_probs(q: np.ndarray, k: np.ndarray, causal: bool) -> np.ndarray:
    scores = matmul(q, transpose(k)) * attention_scale(q.shape[-1])
    if causal:
        s = scores.shape[-1]
        scores = np.where(np.tril(np.ones((s, s), dtype=bool)), scores, -np.inf)
    return softmax_rows(scores)


def attention_backward(q, k, v, p, d_out):
    """Gradients of ``softmax(q k^T * scale) v`` w.r.t. q, k and v (head layout)."""
    scale = attention_scale(q.shape[-1])
    dv = matmul(transpose(p), d_out)
    dp = matmul(d_out, transpose(v))
    ds = softmax_rows_backward(p, dp) * scale
    dq = matmul(ds, k)
    dk = matmul(transpose(ds), q)
    return dq, dk, dv


def affine(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = matmul(x, w)
    y += b
    return y


def rows(t: np.ndarray) -> np.ndarray:
    """Collapse every leading axis: (..., d) -> (m, d)."""
    return t.reshape(-1, t.shape[-1])


def accumulate_weight_grad(g_w: np.ndarray, g_b: np.ndarray | None, x: np.ndarray, dy: np.ndarray) -> None:
    """g_w += x^T dy and g_b += column sums of dy, over every leading axis."""
    x2, dy2 = rows(x), rows(dy)
    matmul(transpose(x2), dy2, out=g_w, accumulate=True)
    if g_b is not None:
        g_b += col_sum(dy2)


def expert_forward(x: np.ndarray, w1, b1, w2, b2):
    h = affine(x, w1, b1)
    a = gelu(h)
    o = affine(a, w2, b2)
    return h, a, o


class Gelu:
    """Elementwise GeLU layer; caches its input for backward."""

    def __init__(self, ledger: MemoryLedger):
        self.ledger = ledger
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = self.ledger.hold(x)
        return self.ledger.adopt(gelu(x), label="gelu out")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx = self.ledger.adopt(gelu_backward(self._x, dy), label="gelu dx")
        self.ledger.release(self._x)
        self._x = None
        return dx
