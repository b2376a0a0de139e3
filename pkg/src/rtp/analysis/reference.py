"""An independent extended-precision forward pass, used as the finite-difference oracle.

Central differences at h = 1e-6 lose about ten digits to cancellation.
Entries whose gradient is near 1e-10 (attention query weights at
initialization, for instance) then drown in float64 rounding noise. This
module recomputes the loss in ``np.longdouble`` (64-bit mantissa on x86),
which lowers that noise floor by about three orders of magnitude. It shares
no kernels with the float64 implementation, so it also acts as a second,
independent forward.

The stack is evaluated block by block. :class:`ReferenceModel` caches the
unperturbed input of every block, so a perturbation inside block ``l`` only
recomputes blocks ``l`` onward.
"""
from __future__ import annotations

import numpy as np
from scipy.special import erf as erf64

from ..config import ModelConfig

LD = np.longdouble
_TWO_OVER_SQRT_PI = LD(2) / np.sqrt(LD(np.pi))


def erf_ld(x: np.ndarray) -> np.ndarray:
    """erf in extended precision: Maclaurin series for |x| <= 3, float64 tail beyond."""
    x = np.asarray(x, dtype=LD)
    out = np.empty_like(x)
    small = np.abs(x) <= 3
    xs = x[small]
    if xs.size:
        x2 = xs * xs
        term = xs.copy()
        total = xs.copy()
        for n in range(1, 120):
            term = term * (-x2) / n
            step = term / (2 * n + 1)
            total = total + step
            if np.max(np.abs(step)) < LD(1e-24):
                break
        out[small] = total * _TWO_OVER_SQRT_PI
    # beyond |x| = 3 erf is within 2e-5 of +-1; float64 rounding there is harmless
    out[~small] = erf64(x[~small].astype(np.float64))
    return out


def gelu_ld(x):
    return x * (1 + erf_ld(x / np.sqrt(LD(2)))) / 2


def softmax_ld(t):
    t = t - t.max(axis=-1, keepdims=True)
    e = np.exp(t)
    return e / e.sum(axis=-1, keepdims=True)


def _block_of(name: str) -> int:
    """-1 for the embedding, l for blocks.l.*, L for the head."""
    if name.startswith("emb."):
        return -1
    if name.startswith("blocks."):
        return int(name.split(".")[1])
    return 1 << 30


class ReferenceModel:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray], ids: np.ndarray, target: np.ndarray):
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=LD) for k, v in params.items()}
        self.ids = np.asarray(ids)
        self.target = np.asarray(target, dtype=LD)
        self.count = self.target.size
        self._inputs = self._run(self.params, -1, None, keep=True)

    # -- blocks ----------------------------------------------------------
    def _attention(self, p, l, x):
        cfg = self.cfg
        B, S, H = x.shape
        h = cfg.attention_heads
        d = H // h
        a = f"blocks.{l}.attn."

        def proj(n):
            return (x @ p[a + "w" + n] + p[a + "b" + n]).reshape(B, S, h, d).transpose(0, 2, 1, 3)

        q, k, v = proj("q"), proj("k"), proj("v")
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(LD(d))
        if cfg.causal:
            scores = np.where(np.tril(np.ones((S, S), dtype=bool)), scores, -np.inf)
        o = (softmax_ld(scores) @ v).transpose(0, 2, 1, 3).reshape(B, S, H)
        return o @ p[a + "wo"] + p[a + "bo"]

    def _ffn(self, p, l, x):
        cfg = self.cfg
        if not cfg.moe:
            f = f"blocks.{l}.ffn."
            u = gelu_ld(x @ p[f + "lin1.w"] + p[f + "lin1.b"])
            return u @ p[f + "lin2.w"] + p[f + "lin2.b"]
        m = f"blocks.{l}.moe."
        t = x.reshape(-1, x.shape[-1])
        probs = softmax_ld(t @ p[m + "gate.w"])
        sel = np.argmax(probs, axis=1)
        y = np.zeros_like(t)
        for j in range(cfg.n_experts):
            idx = np.flatnonzero(sel == j)
            e = f"{m}experts.{j}."
            u = gelu_ld(t[idx] @ p[e + "w1"] + p[e + "b1"])
            y[idx] = (u @ p[e + "w2"] + p[e + "b2"]) * probs[idx, j][:, None]
        return y.reshape(x.shape)

    def _run(self, p, start: int, x, keep: bool = False):
        inputs = []
        if start < 0:
            x = p["emb.table"][self.ids]
            start = 0
        for l in range(start, self.cfg.layers):
            if keep:
                inputs.append(x)
            x = x + self._attention(p, l, x)
            x = x + self._ffn(p, l, x)
        if keep:
            inputs.append(x)
            return inputs
        return x @ p["head.w"] + p["head.b"]

    # -- public ------------------------------------------------------------
    def logits(self, overrides: dict[str, np.ndarray] | None = None) -> np.ndarray:
        overrides = overrides or {}
        p = {**self.params, **{k: np.asarray(v, dtype=LD) for k, v in overrides.items()}}
        start = min((_block_of(k) for k in overrides), default=1 << 30)
        if start < 0:
            return self._run(p, -1, None)
        start = min(start, self.cfg.layers)
        return self._run(p, start, self._inputs[start])

    def central_difference(self, name: str, index: int, h: float) -> float:
        """(L(theta + h e) - L(theta - h e)) / 2h, with L = sum((y - t)^2) / count.

        The numerator is formed as sum((y+ - y-) * (y+ + y- - 2t)) / count,
        which avoids subtracting two nearly equal loss values.
        """
        ys = []
        for sign in (1, -1):
            q = self.params[name].copy()
            q.flat[index] += sign * LD(h)
            ys.append(self.logits({name: q}))
        yp, ym = ys
        num = np.sum((yp - ym) * (yp + ym - 2 * self.target)) / self.count
        return float(num / (2 * LD(h)))
