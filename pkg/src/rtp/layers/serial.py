"""Single-worker reference layers: full weights, full batch, no rotation.

This is the numerical ground truth and the memory baseline. Every layer
registers the same kinds of tensors with its ledger as the rotated layers do:
parameters, gradients, cached activations, outputs and input gradients.
"""
from __future__ import annotations

import numpy as np

from ..ledger import MemoryLedger
from ..tensor import (
    DTYPE,
    embedding_backward,
    embedding_lookup,
    gelu_backward,
    matmul,
    row_sum,
    softmax_rows,
    softmax_rows_backward,
    transpose,
)
from .common import (
    accumulate_weight_grad,
    affine,
    attention_backward,
    attention_probs,
    expert_forward,
    merge_heads,
    rows,
    split_heads,
)


class SerialLayer:
    def __init__(self, ledger: MemoryLedger, params: dict[str, np.ndarray]):
        self.ledger = ledger
        self.params = {k: ledger.hold(np.array(v, dtype=DTYPE), "Param") for k, v in params.items()}
        self.grads = {k: ledger.alloc(np.shape(v), "Grad") for k, v in params.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0


class SerialEmbedding(SerialLayer):
    def forward(self, ids: np.ndarray) -> np.ndarray:
        self.ids = self.ledger.hold(ids)
        return self.ledger.adopt(embedding_lookup(self.params["table"], ids), label="emb out")

    def backward(self, dy: np.ndarray) -> None:
        embedding_backward(self.ids, dy, self.grads["table"])
        self.ledger.release(self.ids)
        self.ids = None


class SerialLinear(SerialLayer):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = self.ledger.hold(x)
        return self.ledger.adopt(affine(x, self.params["w"], self.params["b"]), label="linear out")

    def backward(self, dy: np.ndarray) -> np.ndarray:
        accumulate_weight_grad(self.grads["w"], self.grads["b"], self.x, dy)
        dx = self.ledger.adopt(matmul(dy, transpose(self.params["w"])), label="linear dx")
        self.ledger.release(self.x)
        self.x = None
        return dx


class SerialAttention(SerialLayer):
    """Multi-head self-attention with Q/K/V/output projections (all with bias)."""

    def __init__(self, ledger, params, heads: int, causal: bool = True):
        super().__init__(ledger, params)
        self.heads = heads
        self.causal = causal

    def forward(self, x: np.ndarray) -> np.ndarray:
        led, p = self.ledger, self.params
        self.x = led.hold(x)
        q = led.adopt(split_heads(affine(x, p["wq"], p["bq"]), self.heads))
        k = led.adopt(split_heads(affine(x, p["wk"], p["bk"]), self.heads))
        v = led.adopt(split_heads(affine(x, p["wv"], p["bv"]), self.heads))
        probs = led.adopt(attention_probs(q, k, self.causal))
        o = led.adopt(merge_heads(matmul(probs, v)))
        self.cache = (q, k, v, probs, o)
        y = led.alloc(x.shape, label="attn out")
        matmul(o, p["wo"], out=y, accumulate=True)
        y += p["bo"]
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        led, p, g = self.ledger, self.params, self.grads
        q, k, v, probs, o = self.cache
        dx = led.alloc(self.x.shape, label="attn dx")
        accumulate_weight_grad(g["wo"], g["bo"], o, dy)
        d_o = split_heads(matmul(dy, transpose(p["wo"])), self.heads)
        dq, dk, dv = attention_backward(q, k, v, probs, d_o)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            dm = merge_heads(d)
            accumulate_weight_grad(g["w" + name], g["b" + name], self.x, dm)
            matmul(dm, transpose(p["w" + name]), out=dx, accumulate=True)
        for t in self.cache:
            led.release(t)
        led.release(self.x)
        self.cache = self.x = None
        return dx


class SerialMoE(SerialLayer):
    """Top-1 (switch) mixture of experts; each expert is a GeLU FFN.

    The selected expert's output is scaled by its gate probability. Ties go to
    the lower expert index.
    """

    def __init__(self, ledger, params, n_experts: int):
        super().__init__(ledger, params)
        self.n_experts = n_experts

    def _expert(self, j):
        p = self.params
        return tuple(p[f"experts.{j}.{n}"] for n in ("w1", "b1", "w2", "b2"))

    def forward(self, x: np.ndarray) -> np.ndarray:
        led = self.ledger
        self.x = led.hold(x)
        t = rows(x)
        probs = led.adopt(softmax_rows(matmul(t, self.params["gate.w"])))
        sel = led.adopt(np.argmax(probs, axis=1))
        psel = probs[np.arange(t.shape[0]), sel]
        y = led.alloc(x.shape, label="moe out")
        yt = rows(y)
        self.cache = []
        for j in range(self.n_experts):
            idx = led.adopt(np.flatnonzero(sel == j))
            h, a, o = expert_forward(t[idx], *self._expert(j))
            self.cache.append(tuple(led.adopt(z) for z in (h, a, o)) + (idx,))
            yt[idx] = o * psel[idx, None]
        self.probs, self.sel = probs, sel
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        led, g = self.ledger, self.grads
        t, dyt = rows(self.x), rows(dy)
        n_tok = t.shape[0]
        psel = self.probs[np.arange(n_tok), self.sel]
        dx = led.alloc(self.x.shape, label="moe dx")
        dxt = rows(dx)
        dpsel = led.alloc(n_tok, label="moe dgate")
        for j, (h, a, o, idx) in enumerate(self.cache):
            w1, _, w2, _ = self._expert(j)
            dyj = dyt[idx]
            dpsel[idx] = row_sum(dyj * o)
            d_o = dyj * psel[idx, None]
            accumulate_weight_grad(g[f"experts.{j}.w2"], g[f"experts.{j}.b2"], a, d_o)
            dh = gelu_backward(h, matmul(d_o, transpose(w2)))
            accumulate_weight_grad(g[f"experts.{j}.w1"], g[f"experts.{j}.b1"], t[idx], dh)
            dxt[idx] = matmul(dh, transpose(w1))
        upstream = np.zeros_like(self.probs)
        upstream[np.arange(n_tok), self.sel] = dpsel
        dlogits = softmax_rows_backward(self.probs, upstream)
        accumulate_weight_grad(g["gate.w"], None, t, dlogits)
        matmul(dlogits, transpose(self.params["gate.w"]), out=dxt, accumulate=True)
        for h, a, o, idx in self.cache:
            for z in (h, a, o, idx):
                led.release(z)
        for z in (self.probs, self.sel, dpsel, self.x):
            led.release(z)
        self.cache = self.probs = self.sel = self.x = None
        return dx
