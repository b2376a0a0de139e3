"""Toy transformer stacks: the serial oracle and the rotated per-worker stack.

Both stacks share one layout: token embedding, then ``layers`` blocks of
(attention + residual, feed-forward or MoE + residual), then a linear head.
There is no layer norm and no position embedding. Training uses an MSE loss
against a fixed target, normalized by the global element count so that the
per-worker gradients sum to the serial gradient.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import ModelConfig, check_divisibility
from .ledger import CommPool, MemoryLedger
from .layers.common import Gelu
from .layers.rotated import (
    RotatedAttention,
    RotatedEmbedding,
    RotatedLinear,
    RotatedMoE,
)
from .layers.serial import SerialAttention, SerialEmbedding, SerialLinear, SerialMoE
from .partition import layout_attention, layout_embedding, layout_linear, layout_moe
from .ring import Comm, Traffic, WorkerGroup
from .tensor import mse_grad, mse_sum


def _sub(params: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


@dataclass
class Block:
    attn: object
    ffn: list = field(default_factory=list)  # [lin1, gelu, lin2] or [moe]


class Model:
    """A layer stack plus the residual wiring; one instance per worker (or one serial)."""

    def __init__(self, cfg: ModelConfig, ledger: MemoryLedger, emb, blocks: list[Block], head,
                 pool: CommPool | None = None):
        self.cfg = cfg
        self.ledger = ledger
        self.emb = emb
        self.blocks = blocks
        self.head = head
        self.pool = pool
        self.loss_sum = 0.0

    # named parameter-owning layers, in a fixed order
    def named_layers(self) -> list[tuple[str, object]]:
        out = [("emb.", self.emb)]
        for l, b in enumerate(self.blocks):
            out.append((f"blocks.{l}.attn.", b.attn))
            if len(b.ffn) == 1:
                out.append((f"blocks.{l}.moe.", b.ffn[0]))
            else:
                out += [(f"blocks.{l}.ffn.lin1.", b.ffn[0]), (f"blocks.{l}.ffn.lin2.", b.ffn[2])]
        out.append(("head.", self.head))
        return out

    def rotated_layers(self) -> list:
        return [layer for _, layer in self.named_layers() if hasattr(layer, "slot")]

    def zero_grad(self) -> None:
        for _, layer in self.named_layers():
            layer.zero_grad()

    def _residual(self, base: np.ndarray, branch: np.ndarray, label: str) -> np.ndarray:
        led = self.ledger
        out = led.adopt(base + branch, label=label)
        led.release(base)
        led.release(branch)
        return out

    def forward(self, ids: np.ndarray) -> np.ndarray:
        led = self.ledger
        h = self.emb.forward(ids)
        for b in self.blocks:
            h = self._residual(h, b.attn.forward(h), "attn residual")
            if len(b.ffn) == 1:
                f = b.ffn[0].forward(h)
            else:
                lin1, act, lin2 = b.ffn
                u = lin1.forward(h)
                g = act.forward(u)
                led.release(u)
                f = lin2.forward(g)
                led.release(g)
            h = self._residual(h, f, "ffn residual")
        logits = self.head.forward(h)
        led.release(h)
        return logits

    def loss_and_grad(self, logits: np.ndarray, target: np.ndarray, count: int) -> np.ndarray:
        """Local share of the summed squared error; returns dL/dlogits (ledger-registered)."""
        self.loss_sum = mse_sum(logits, target)
        return self.ledger.adopt(mse_grad(logits, target, count), label="dlogits")

    def backward(self, dlogits: np.ndarray) -> None:
        led = self.ledger
        dh = self.head.backward(dlogits)
        led.release(dlogits)
        for b in reversed(self.blocks):
            if len(b.ffn) == 1:
                dx = b.ffn[0].backward(dh)
            else:
                lin1, act, lin2 = b.ffn
                dg = lin2.backward(dh)
                du = act.backward(dg)
                led.release(dg)
                dx = lin1.backward(du)
                led.release(du)
            dh = self._residual(dh, dx, "ffn residual grad")
            dh = self._residual(dh, b.attn.backward(dh), "attn residual grad")
        self.emb.backward(dh)
        led.release(dh)

    def train_step(self, ids, target, count: int, hook: Callable | None = None) -> np.ndarray:
        """Zero grads, forward, loss, backward. Returns a copy of the local logits."""
        self.zero_grad()
        logits = self.forward(ids)
        out = logits.copy()
        if self.pool is not None:
            # held from the end of forward through the whole backward pass
            self.pool.acquire("backward buffer")
        if hook is not None:
            hook(self)
        dlogits = self.loss_and_grad(logits, target, count)
        self.ledger.release(logits)
        self.backward(dlogits)
        if self.pool is not None:
            self.pool.release("backward buffer released")
        self.ledger.assert_step_clean()
        return out

    def local_grads(self) -> dict[str, np.ndarray]:
        """Serial models: full gradients. Rotated: this worker's home-shard gradients."""
        out = {}
        for prefix, layer in self.named_layers():
            if hasattr(layer, "slot"):
                for k, v in layer.grads().items():
                    out[prefix + k] = v.copy()
                if hasattr(layer, "gate_grad"):
                    out[prefix + "gate.w"] = layer.gate_grad.copy()
            else:
                for k, v in layer.grads.items():
                    out[prefix + k] = v.copy()
        return out


def build_serial(cfg: ModelConfig, params: dict[str, np.ndarray], ledger: MemoryLedger | None = None) -> Model:
    ledger = ledger or MemoryLedger("serial")
    emb = SerialEmbedding(ledger, _sub(params, "emb."))
    blocks = []
    for l in range(cfg.layers):
        attn = SerialAttention(ledger, _sub(params, f"blocks.{l}.attn."), cfg.attention_heads, cfg.causal)
        if cfg.moe:
            ffn = [SerialMoE(ledger, _sub(params, f"blocks.{l}.moe."), cfg.n_experts)]
        else:
            ffn = [
                SerialLinear(ledger, _sub(params, f"blocks.{l}.ffn.lin1.")),
                Gelu(ledger),
                SerialLinear(ledger, _sub(params, f"blocks.{l}.ffn.lin2.")),
            ]
        blocks.append(Block(attn, ffn))
    head = SerialLinear(ledger, _sub(params, "head."))
    return Model(cfg, ledger, emb, blocks, head)


def build_rtp_transformer(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    comm: Comm,
    variant: str = "inplace",
    ledger: MemoryLedger | None = None,
) -> Model:
    """This worker's rotated stack. Every layer starts with the worker's home shard."""
    n = comm.n
    check_divisibility(cfg, n)
    ledger = ledger or MemoryLedger(f"worker{comm.rank}")
    H, F, V = cfg.hidden_size, cfg.embedding_size, cfg.vocab_size
    pool = CommPool(ledger, 0) if variant == "outofplace" and n > 1 else None
    kw = dict(variant=variant, pool=pool)

    emb = RotatedEmbedding(comm, ledger, layout_embedding(V, H, n), _sub(params, "emb."), name="emb", **kw)
    blocks = []
    for l in range(cfg.layers):
        p = f"blocks.{l}."
        attn = RotatedAttention(comm, ledger, layout_attention(H, cfg.attention_heads, n),
                                _sub(params, p + "attn."), causal=cfg.causal, name=p + "attn", **kw)
        if cfg.moe:
            moe = _sub(params, p + "moe.")
            experts = {k: v for k, v in moe.items() if k.startswith("experts.")}
            ffn = [RotatedMoE(comm, ledger, layout_moe(cfg.n_experts, n), experts, name=p + "moe",
                              gate=moe["gate.w"], **kw)]
        else:
            ffn = [
                RotatedLinear(comm, ledger, layout_linear(H, F, n), _sub(params, p + "ffn.lin1."),
                              name=p + "ffn.lin1", **kw),
                Gelu(ledger),
                RotatedLinear(comm, ledger, layout_linear(F, H, n), _sub(params, p + "ffn.lin2."),
                              name=p + "ffn.lin2", **kw),
            ]
        blocks.append(Block(attn, ffn))
    head = RotatedLinear(comm, ledger, layout_linear(H, V, n), _sub(params, "head."), name="head", **kw)
    model = Model(cfg, ledger, emb, blocks, head, pool)
    if pool is not None:
        capacity = max(layer.shard_len for layer in model.rotated_layers())
        model.pool = pool = CommPool(ledger, capacity)
        for layer in model.rotated_layers():
            layer.pool = pool
    return model


def assemble_grads(models_grads: list[dict[str, np.ndarray]], models: list[Model]) -> dict[str, np.ndarray]:
    """Rebuild full parameter gradients from every worker's home-shard gradients."""
    out: dict[str, np.ndarray] = {}
    ref = models[0]
    for prefix, layer in ref.named_layers():
        if not hasattr(layer, "slot"):
            continue
        shards = [{k[len(prefix):]: v for k, v in g.items() if k.startswith(prefix) and k != prefix + "gate.w"}
                  for g in models_grads]
        for k, v in layer.layout.assemble(shards).items():
            out[prefix + k] = v
        if hasattr(layer, "gate_grad"):
            out[prefix + "gate.w"] = models_grads[0][prefix + "gate.w"]
    return out


@dataclass
class RunResult:
    logits: np.ndarray
    loss: float
    grads: dict[str, np.ndarray]
    ledgers: list[MemoryLedger]
    traffic: list[list[Traffic]] = field(default_factory=list)
    tape_ids: list[dict[str, list[int]]] = field(default_factory=list)
    recycle_checks: int = 0


def run_serial(cfg: ModelConfig, params, ids, target) -> RunResult:
    model = build_serial(cfg, params)
    logits = model.train_step(ids, target, target.size)
    return RunResult(logits, model.loss_sum / target.size, model.local_grads(), [model.ledger])


def run_rtp(
    cfg: ModelConfig,
    params,
    ids,
    target,
    n: int,
    variant: str = "inplace",
    transport="lockstep",
    hook: Callable | None = None,
) -> RunResult:
    """One RTP training step on ``n`` workers; worker ``r`` gets batch slice ``r``."""
    check_divisibility(cfg, n, ids.shape[0])
    ids_parts = np.split(ids, n, axis=0)
    target_parts = np.split(target, n, axis=0)
    count = target.size

    def worker(comm: Comm):
        model = build_rtp_transformer(cfg, params, comm, variant)
        tape: dict[str, list[int]] = {}

        def record(m: Model):
            for layer in m.rotated_layers():
                tape[layer.name] = layer.tape.ids
            if hook is not None:
                hook(comm.rank, m)

        logits = model.train_step(ids_parts[comm.rank], target_parts[comm.rank], count, record)
        checks = sum(layer.recycle_checks for layer in model.rotated_layers())
        return model, logits, model.local_grads(), tape, checks

    group = WorkerGroup(n, transport)
    results = group.run(worker)
    models = [r[0] for r in results]
    return RunResult(
        logits=np.concatenate([r[1] for r in results], axis=0),
        loss=sum(m.loss_sum for m in models) / count,
        grads=assemble_grads([r[2] for r in results], models),
        ledgers=[m.ledger for m in models],
        traffic=[list(c.traffic) for c in group.comms],
        tape_ids=[r[3] for r in results],
        recycle_checks=sum(r[4] for r in results),
    )
