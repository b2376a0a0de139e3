"""Rotated tensor-parallel layers.

Each worker holds one weight shard per layer (a :class:`~rtp.ring.ShardSlot`)
and its own slice of the batch. Forward runs N steps. At each step the worker
computes with the resident shard and then passes it clockwise, so every
shard meets every batch slice once. Backward walks the same shards in
reverse with counter-clockwise rotations. The gradient accumulator travels
with its shard, collects each worker's contribution along the way, and is
back home (holding the full data-parallel gradient) when the worker's own
shard returns.

The replay tape stands in for the flyweight trick of binding N forward
records to one shared parameter storage. Forward step ``s`` records which
logical shard it used and the activations its backward needs. Backward step
``s'`` pops the record of forward step ``N-1-s'`` and checks that the shard
now resident is that same shard.
"""
from __future__ import annotations

import numpy as np

from ..errors import ConfigurationError, ProtocolError, StateError
from ..ledger import CommPool, MemoryLedger
from ..partition import ShardLayout, Strategy, shard_view, unpack
from ..ring import (
    Comm,
    ShardSlot,
    ring_allreduce,
    rotate_clockwise,
    rotate_counterclockwise,
    rotate_outofplace,
)
from ..tensor import (
    DTYPE,
    col_sum,
    concat,
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

VARIANTS = ("inplace", "outofplace")


class ReplayTape:
    """Per-forward-step records of (logical shard id, cached activations)."""

    def __init__(self):
        self._records: list[tuple[int, object]] = []

    def push(self, logical_id: int, cache) -> None:
        self._records.append((logical_id, cache))

    def pop(self) -> tuple[int, object]:
        if not self._records:
            raise StateError("replay tape is empty: backward without forward")
        return self._records.pop()

    @property
    def ids(self) -> list[int]:
        return [r[0] for r in self._records]

    def __len__(self) -> int:
        return len(self._records)


class RotatedLayer:
    """Shared rotation schedule; subclasses supply the per-shard math."""

    strategy: Strategy

    def __init__(
        self,
        comm: Comm,
        ledger: MemoryLedger,
        layout: ShardLayout,
        params: dict[str, np.ndarray],
        variant: str = "inplace",
        pool: CommPool | None = None,
        name: str = "",
    ):
        if layout.strategy is not self.strategy:
            raise ConfigurationError(
                f"{type(self).__name__} needs a {self.strategy.value} layout, got {layout.strategy.value}"
            )
        if layout.n != comm.n:
            raise ConfigurationError(f"layout is for {layout.n} shards but the ring has {comm.n} workers")
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.comm = comm
        self.ledger = ledger
        self.layout = layout
        self.variant = variant
        self.pool = pool
        self.name = name
        self.template = layout.template(params)
        fp = layout.flat_parameter(params)
        self.shard_len = fp.shard_len
        self.slot = ShardSlot(
            weight=ledger.hold(shard_view(fp, comm.rank).copy(), "Param", f"{name} shard"),
            grad_acc=ledger.alloc(fp.shard_len, "Grad", f"{name} grad"),
            logical_id=comm.rank,
        )
        self.tape = ReplayTape()
        self.recycle_checks = 0

    # -- helpers -----------------------------------------------------------
    @property
    def n(self) -> int:
        return self.comm.n

    @property
    def rank(self) -> int:
        return self.comm.rank

    def zero_grad(self) -> None:
        self.slot.grad_acc[...] = 0.0

    def weights(self) -> dict[str, np.ndarray]:
        return unpack(self.slot.weight, self.template)

    def grads(self) -> dict[str, np.ndarray]:
        return unpack(self.slot.grad_acc, self.template)

    def _uses_pool(self) -> bool:
        return self.variant == "outofplace" and self.n > 1

    def _rotate(self, direction: str) -> None:
        if self.variant == "inplace":
            fn = rotate_clockwise if direction == "cw" else rotate_counterclockwise
            fn(self.comm, self.slot, self.ledger)
        else:
            rotate_outofplace(self.comm, self.slot, self.pool.view(self.shard_len), direction, self.ledger)

    def _recycle_check(self) -> None:
        """The output is allocated only after the rotation buffer has been handed back."""
        if self._uses_pool():
            if self.ledger.current["CommBuffer"] != 0:
                raise RuntimeError(f"{self.name}: communication buffer still live at output allocation")
            self.recycle_checks += 1

    def _check_home(self, when: str) -> None:
        if self.slot.logical_id != self.rank:
            raise ProtocolError(
                f"{self.name} {when}: worker {self.rank} holds shard {self.slot.logical_id}, expected its own"
            )

    # -- schedule ------------------------------------------------------------
    def forward(self, x):
        if len(self.tape):
            raise StateError(f"{self.name}: forward called again before backward")
        self._check_home("before forward")
        self._begin_forward(x)
        if self._uses_pool():
            self.pool.acquire(f"{self.name} fwd buffer")
        for s in range(self.n):
            j = self.slot.logical_id
            if j != (self.rank - s) % self.n:
                raise ProtocolError(f"{self.name} forward step {s}: worker {self.rank} holds shard {j}")
            self.tape.push(j, self._forward_step(j, self.weights()))
            if s < self.n - 1:
                self._rotate("cw")
            elif self._uses_pool():
                self.pool.release(f"{self.name} fwd buffer recycled")
        return self._finish_forward()

    def backward(self, dy):
        if len(self.tape) != self.n:
            raise StateError(f"{self.name}: backward without a matching forward")
        own_pool = self._uses_pool() and not self.pool.held
        if own_pool:
            self.pool.acquire(f"{self.name} bwd buffer")
        self._begin_backward(dy)
        for s in range(self.n):
            j = self.slot.logical_id
            recorded, cache = self.tape.pop()
            if j != recorded:
                raise ProtocolError(
                    f"{self.name} backward step {s}: shard-id mismatch on worker {self.rank}, "
                    f"resident shard {j} but forward step {self.n - 1 - s} used shard {recorded}"
                )
            self._backward_step(j, self.weights(), self.grads(), cache)
            if s < self.n - 1:
                self._rotate("ccw")
        dx = self._finish_backward()
        if own_pool:
            self.pool.release(f"{self.name} bwd buffer")
        self._check_home("after backward")
        return dx

    # subclass hooks
    def _begin_forward(self, x): ...
    def _forward_step(self, j: int, w: dict): ...
    def _finish_forward(self): ...
    def _begin_backward(self, dy): ...
    def _backward_step(self, j: int, w: dict, g: dict, cache): ...
    def _finish_backward(self): ...


class _ConcatOutput(RotatedLayer):
    """Layers whose output is the canonical-order concatenation of per-shard column blocks."""

    def _assemble(self):
        blocks = [self._blocks[j] for j in range(self.n)]
        self._blocks = None
        if self.n == 1:
            return blocks[0]
        self._recycle_check()
        y = self.ledger.adopt(concat(blocks, axis=-1), label=f"{self.name} out")
        for b in blocks:
            self.ledger.release(b)
        return y


class RotatedLinear(_ConcatOutput):
    """Output-partitioned affine layer ``y = x w + b``."""

    strategy = Strategy.OUTPUT

    def _begin_forward(self, x):
        self.x = self.ledger.hold(x)
        self._blocks = {}

    def _forward_step(self, j, w):
        self._blocks[j] = self.ledger.adopt(affine(self.x, w["w"], w["b"]))
        return None

    def _finish_forward(self):
        return self._assemble()

    def _begin_backward(self, dy):
        self.dy = dy
        self.dx = self.ledger.alloc(self.x.shape, label=f"{self.name} dx")

    def _backward_step(self, j, w, g, cache):
        dyj = self.dy[..., self.layout.columns(j)]
        accumulate_weight_grad(g["w"], g["b"], self.x, dyj)
        matmul(dyj, transpose(w["w"]), out=self.dx, accumulate=True)

    def _finish_backward(self):
        self.ledger.release(self.x)
        dx, self.x, self.dy, self.dx = self.dx, None, None, None
        return dx


class RotatedEmbedding(_ConcatOutput):
    """Embedding table partitioned on the embedding (output) dimension."""

    strategy = Strategy.OUTPUT

    def _begin_forward(self, ids):
        table_rows = self.template[0].shape[0]
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table_rows):
            raise IndexError(f"{self.name}: token id outside vocabulary of size {table_rows}")
        self.ids = self.ledger.hold(ids)
        self._blocks = {}

    def _forward_step(self, j, w):
        self._blocks[j] = self.ledger.adopt(embedding_lookup(w["table"], self.ids))
        return None

    def _finish_forward(self):
        return self._assemble()

    def _begin_backward(self, dy):
        self.dy = dy

    def _backward_step(self, j, w, g, cache):
        embedding_backward(self.ids, self.dy[..., self.layout.columns(j)], g["table"])

    def _finish_backward(self):
        self.ledger.release(self.ids)
        self.ids = self.dy = None
        return None


class RotatedAttention(RotatedLayer):
    """Head-partitioned self-attention.

    Shard ``j`` brings the Q/K/V columns of its head group, the matching row
    block of the output projection, and the same slice of the output bias.
    Each step adds that head group's contribution to the running output sum.
    """

    strategy = Strategy.HEAD

    def __init__(self, *args, causal: bool = True, **kwargs):
        super().__init__(*args, **kwargs)
        self.causal = causal
        lo, hi = self.layout.ranges[0]
        self.local_heads = hi - lo

    def _begin_forward(self, x):
        self.x = self.ledger.hold(x)
        self.y = self.ledger.alloc(x.shape, label=f"{self.name} out")

    def _forward_step(self, j, w):
        led, h = self.ledger, self.local_heads
        q = led.adopt(split_heads(affine(self.x, w["wq"], w["bq"]), h))
        k = led.adopt(split_heads(affine(self.x, w["wk"], w["bk"]), h))
        v = led.adopt(split_heads(affine(self.x, w["wv"], w["bv"]), h))
        probs = led.adopt(attention_probs(q, k, self.causal))
        o = led.adopt(merge_heads(matmul(probs, v)))
        matmul(o, w["wo"], out=self.y, accumulate=True)
        self.y[..., self.layout.columns(j)] += w["bo"]
        return q, k, v, probs, o

    def _finish_forward(self):
        y, self.y = self.y, None
        return y

    def _begin_backward(self, dy):
        self.dy = dy
        self.dx = self.ledger.alloc(self.x.shape, label=f"{self.name} dx")

    def _backward_step(self, j, w, g, cache):
        q, k, v, probs, o = cache
        dy = self.dy
        matmul(transpose(rows(o)), rows(dy), out=g["wo"], accumulate=True)
        g["bo"] += col_sum(dy[..., self.layout.columns(j)])
        d_o = split_heads(matmul(dy, transpose(w["wo"])), self.local_heads)
        dq, dk, dv = attention_backward(q, k, v, probs, d_o)
        for name, d in (("q", dq), ("k", dk), ("v", dv)):
            dm = merge_heads(d)
            accumulate_weight_grad(g["w" + name], g["b" + name], self.x, dm)
            matmul(dm, transpose(w["w" + name]), out=self.dx, accumulate=True)
        for t in cache:
            self.ledger.release(t)

    def _finish_backward(self):
        self.ledger.release(self.x)
        dx, self.x, self.dy, self.dx = self.dx, None, None, None
        return dx


class RotatedMoE(RotatedLayer):
    """Expert-partitioned top-1 mixture of experts.

    The gate is replicated: each worker routes its own tokens. Experts then
    rotate past every worker, so tokens never move. The outputs of each
    resident expert are kept as blocks and concatenated (scattered back to
    token order) at the end. The replicated gate's gradient is summed over
    workers with a ring all-reduce.
    """

    strategy = Strategy.EXPERT

    def __init__(self, comm, ledger, layout, params, variant="inplace", pool=None, name="", gate=None):
        super().__init__(comm, ledger, layout, params, variant, pool, name)
        if gate is None or gate.shape[1] != layout.n:
            raise ConfigurationError(f"{name}: gate must have one column per expert ({layout.n})")
        self.gate = ledger.hold(np.array(gate, dtype=DTYPE), "Param", f"{name} gate")
        self.gate_grad = ledger.alloc(gate.shape, "Grad", f"{name} gate grad")

    def zero_grad(self) -> None:
        super().zero_grad()
        self.gate_grad[...] = 0.0

    def _begin_forward(self, x):
        led = self.ledger
        self.x = led.hold(x)
        t = rows(x)
        self.probs = led.adopt(softmax_rows(matmul(t, self.gate)))
        self.sel = led.adopt(np.argmax(self.probs, axis=1))
        self.psel = self.probs[np.arange(t.shape[0]), self.sel]
        self._blocks = {}

    def _forward_step(self, j, w):
        led = self.ledger
        idx = led.adopt(np.flatnonzero(self.sel == j))
        h, a, o = expert_forward(rows(self.x)[idx], w["w1"], w["b1"], w["w2"], w["b2"])
        h, a, o = led.adopt(h), led.adopt(a), led.adopt(o)
        self._blocks[j] = (idx, led.adopt(o * self.psel[idx, None]))
        return idx, h, a, o

    def _finish_forward(self):
        self._recycle_check()
        y = self.ledger.alloc(self.x.shape, label=f"{self.name} out")
        yt = rows(y)
        for j in range(self.n):
            idx, block = self._blocks[j]
            yt[idx] = block
            self.ledger.release(block)
        self._blocks = None
        return y

    def _begin_backward(self, dy):
        self.dyt = rows(dy)
        self.dx = self.ledger.alloc(self.x.shape, label=f"{self.name} dx")
        self.dpsel = self.ledger.alloc(self.dyt.shape[0], label=f"{self.name} dgate")

    def _backward_step(self, j, w, g, cache):
        idx, h, a, o = cache
        dyj = self.dyt[idx]
        self.dpsel[idx] = row_sum(dyj * o)
        d_o = dyj * self.psel[idx, None]
        accumulate_weight_grad(g["w2"], g["b2"], a, d_o)
        dh = gelu_backward(h, matmul(d_o, transpose(w["w2"])))
        accumulate_weight_grad(g["w1"], g["b1"], rows(self.x)[idx], dh)
        rows(self.dx)[idx] = matmul(dh, transpose(w["w1"]))
        for t in (h, a, o, idx):
            self.ledger.release(t)

    def _finish_backward(self):
        led = self.ledger
        t = rows(self.x)
        upstream = np.zeros_like(self.probs)
        upstream[np.arange(t.shape[0]), self.sel] = self.dpsel
        dlogits = softmax_rows_backward(self.probs, upstream)
        local = matmul(transpose(t), dlogits)
        self.gate_grad += ring_allreduce(self.comm, local)
        matmul(dlogits, transpose(self.gate), out=rows(self.dx), accumulate=True)
        for z in (self.probs, self.sel, self.dpsel, self.x):
            led.release(z)
        dx = self.dx
        self.probs = self.sel = self.psel = self.dpsel = self.x = self.dx = self.dyt = None
        return dx
