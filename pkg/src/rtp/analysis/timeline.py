"""Logical-time schedules for FSDP and the two rotation variants.

Each worker has a ``compute`` stream and a ``comm`` stream. Work is described
per unit (one sharded layer) by a :class:`UnitCost`. The schedules are
symmetric across workers, so every worker gets the same event times; comm
events carry the peer they send to so ring pairing can be checked.

* ``FSDP``: a unit's all-gather must finish before its compute starts. The
  next unit's all-gather is issued when the current compute starts (one-unit
  prefetch).
* ``RTP-outofplace``: rotation ``s`` runs on the comm stream alongside
  compute step ``s``; compute step ``s+1`` waits for both.
* ``RTP-inplace``: compute and rotation strictly alternate.

Times are combined with ``+`` and ``max`` only, so passing
:class:`fractions.Fraction` costs gives exact schedule arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from ..config import ModelConfig
from .cost import CostModel, gemm_flops

SCHEDULES = ("FSDP", "RTP-inplace", "RTP-outofplace")


@dataclass(frozen=True)
class Event:
    worker: int
    stream: str
    label: str
    start: float
    end: float
    peer: int | None = None


@dataclass(frozen=True)
class UnitCost:
    """Per-worker costs of one unit.

    ``compute_step`` is one rotated step (one shard against the local batch);
    ``comm_step`` is one rotation of one shard; ``allgather`` and
    ``full_compute`` are the FSDP equivalents.
    """

    name: str
    compute_step: float
    comm_step: float
    allgather: float
    full_compute: float


@dataclass
class Timeline:
    schedule: str
    n: int
    events: list[Event] = field(default_factory=list)

    def add(self, *args, **kw) -> Event:
        ev = Event(*args, **kw)
        self.events.append(ev)
        return ev

    def of(self, worker: int, stream: str | None = None) -> list[Event]:
        return [e for e in self.events if e.worker == worker and (stream is None or e.stream == stream)]

    @property
    def makespan(self) -> float:
        return max((e.end for e in self.events), default=0)

    def startup_latency(self, worker: int = 0) -> float:
        return min((e.start for e in self.of(worker, "compute")), default=0)

    def busy(self, worker: int = 0) -> float:
        return sum(e.end - e.start for e in self.of(worker, "compute"))

    def idle(self, worker: int = 0) -> float:
        """Time the compute stream sits empty before the makespan."""
        return self.makespan - self.busy(worker)

    def idle_fraction(self, worker: int = 0) -> float:
        m = self.makespan
        return self.idle(worker) / m if m > 0 else 0.0

    def overlapped(self, worker: int = 0) -> list[tuple[Event, Event]]:
        """Compute/comm pairs on ``worker`` whose intervals intersect."""
        comp, comm = self.of(worker, "compute"), self.of(worker, "comm")
        return [(a, b) for a in comp for b in comm if a.start < b.end and b.start < a.end]


def _rtp(tl: Timeline, units: list[UnitCost], outofplace: bool) -> None:
    n = tl.n
    for w in range(n):
        t = 0
        for u in units:
            for s in range(n):
                c_end = t + u.compute_step
                tl.add(w, "compute", f"{u.name}:step{s}", t, c_end)
                if s == n - 1:
                    t = c_end
                    continue
                r_start = t if outofplace else c_end
                r_end = r_start + u.comm_step
                tl.add(w, "comm", f"{u.name}:rotate{s}", r_start, r_end, peer=(w + 1) % n)
                t = max(c_end, r_end)


def _fsdp(tl: Timeline, units: list[UnitCost]) -> None:
    n = tl.n
    for w in range(n):
        # the first gather starts at t = 0; later ones are issued with the previous compute
        comm_free = compute_end = 0
        ag_end = []
        for k, u in enumerate(units):
            if k == 0:
                a0 = comm_free
                ag_end.append(a0 + u.allgather)
                tl.add(w, "comm", f"{u.name}:allgather", a0, ag_end[0], peer=(w + 1) % n)
                comm_free = ag_end[0]
            start = max(compute_end, ag_end[k])
            compute_end = start + u.full_compute
            tl.add(w, "compute", f"{u.name}:compute", start, compute_end)
            if k + 1 < len(units):
                nxt = units[k + 1]
                a0 = max(comm_free, start)
                ag_end.append(a0 + nxt.allgather)
                tl.add(w, "comm", f"{nxt.name}:allgather", a0, ag_end[-1], peer=(w + 1) % n)
                comm_free = ag_end[-1]


def simulate_timeline(schedule: str, units: list[UnitCost], n: int) -> Timeline:
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    tl = Timeline(schedule, n)
    if schedule == "FSDP":
        _fsdp(tl, units)
    else:
        _rtp(tl, units, outofplace=schedule == "RTP-outofplace")
    return tl


def uniform_units(count: int, compute_step: float, comm_step: float, n: int) -> list[UnitCost]:
    """``count`` identical units; the FSDP fields follow from the rotated ones."""
    return [
        UnitCost(f"unit{k}", compute_step, comm_step, (n - 1) * comm_step, n * compute_step)
        for k in range(count)
    ]


def unit_costs(cfg: ModelConfig, batch: int, n: int, cost: CostModel, launch_overhead: float = 0.0) -> list[UnitCost]:
    """Per-unit costs of the toy transformer for one forward pass on ``n`` workers."""
    H, F, V, S = cfg.hidden_size, cfg.embedding_size, cfg.vocab_size, cfg.sequence_length
    tokens = batch * S / n  # local tokens per worker
    shapes: list[tuple[str, float, float]] = [("emb", 0.0, V * H)]
    for l in range(cfg.layers):
        attn_flops = 4 * gemm_flops(tokens, H, H) + 2 * gemm_flops(batch / n * S, S, H)
        shapes.append((f"blocks.{l}.attn", attn_flops, 4 * H * H + 4 * H))
        if cfg.moe:
            # every token visits exactly one expert, so the local work is one FFN's worth
            shapes.append((f"blocks.{l}.moe", gemm_flops(tokens, H, F) + gemm_flops(tokens, F, H),
                           cfg.n_experts * (2 * H * F + F + H)))
        else:
            shapes.append((f"blocks.{l}.ffn.lin1", gemm_flops(tokens, H, F), H * F + F))
            shapes.append((f"blocks.{l}.ffn.lin2", gemm_flops(tokens, F, H), F * H + H))
    shapes.append(("head", gemm_flops(tokens, H, V), H * V + V))
    units = []
    for name, flops, numel in shapes:
        m = 8.0 * numel
        step = cost.compute_time(flops / n) + launch_overhead
        hop = cost.comm_time(m / n)
        units.append(UnitCost(name, step, hop, (n - 1) * hop, cost.compute_time(flops) + launch_overhead))
    return units


# -- checkers ---------------------------------------------------------------
def check_stream_exclusive(tl: Timeline) -> None:
    for w in range(tl.n):
        for stream in ("compute", "comm"):
            evs = sorted(tl.of(w, stream), key=lambda e: e.start)
            for a, b in zip(evs, evs[1:]):
                if b.start < a.end:
                    raise AssertionError(f"worker {w} {stream}: {a.label} overlaps {b.label}")


def check_causality(tl: Timeline) -> None:
    """Each receive (the sender's event on the peer) cannot finish before its send starts."""
    by_key = {(e.worker, e.label): e for e in tl.events if e.stream == "comm"}
    for e in tl.events:
        if e.stream != "comm" or e.peer is None:
            continue
        recv = by_key.get((e.peer, e.label))
        if recv is None:
            raise AssertionError(f"worker {e.worker} {e.label}: no matching event on peer {e.peer}")
        if recv.end < e.start:
            raise AssertionError(f"{e.label}: receive on {e.peer} completes before the send on {e.worker} starts")
