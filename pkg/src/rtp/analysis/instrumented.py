"""Ledger-instrumented runs, duplication against the serial baseline, and batch sweeps."""
from __future__ import annotations

from dataclasses import dataclass, field

from ..config import ModelConfig, check_divisibility, count_parameters, init_params, make_batch
from ..ledger import CATEGORIES, MemoryLedger
from ..model import run_rtp, run_serial

BYTES = 8
REPORT_CATEGORIES = CATEGORIES + ("Param+Grad", "Total")


def model_bytes(cfg: ModelConfig) -> int:
    """W: bytes of every parameter (G is the same)."""
    return count_parameters(cfg) * BYTES


def activation_bytes(cfg: ModelConfig, batch: int) -> int:
    """Peak serial activation bytes for one training step on ``batch`` sequences.

    The peak is reached when the loss gradient has just been formed: every
    layer's cache is live, together with the logits and their gradient.
    """
    T = batch * cfg.sequence_length
    H, F, V = cfg.hidden_size, cfg.embedding_size, cfg.vocab_size
    probs = batch * cfg.attention_heads * cfg.sequence_length ** 2
    if cfg.moe:
        block = 7 * T * H + 2 * T * F + probs + T * (cfg.n_experts + 2)
    else:
        block = 6 * T * H + 2 * T * F + probs
    elements = T + T * H + cfg.layers * block + 2 * T * V
    return elements * BYTES


def boundary_activation_bytes(cfg: ModelConfig, batch: int) -> int:
    """A_p: one hidden state handed between pipeline stages."""
    return batch * cfg.sequence_length * cfg.hidden_size * BYTES


def ledger_peaks(ledger: MemoryLedger) -> dict[str, int]:
    out = dict(ledger.peak)
    out["Param+Grad"] = ledger.peak_of("Param", "Grad")
    out["Total"] = ledger.total_peak
    return out


@dataclass
class LedgerReport:
    strategy: str
    n: int
    batch: int
    worker_peaks: list[dict[str, int]]
    serial_peaks: dict[str, int]
    in_flight_peak: int = 0
    recycle_checks: int = 0
    param_grad_comm_peak: int = 0
    duplication: dict[str, int] = field(default_factory=dict)

    @property
    def peak(self) -> dict[str, int]:
        """Per category, the largest peak over workers."""
        return {c: max(w[c] for w in self.worker_peaks) for c in REPORT_CATEGORIES}


def ledger_instrumented_run(
    cfg: ModelConfig,
    strategy: str,
    n: int,
    batch: int,
    seed: int = 0,
    transport: str = "lockstep",
) -> LedgerReport:
    """One training step with every tensor routed through per-worker ledgers.

    ``batch`` is the global batch. Duplication per category is
    ``n * max_worker_peak - serial_peak``, with the serial oracle run on the
    same global batch as the baseline.
    """
    cfg = cfg.with_experts(n)
    check_divisibility(cfg, n, batch)
    params = init_params(cfg, seed)
    ids, target = make_batch(cfg, batch, seed)
    serial = ledger_peaks(run_serial(cfg, params, ids, target).ledgers[0])
    if strategy == "serial":
        workers, in_flight, checks, pgc = [serial], 0, 0, serial["Param+Grad"]
        n_eff = 1
    else:
        variant = strategy.removeprefix("rtp-")
        res = run_rtp(cfg, params, ids, target, n, variant, transport)
        workers = [ledger_peaks(l) for l in res.ledgers]
        in_flight = max(l.in_flight_peak for l in res.ledgers)
        checks = res.recycle_checks
        pgc = max(l.peak_of("Param", "Grad", "CommBuffer") for l in res.ledgers)
        n_eff = n
    report = LedgerReport(strategy, n_eff, batch, workers, serial, in_flight, checks, pgc)
    report.duplication = {c: n_eff * report.peak[c] - serial[c] for c in REPORT_CATEGORIES}
    return report


def batch_sweep(
    cfg: ModelConfig,
    strategy: str,
    n: int,
    per_worker_batches=(1, 2, 4, 8),
    seed: int = 0,
    transport: str = "lockstep",
) -> list[tuple[int, int]]:
    """(global batch, per-worker total peak bytes) for each per-worker batch size."""
    points = []
    for b in per_worker_batches:
        rep = ledger_instrumented_run(cfg, strategy, n, b * n, seed, transport)
        points.append((b * n, rep.peak["Total"]))
    return points


def collinear(points: list[tuple[int, int]]) -> bool:
    """Exact integer test that every point lies on the line through the first two."""
    if len(points) < 3:
        return True
    (x0, y0), (x1, y1) = points[0], points[1]
    return all((y - y0) * (x1 - x0) == (y1 - y0) * (x - x0) for x, y in points[2:])
