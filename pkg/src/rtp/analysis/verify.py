"""Oracle comparisons and finite-difference gradient checks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..config import ModelConfig, init_params, make_batch
from ..model import RunResult, run_rtp, run_serial
from ..tensor import SplitMix64
from .reference import ReferenceModel

OUTPUT_RTOL = 1e-10
GRAD_RTOL = 1e-9
FD_RTOL = 1e-6
FD_STEP = 1e-6
# Gradient tensors are compared against max(their own scale, GRAD_FLOOR times
# the largest gradient in the model). The floor only matters for the key
# bias, whose gradient vanishes identically because softmax ignores a
# per-row constant; its float64 value is pure rounding noise.
ZERO_FLOOR = 1e-300
GRAD_FLOOR = 1e-9

# parameters whose exact gradient is zero for every input
STRUCTURALLY_ZERO = ("attn.bk",)


def rel_error(a, b, floor: float = ZERO_FLOOR) -> float:
    """max |a - b| / max(max |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


@dataclass
class OracleReport:
    n: int
    variant: str
    output_error: float
    loss_error: float
    grad_errors: dict[str, float]
    result: RunResult | None = None

    @property
    def max_grad_error(self) -> float:
        return max(self.grad_errors.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return self.output_error <= OUTPUT_RTOL and self.max_grad_error <= GRAD_RTOL


def compare_to_serial(
    cfg: ModelConfig,
    n: int,
    variant: str = "inplace",
    batch: int = 8,
    seed: int = 0,
    transport: str = "lockstep",
    hook=None,
) -> OracleReport:
    cfg = cfg.with_experts(n)
    params = init_params(cfg, seed)
    ids, target = make_batch(cfg, batch, seed)
    s = run_serial(cfg, params, ids, target)
    r = run_rtp(cfg, params, ids, target, n, variant, transport, hook)
    if set(r.grads) != set(s.grads):
        raise AssertionError(f"gradient sets differ: {sorted(set(r.grads) ^ set(s.grads))}")
    floor = GRAD_FLOOR * max(float(np.max(np.abs(g))) for g in s.grads.values())
    grads = {k: rel_error(r.grads[k], s.grads[k], floor) for k in s.grads}
    return OracleReport(
        n, variant, rel_error(r.logits, s.logits), abs(r.loss - s.loss) / max(abs(s.loss), ZERO_FLOOR), grads, r
    )


# -- finite differences ----------------------------------------------------
@dataclass
class GradSample:
    name: str
    index: int
    analytic: float
    numeric: float

    @property
    def rel(self) -> float:
        a, f = self.analytic, self.numeric
        scale = max(abs(a), abs(f))
        return 0.0 if scale == 0.0 else abs(a - f) / scale


@dataclass
class GradcheckReport:
    samples: list[GradSample] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        return max((s.rel for s in self.samples), default=0.0)

    def worst(self) -> GradSample | None:
        return max(self.samples, key=lambda s: s.rel, default=None)


def sample_parameters(params: dict[str, np.ndarray], count: int, seed: int) -> list[tuple[str, int]]:
    """``count`` (name, flat index) pairs. Every tensor is drawn at least once
    before any is drawn twice; structurally-zero gradients are skipped."""
    names = [k for k in params if not k.endswith(STRUCTURALLY_ZERO)]
    rng = SplitMix64(seed ^ 0x5EED)
    picks = []
    for i in range(count):
        name = names[i % len(names)]
        idx = int(rng.integers((1,), params[name].size)[0])
        picks.append((name, idx))
    return picks


def gradcheck(
    cfg: ModelConfig,
    n: int = 2,
    samples: int = 200,
    batch: int = 8,
    seed: int = 0,
    variant: str = "inplace",
    transport: str = "lockstep",
) -> GradcheckReport:
    """Analytic gradients from an RTP run against central differences of the loss.

    The differences come from :class:`ReferenceModel`, an extended-precision
    forward pass written independently of the float64 kernels.
    """
    cfg = cfg.with_experts(n)
    params = init_params(cfg, seed)
    ids, target = make_batch(cfg, batch, seed)
    grads = run_rtp(cfg, params, ids, target, n, variant, transport).grads
    ref = ReferenceModel(cfg, params, ids, target)
    report = GradcheckReport()
    for name, idx in sample_parameters(params, samples, seed):
        num = ref.central_difference(name, idx, FD_STEP)
        report.samples.append(GradSample(name, idx, float(grads[name].flat[idx]), num))
    return report
