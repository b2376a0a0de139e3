"""Closed-form memory accounting for the seven training strategies.

``table1_memory`` returns total-system quantities
``(activation, param, duplication)`` where ``param`` counts weights plus
gradients. Divide by ``N`` for a per-worker figure. Integer inputs give
integer outputs.
"""
from __future__ import annotations

import enum


class MemoryStrategy(str, enum.Enum):
    NO_PARALLELISM = "NoParallelism"
    TENSOR_PARALLEL = "TensorParallel"
    DATA_PARALLEL = "DataParallel"
    PIPELINE_PARALLEL = "PipelineParallel"
    FSDP = "FSDP"
    RTP = "RTP"
    RTP_INPLACE = "RTPInplace"


TABLE1_STRATEGIES = tuple(s.value for s in MemoryStrategy)


def table1_memory(strategy, W, G, A, A_p, N):
    """Evaluate one row. ``max(W, G)`` is the size of the largest transient buffer."""
    try:
        s = MemoryStrategy(strategy)
    except ValueError:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {TABLE1_STRATEGIES}") from None
    if min(W, G, A, A_p) < 0:
        raise ValueError("memory quantities must be non-negative")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    buf = max(W, G)
    rows = {
        MemoryStrategy.NO_PARALLELISM: (A, W + G, 0),
        MemoryStrategy.TENSOR_PARALLEL: (A * N, W + G, A * (N - 1)),
        MemoryStrategy.DATA_PARALLEL: (A, (W + G) * N, (W + G) * (N - 1)),
        MemoryStrategy.PIPELINE_PARALLEL: (A + A_p * N, W + G, A_p * N),
        MemoryStrategy.FSDP: (A, W + G + buf * (N - 1), buf * (N - 1)),
        MemoryStrategy.RTP: (A, W + G + buf, buf),
        MemoryStrategy.RTP_INPLACE: (A, W + G, 0),
    }
    return rows[s]


def table1_rows(W, G, A, A_p, N) -> list[tuple[str, object, object, object]]:
    return [(name, *table1_memory(name, W, G, A, A_p, N)) for name in TABLE1_STRATEGIES]
