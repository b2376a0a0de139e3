"""Alpha-beta-gamma timing model.

A message of ``m`` bytes costs ``alpha + beta * m`` seconds and ``f`` floating
point operations cost ``gamma * f`` seconds.
"""
from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CostModel:
    alpha: float = 1e-6
    beta: float = 1e-10
    gamma: float = 1e-11

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("cost-model parameters must be non-negative")

    def comm_time(self, nbytes: float) -> float:
        return self.alpha + self.beta * nbytes

    def compute_time(self, flops: float) -> float:
        return self.gamma * flops


def gemm_flops(b: float, i: float, o: float) -> float:
    return 2 * b * i * o


def eq1_compute_time(B, I, O, N, cost: CostModel, launch_overhead: float = 0.0) -> float:
    """N kernels of shape (B/N, I, O/N), each paying one launch overhead."""
    return N * (cost.compute_time(gemm_flops(B / N, I, O / N)) + launch_overhead)


def serial_compute_time(B, I, O, cost: CostModel, launch_overhead: float = 0.0) -> float:
    return cost.compute_time(gemm_flops(B, I, O)) + launch_overhead


def eq2_comm_time(M_bytes, N, cost: CostModel) -> float:
    """N-1 ring steps, each moving one shard of M/N bytes."""
    return (N - 1) * cost.comm_time(M_bytes / N)


def ring_allgather_time(M_bytes, N, cost: CostModel) -> float:
    """Modeled time of a ring all-gather of an M-byte buffer.

    Each of the N-1 steps forwards one M/N-byte chunk to the next rank.
    """
    steps, chunk = N - 1, M_bytes / N
    return steps * cost.comm_time(chunk)
