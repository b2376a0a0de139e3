"""Flat parameters and shard layouts.

A layer's parameters are cut into ``n`` equal shards according to a
:class:`ShardLayout`. The shard pieces are concatenated in shard order into a
:class:`FlatParameter`, so that shard ``j`` of the layer is exactly the
contiguous slice ``j`` of the flat buffer and every rotation message has the
same size.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigurationError
from .tensor import DTYPE


@dataclass(frozen=True)
class Segment:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return math.prod(self.shape)


@dataclass
class FlatParameter:
    flat: np.ndarray
    segments: tuple[Segment, ...]
    pad_len: int
    n_shards: int

    @property
    def numel(self) -> int:
        """Number of real (unpadded) elements."""
        return self.flat.size - self.pad_len

    @property
    def shard_len(self) -> int:
        return self.flat.size // self.n_shards

    @property
    def nbytes(self) -> int:
        return self.flat.nbytes

    def check(self) -> None:
        total = sum(s.size for s in self.segments)
        assert self.flat.size == total + self.pad_len
        assert self.flat.size % self.n_shards == 0
        assert 0 <= self.pad_len < self.n_shards
        assert not np.any(self.flat[total:])
        offset = 0
        for s in self.segments:
            assert s.offset == offset
            offset += s.size


def flatten(params: Sequence[tuple[str, np.ndarray]], n: int) -> FlatParameter:
    """Concatenate flattened ``params`` in order and zero-pad the tail to a multiple of ``n``."""
    if n <= 0:
        raise ValueError(f"partition factor must be positive, got {n}")
    segments = []
    offset = 0
    for name, t in params:
        t = np.asarray(t, dtype=DTYPE)
        segments.append(Segment(name, tuple(t.shape), offset))
        offset += t.size
    pad = (-offset) % n
    flat = np.zeros(offset + pad, dtype=DTYPE)
    for seg, (_, t) in zip(segments, params):
        flat[seg.offset: seg.offset + seg.size] = np.ravel(t)
    return FlatParameter(flat, tuple(segments), pad, n)


def unflatten(fp: FlatParameter) -> list[tuple[str, np.ndarray]]:
    return [
        (s.name, fp.flat[s.offset: s.offset + s.size].reshape(s.shape).copy())
        for s in fp.segments
    ]


def shard_view(fp: FlatParameter, rank: int) -> np.ndarray:
    if not 0 <= rank < fp.n_shards:
        raise ValueError(f"rank {rank} outside 0..{fp.n_shards - 1}")
    k = fp.shard_len
    return fp.flat[rank * k: (rank + 1) * k]


def unpack(buffer: np.ndarray, template: Sequence[Segment]) -> dict[str, np.ndarray]:
    """Named views into a 1-D shard buffer; writes go through to ``buffer``."""
    return {s.name: buffer[s.offset: s.offset + s.size].reshape(s.shape) for s in template}


class Strategy(enum.Enum):
    OUTPUT = "OutputPartition"
    HEAD = "HeadPartition"
    EXPERT = "ExpertPartition"


@dataclass(frozen=True)
class ShardLayout:
    """How one layer's parameters are divided among ``n`` logical shards.

    ``ranges[j]`` is the half-open index range owned by shard ``j``: output
    columns for OUTPUT, attention heads for HEAD, experts for EXPERT.
    ``axes`` maps each parameter name to the axis that is cut (``None`` for
    EXPERT layouts, where whole experts are assigned).
    """

    strategy: Strategy
    n: int
    ranges: tuple[tuple[int, int], ...]
    axes: Mapping[str, int] = field(default_factory=dict)
    head_dim: int = 1

    def column_range(self, j: int) -> tuple[int, int]:
        lo, hi = self.ranges[j]
        return lo * self.head_dim, hi * self.head_dim

    def columns(self, j: int) -> slice:
        return slice(*self.column_range(j))

    def shard_params(self, params: Mapping[str, np.ndarray], j: int) -> list[tuple[str, np.ndarray]]:
        """Parameter pieces owned by shard ``j``, in a fixed order."""
        if self.strategy is Strategy.EXPERT:
            prefix = f"experts.{j}."
            return [
                (name[len(prefix):], np.asarray(t, dtype=DTYPE))
                for name, t in params.items() if name.startswith(prefix)
            ]
        sl = self.columns(j)
        pieces = []
        for name, axis in self.axes.items():
            t = np.asarray(params[name], dtype=DTYPE)
            index = [slice(None)] * t.ndim
            index[axis] = sl
            pieces.append((name, np.ascontiguousarray(t[tuple(index)])))
        return pieces

    def flat_parameter(self, params: Mapping[str, np.ndarray]) -> FlatParameter:
        pieces = []
        for j in range(self.n):
            pieces.extend((f"{name}@{j}", t) for name, t in self.shard_params(params, j))
        return flatten(pieces, self.n)

    def template(self, params: Mapping[str, np.ndarray]) -> tuple[Segment, ...]:
        """Shard-local segment table (identical for every shard)."""
        return flatten(self.shard_params(params, 0), 1).segments

    def assemble(self, shards: Sequence[Mapping[str, np.ndarray]]) -> dict[str, np.ndarray]:
        """Inverse of :meth:`shard_params`: rebuild full parameters from per-shard dicts."""
        if self.strategy is Strategy.EXPERT:
            return {
                f"experts.{j}.{name}": np.array(t) for j, s in enumerate(shards) for name, t in s.items()
            }
        return {
            name: np.concatenate([np.asarray(s[name]) for s in shards], axis=axis)
            for name, axis in self.axes.items()
        }


def _divisible(what: str, size: int, n: int) -> None:
    if n <= 0:
        raise ConfigurationError(f"partition factor must be positive, got {n}")
    if size % n:
        ok = [d for d in range(1, size + 1) if size % d == 0]
        raise ConfigurationError(
            f"{what}={size} is not divisible by n={n}; use a worker count that divides "
            f"{size} (one of {ok[:8]}{'...' if len(ok) > 8 else ''}) or resize the layer"
        )


def layout_linear(in_dim: int, out_dim: int, n: int, names: Sequence[str] = ("w", "b")) -> ShardLayout:
    """Output-feature partition: shard ``j`` owns weight columns and bias entries ``j*out/n .. (j+1)*out/n``.

    ``names`` lists the partitioned parameters; each is cut on its last axis.
    Pass ``names=("table",)`` for an embedding table.
    """
    if in_dim <= 0:
        raise ConfigurationError(f"in_dim must be positive, got {in_dim}")
    _divisible("out_dim", out_dim, n)
    k = out_dim // n
    ranges = tuple((j * k, (j + 1) * k) for j in range(n))
    return ShardLayout(Strategy.OUTPUT, n, ranges, {name: -1 for name in names})


def layout_embedding(vocab: int, dim: int, n: int) -> ShardLayout:
    return layout_linear(vocab, dim, n, names=("table",))


def layout_attention(hidden: int, heads: int, n: int) -> ShardLayout:
    """Head-group partition.

    Shard ``j`` owns heads ``j*heads/n .. (j+1)*heads/n``: the matching column
    blocks of the Q/K/V projections and their biases, the matching row block of
    the output projection, and the same slice of the output bias.
    """
    if heads <= 0 or hidden % heads:
        raise ConfigurationError(f"hidden={hidden} must be a positive multiple of heads={heads}")
    _divisible("heads", heads, n)
    k = heads // n
    ranges = tuple((j * k, (j + 1) * k) for j in range(n))
    axes = {"wq": -1, "bq": -1, "wk": -1, "bk": -1, "wv": -1, "bv": -1, "wo": 0, "bo": -1}
    return ShardLayout(Strategy.HEAD, n, ranges, axes, head_dim=hidden // heads)


def layout_moe(n_experts: int, n: int) -> ShardLayout:
    """One expert per shard: shard ``j`` owns expert ``j``."""
    if n <= 0:
        raise ConfigurationError(f"partition factor must be positive, got {n}")
    if n_experts != n:
        raise ConfigurationError(
            f"expert partition needs n_experts == n, got {n_experts} experts for {n} workers; "
            f"set the expert count to the worker count"
        )
    return ShardLayout(Strategy.EXPERT, n, tuple((j, j + 1) for j in range(n)))
