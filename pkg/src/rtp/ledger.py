"""Per-worker byte accounting with peak tracking.

Arrays are registered by identity with a reference count, so a tensor cached
by two layers is charged once and freed when the last holder releases it.
Kernel scratch that dies inside a single call is not registered.

Messages in flight inside the transport are tracked separately (``in_flight``)
and are not part of any category: the in-place exchange needs one message's
worth of staging, and that staging is exempt from the duplication metric.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .tensor import DTYPE

CATEGORIES = ("Param", "Grad", "Activation", "CommBuffer", "Other")


@dataclass
class _Entry:
    array: object
    category: str
    nbytes: int
    refs: int


class MemoryLedger:
    def __init__(self, name: str = "", keep_history: bool = True):
        self.name = name
        self.current = dict.fromkeys(CATEGORIES, 0)
        self.peak = dict.fromkeys(CATEGORIES, 0)
        self.total_peak = 0
        self.in_flight = 0
        self.in_flight_peak = 0
        self.keep_history = keep_history
        self.history: list[tuple[str, tuple[int, ...]]] = []
        self.marks: list[tuple[str, dict[str, int]]] = []
        self._live: dict[int, _Entry] = {}
        self._reserved: dict[int, _Entry] = {}
        self._next_token = 0

    # -- accounting core -------------------------------------------------
    def _change(self, category: str, delta: int, label: str) -> None:
        if category not in self.current:
            raise KeyError(f"unknown ledger category {category!r}")
        self.current[category] += delta
        if self.current[category] < 0:
            raise RuntimeError(f"ledger {self.name}: {category} went negative ({label})")
        if self.current[category] > self.peak[category]:
            self.peak[category] = self.current[category]
        total = self.total
        if total > self.total_peak:
            self.total_peak = total
        if self.keep_history:
            self.history.append((label, tuple(self.current[c] for c in CATEGORIES)))

    @property
    def total(self) -> int:
        return sum(self.current.values())

    # -- array registration ----------------------------------------------
    def hold(self, array: np.ndarray, category: str = "Activation", label: str = "") -> np.ndarray:
        key = id(array)
        entry = self._live.get(key)
        if entry is None:
            entry = _Entry(array, category, int(array.nbytes), 0)
            self._live[key] = entry
            self._change(category, entry.nbytes, label or f"+{category}")
        entry.refs += 1
        return array

    def release(self, array: np.ndarray, label: str = "") -> None:
        key = id(array)
        entry = self._live.get(key)
        if entry is None or entry.array is not array:
            raise RuntimeError(f"ledger {self.name}: release of an unregistered array")
        entry.refs -= 1
        if entry.refs == 0:
            del self._live[key]
            self._change(entry.category, -entry.nbytes, label or f"-{entry.category}")

    def alloc(self, shape, category: str = "Activation", label: str = "", dtype=DTYPE) -> np.ndarray:
        return self.hold(np.zeros(shape, dtype=dtype), category, label)

    def adopt(self, array: np.ndarray, category: str = "Activation", label: str = "") -> np.ndarray:
        """Register an array produced by a kernel (ownership passes to the ledger)."""
        return self.hold(array, category, label)

    # -- raw reservations (buffer pools) ---------------------------------
    def reserve(self, nbytes: int, category: str, label: str = "") -> int:
        token = self._next_token
        self._next_token += 1
        self._reserved[token] = _Entry(None, category, int(nbytes), 1)
        self._change(category, int(nbytes), label or f"+{category}")
        return token

    def unreserve(self, token: int, label: str = "") -> None:
        entry = self._reserved.pop(token)
        self._change(entry.category, -entry.nbytes, label or f"-{entry.category}")

    @contextmanager
    def message_in_flight(self, nbytes: int):
        self.in_flight += nbytes
        self.in_flight_peak = max(self.in_flight_peak, self.in_flight)
        try:
            yield
        finally:
            self.in_flight -= nbytes

    # -- queries ----------------------------------------------------------
    def mark(self, label: str) -> None:
        self.marks.append((label, dict(self.current)))

    def peak_of(self, *categories: str) -> int:
        """Peak of the summed current bytes of ``categories`` over the recorded history."""
        if not self.keep_history:
            raise RuntimeError("peak_of needs keep_history=True")
        idx = [CATEGORIES.index(c) for c in categories]
        best = 0
        for _, snap in self.history:
            best = max(best, sum(snap[i] for i in idx))
        return best

    def live_arrays(self, category: str | None = None) -> int:
        return sum(1 for e in self._live.values() if category is None or e.category == category)

    def assert_step_clean(self) -> None:
        """Everything except persistent parameters and gradients has been released."""
        leftover = {c: self.current[c] for c in ("Activation", "CommBuffer", "Other") if self.current[c]}
        if leftover:
            raise RuntimeError(f"ledger {self.name}: unreleased bytes at step end {leftover}")

    def report(self) -> dict:
        return {
            "current": dict(self.current),
            "peak": dict(self.peak),
            "total_peak": self.total_peak,
            "in_flight_peak": self.in_flight_peak,
        }


class CommPool:
    """The out-of-place rotation buffer: one region sized for the largest shard.

    Acquiring charges the full capacity to ``CommBuffer``; layers take views of
    the length they need.
    """

    def __init__(self, ledger: MemoryLedger, capacity: int):
        self.ledger = ledger
        self.capacity = int(capacity)
        self._buf = np.zeros(self.capacity, dtype=DTYPE)
        self._token: int | None = None

    @property
    def held(self) -> bool:
        return self._token is not None

    def acquire(self, label: str = "comm buffer") -> None:
        if self._token is None:
            self._token = self.ledger.reserve(self._buf.nbytes, "CommBuffer", label)

    def release(self, label: str = "comm buffer released") -> None:
        if self._token is not None:
            self.ledger.unreserve(self._token, label)
            self._token = None

    def view(self, length: int) -> np.ndarray:
        if self._token is None:
            raise RuntimeError("comm buffer used while not acquired")
        if length > self.capacity:
            raise ValueError(f"requested {length} elements from a pool of {self.capacity}")
        return self._buf[:length]
