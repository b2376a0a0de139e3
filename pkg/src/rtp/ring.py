"""Worker ring, transports, and the rotation primitives.

Worker programs are ordinary functions ``fn(comm)`` run once per rank. All
cross-worker traffic goes through :meth:`Comm.exchange`, a paired
send/receive tagged with a per-worker step counter. Two transports implement
the exchange:

* :class:`LockstepTransport` runs workers one at a time in rank order. Each
  worker runs until it blocks in an exchange; once every live worker is
  blocked, the round's messages are validated (partners agree, tags match)
  and delivered together. Execution is deterministic, and a missing or
  mismatched peer is reported straight away instead of hanging.
* :class:`ConcurrentTransport` runs workers as real threads and passes
  messages over rendezvous channels. On a ring, even ranks send first and odd
  ranks receive first. When N is odd, rank N-1 also receives first, which
  keeps the ring free of deadlock.

"Clockwise" moves a payload from rank ``i`` to rank ``(i + 1) % n``.
"""
from __future__ import annotations

import queue
import threading
from contextlib import nullcontext
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import DeadlockError, ProtocolError
from .tensor import concat


@dataclass(frozen=True)
class Traffic:
    step: int
    kind: str
    dst: int
    src: int
    nbytes: int


class Comm:
    """One worker's endpoint."""

    def __init__(self, rank: int, n: int, backend):
        self.rank = rank
        self.n = n
        self.step = 0
        self.traffic: list[Traffic] = []
        self._backend = backend

    @property
    def next(self) -> int:
        return (self.rank + 1) % self.n

    @property
    def prev(self) -> int:
        return (self.rank - 1) % self.n

    def exchange(self, payload: Any, dst: int, src: int, kind: str, nbytes: int = 0) -> Any:
        """Send ``payload`` to ``dst`` and return the message received from ``src``."""
        tag = (self.step, kind)
        self.step += 1
        self.traffic.append(Traffic(tag[0], kind, dst, src, nbytes))
        return self._backend.exchange(self.rank, dst, src, tag, payload)


class _Aborted(ProtocolError):
    pass


class _LockstepRun:
    def __init__(self, n: int):
        self.n = n
        self.cv = threading.Condition()
        self.turn: int | None = 0
        self.waiting: dict[int, tuple] = {}
        self.inbox: dict[int, Any] = {}
        self.done: set[int] = set()
        self.error: BaseException | None = None
        self.results: list[Any] = [None] * n

    def _fail(self, exc: BaseException) -> None:
        if self.error is None:
            self.error = exc
        self.cv.notify_all()

    def _advance(self, current: int) -> None:
        nxt = next(
            (r for r in range(current + 1, self.n) if r not in self.done and r not in self.waiting),
            None,
        )
        if nxt is not None:
            self.turn = nxt
            self.cv.notify_all()
            return
        if not self.waiting:
            self.turn = None
            self.cv.notify_all()
            return
        for r, (dst, src, tag, _) in sorted(self.waiting.items()):
            peer = self.waiting.get(dst)
            if peer is None:
                state = "has already finished" if dst in self.done else "is not exchanging"
                self._fail(DeadlockError(f"rank {r} sends to rank {dst}, which {state}"))
                return
            if peer[1] != r:
                self._fail(ProtocolError(
                    f"rank {r} sends to rank {dst}, but rank {dst} expects a message from rank {peer[1]}"
                ))
                return
            if peer[2] != tag:
                self._fail(ProtocolError(f"step tag mismatch: rank {r} at {tag}, rank {dst} at {peer[2]}"))
                return
        for r, (dst, _, _, payload) in self.waiting.items():
            self.inbox[dst] = payload
        self.waiting.clear()
        self.turn = min(self.inbox)
        self.cv.notify_all()

    def exchange(self, rank, dst, src, tag, payload):
        with self.cv:
            if self.error is not None:
                raise _Aborted("exchange aborted after a failure on another worker")
            self.waiting[rank] = (dst, src, tag, payload)
            self._advance(rank)
            self.cv.wait_for(lambda: self.error is not None or (self.turn == rank and rank in self.inbox))
            if self.error is not None:
                raise _Aborted("exchange aborted after a failure on another worker")
            return self.inbox.pop(rank)

    def _worker(self, rank: int, fn, comm: Comm) -> None:
        with self.cv:
            self.cv.wait_for(lambda: self.error is not None or self.turn == rank)
            if self.error is not None:
                return
        try:
            result = fn(comm)
        except BaseException as exc:  # noqa: BLE001 - re-raised by run()
            with self.cv:
                if not isinstance(exc, _Aborted):
                    self._fail(exc)
                else:
                    self.cv.notify_all()
            return
        with self.cv:
            self.results[rank] = result
            self.done.add(rank)
            self._advance(rank)


class LockstepTransport:
    """Deterministic round-based scheduler; one worker executes at a time."""

    name = "lockstep"

    def run(self, n: int, fn: Callable[[Comm], Any]) -> tuple[list[Any], list[Comm]]:
        state = _LockstepRun(n)
        comms = [Comm(r, n, state) for r in range(n)]
        threads = [
            threading.Thread(target=state._worker, args=(r, fn, comms[r]), daemon=True, name=f"lockstep-{r}")
            for r in range(n)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if state.error is not None:
            raise state.error
        return state.results, comms


@dataclass
class _Message:
    tag: tuple
    payload: Any


class _Channel:
    """Rendezvous channel: ``send`` returns only after the receiver has taken the message."""

    def __init__(self):
        self.data: queue.Queue = queue.Queue(maxsize=1)
        self.ack: queue.Queue = queue.Queue(maxsize=1)


class _ConcurrentRun:
    POLL = 0.02

    def __init__(self, n: int, timeout: float):
        self.n = n
        self.timeout = timeout
        self.channels = {(s, d): _Channel() for s in range(n) for d in range(n) if s != d}
        self.abort = threading.Event()

    def _wait(self, op, what: str):
        waited = 0.0
        while True:
            if self.abort.is_set():
                raise _Aborted("exchange aborted after a failure on another worker")
            try:
                return op(self.POLL)
            except (queue.Empty, queue.Full):
                waited += self.POLL
                if waited >= self.timeout:
                    raise DeadlockError(f"timed out after {self.timeout:.1f}s waiting to {what}")

    def _send(self, src: int, dst: int, msg: _Message) -> None:
        ch = self.channels[(src, dst)]
        self._wait(lambda t: ch.data.put(msg, timeout=t), f"send from rank {src} to rank {dst}")
        self._wait(lambda t: ch.ack.get(timeout=t), f"acknowledge send from rank {src} to rank {dst}")

    def _recv(self, src: int, dst: int) -> _Message:
        ch = self.channels[(src, dst)]
        msg = self._wait(lambda t: ch.data.get(timeout=t), f"receive at rank {dst} from rank {src}")
        ch.ack.put(None)
        return msg

    def exchange(self, rank, dst, src, tag, payload):
        if dst == rank and src == rank:
            return payload
        send_first = rank % 2 == 0 and not (self.n % 2 == 1 and rank == self.n - 1)
        if send_first:
            self._send(rank, dst, _Message(tag, payload))
            msg = self._recv(src, rank)
        else:
            msg = self._recv(src, rank)
            self._send(rank, dst, _Message(tag, payload))
        if msg.tag != tag:
            raise ProtocolError(f"step tag mismatch at rank {rank}: expected {tag}, got {msg.tag} from rank {src}")
        return msg.payload


class ConcurrentTransport:
    """Real threads exchanging over rendezvous channels."""

    name = "concurrent"

    def __init__(self, timeout: float = 10.0):
        self.timeout = timeout

    def run(self, n: int, fn: Callable[[Comm], Any]) -> tuple[list[Any], list[Comm]]:
        state = _ConcurrentRun(n, self.timeout)
        comms = [Comm(r, n, state) for r in range(n)]
        results: list[Any] = [None] * n
        errors: list[BaseException | None] = [None] * n

        def work(r: int) -> None:
            try:
                results[r] = fn(comms[r])
            except BaseException as exc:  # noqa: BLE001 - re-raised below
                errors[r] = exc
                state.abort.set()

        threads = [threading.Thread(target=work, args=(r,), daemon=True, name=f"worker-{r}") for r in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        real = [e for e in errors if e is not None and not isinstance(e, _Aborted)]
        if real:
            raise real[0]
        return results, comms


def make_transport(transport) -> LockstepTransport | ConcurrentTransport:
    if isinstance(transport, (LockstepTransport, ConcurrentTransport)):
        return transport
    if transport == "lockstep":
        return LockstepTransport()
    if transport == "concurrent":
        return ConcurrentTransport()
    raise ValueError(f"unknown transport {transport!r} (expected 'lockstep' or 'concurrent')")


@dataclass
class ShardSlot:
    """The one shard a worker holds for a layer, plus its traveling gradient accumulator."""

    weight: np.ndarray
    grad_acc: np.ndarray
    logical_id: int
    rotation_offset: int = 0

    def checksum(self) -> float:
        return float(np.sum(self.weight))


def _exchange_slot(comm: Comm, slot: ShardSlot, dst: int, src: int, kind: str, with_grad: bool, ledger):
    # the outgoing copy is the one in-flight message the ledger exempts
    w = slot.weight.copy()
    g = slot.grad_acc.copy() if with_grad else None
    nbytes = w.nbytes + (g.nbytes if g is not None else 0)
    ctx = ledger.message_in_flight(nbytes) if ledger is not None else nullcontext()
    with ctx:
        return comm.exchange((slot.logical_id, w, g), dst, src, kind, nbytes)


def rotate_clockwise(comm: Comm, slot: ShardSlot, ledger=None) -> ShardSlot:
    """In-place forward rotation: the weight shard moves to the next rank."""
    if comm.n == 1:
        return slot
    lid, w, _ = _exchange_slot(comm, slot, comm.next, comm.prev, "rotate-cw", False, ledger)
    np.copyto(slot.weight, w)
    slot.logical_id = lid
    slot.rotation_offset += 1
    return slot


def rotate_counterclockwise(comm: Comm, slot: ShardSlot, ledger=None) -> ShardSlot:
    """In-place backward rotation: weight and gradient accumulator move to the previous rank together."""
    if comm.n == 1:
        return slot
    lid, w, g = _exchange_slot(comm, slot, comm.prev, comm.next, "rotate-ccw", True, ledger)
    np.copyto(slot.weight, w)
    np.copyto(slot.grad_acc, g)
    slot.logical_id = lid
    slot.rotation_offset -= 1
    return slot


def rotate_outofplace(comm: Comm, slot: ShardSlot, spare: np.ndarray, direction: str = "cw", ledger=None) -> ShardSlot:
    """Double-buffered rotation.

    The incoming weight shard lands in ``spare`` (the communication buffer),
    so the resident shard stays readable for compute running alongside. Once
    the step ends, the staged shard becomes resident. Counter-clockwise steps
    move the gradient accumulator in place with the same message.
    """
    if spare.shape != slot.weight.shape:
        raise ValueError(f"spare buffer shape {spare.shape} does not match shard shape {slot.weight.shape}")
    if direction not in ("cw", "ccw"):
        raise ValueError(f"direction must be 'cw' or 'ccw', got {direction!r}")
    if comm.n == 1:
        return slot
    if direction == "cw":
        lid, w, g = _exchange_slot(comm, slot, comm.next, comm.prev, "rotate-cw", False, ledger)
    else:
        lid, w, g = _exchange_slot(comm, slot, comm.prev, comm.next, "rotate-ccw", True, ledger)
    np.copyto(spare, w)
    np.copyto(slot.weight, spare)
    if g is not None:
        np.copyto(slot.grad_acc, g)
    slot.logical_id = lid
    slot.rotation_offset += 1 if direction == "cw" else -1
    return slot


def ring_allgather(comm: Comm, shard: np.ndarray) -> np.ndarray:
    """Every worker ends with all shards concatenated in rank order (N-1 ring steps)."""
    n, r = comm.n, comm.rank
    chunks: list[np.ndarray | None] = [None] * n
    chunks[r] = np.array(shard, copy=True)
    for step in range(n - 1):
        send = chunks[(r - step) % n]
        chunks[(r - step - 1) % n] = comm.exchange(send, comm.next, comm.prev, "allgather", send.nbytes)
    return concat(chunks, axis=0)


def ring_allreduce(comm: Comm, array: np.ndarray) -> np.ndarray:
    """Sum ``array`` across workers: ring reduce-scatter then ring allgather.

    Every worker gets a bitwise-identical result.
    """
    n, r = comm.n, comm.rank
    a = np.asarray(array, dtype=np.float64)
    if n == 1:
        return a.copy()
    flat = a.ravel()
    pad = (-flat.size) % n
    flat = np.concatenate([flat, np.zeros(pad)])
    chunks = [c.copy() for c in np.split(flat, n)]
    for step in range(n - 1):
        send = chunks[(r - step) % n]
        got = comm.exchange(send.copy(), comm.next, comm.prev, "allreduce", send.nbytes)
        idx = (r - step - 1) % n
        chunks[idx] = chunks[idx] + got
    for step in range(n - 1):
        send = chunks[(r - step + 1) % n]
        chunks[(r - step) % n] = comm.exchange(send.copy(), comm.next, comm.prev, "allreduce", send.nbytes)
    return np.concatenate(chunks)[: a.size].reshape(a.shape)


class WorkerGroup:
    """``n`` workers on a ring, driven by a pluggable transport."""

    def __init__(self, n: int, transport="lockstep"):
        if n < 1:
            raise ValueError(f"worker count must be at least 1, got {n}")
        self.n = n
        self.transport = make_transport(transport)
        self.comms: list[Comm] = []

    @property
    def ranks(self) -> range:
        return range(self.n)

    def run(self, fn: Callable[[Comm], Any]) -> list[Any]:
        results, self.comms = self.transport.run(self.n, fn)
        return results

    def traffic(self, rank: int | None = None) -> list[Traffic]:
        if rank is None:
            return [t for c in self.comms for t in c.traffic]
        return list(self.comms[rank].traffic)

    # group-level conveniences over one slot per worker
    def rotate_clockwise(self, slots: list[ShardSlot]) -> list[ShardSlot]:
        return self.run(lambda comm: rotate_clockwise(comm, slots[comm.rank]))

    def rotate_counterclockwise(self, slots: list[ShardSlot]) -> list[ShardSlot]:
        return self.run(lambda comm: rotate_counterclockwise(comm, slots[comm.rank]))

    def rotate_outofplace(self, slots: list[ShardSlot], spares: list[np.ndarray], direction: str = "cw") -> list[ShardSlot]:
        return self.run(lambda comm: rotate_outofplace(comm, slots[comm.rank], spares[comm.rank], direction))

    def ring_allgather(self, shards: list[np.ndarray]) -> list[np.ndarray]:
        return self.run(lambda comm: ring_allgather(comm, shards[comm.rank]))

    def ring_allreduce(self, arrays: list[np.ndarray]) -> list[np.ndarray]:
        return self.run(lambda comm: ring_allreduce(comm, arrays[comm.rank]))
