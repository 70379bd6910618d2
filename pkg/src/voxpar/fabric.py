"""Deterministic simulated message-passing among ranks.

One process hosts P rank workers (threads). Two execution modes share one
semantics:

  * "single"   — a cooperative single-scheduler mode: exactly one rank runs
    at a time; a rank keeps the baton until it blocks (recv on an empty
    queue) or finishes, then the baton passes round-robin to the next
    runnable rank. This is the acceptance/debugging mode.
  * "parallel" — one free-running worker per rank with blocking queues.

Results are bit-identical across modes because nothing depends on arrival
timing: sends are buffered and never block, recv names its source, FIFO
order holds per (src, dst, tag), and allreduce reduces in a fixed binomial
tree by ascending rank id. Deadlock is detected by a quiescence scan (all
live ranks blocked, no deliverable message), never by timeout.
"""

from __future__ import annotations

import copy
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import DeadlockError, LengthMismatch, OutOfBounds, ShapeMismatch
from .tensor import DistTensor, round_slices

TAG_ALLREDUCE = -3
TAG_REDIST = -4
TAG_DATA = -5
TAG_LABEL = -6
TAG_HALO_BASE = -10  # tag = TAG_HALO_BASE - sender's face_id (0..5)


@dataclass(frozen=True)
class Envelope:
    """One in-flight message; delivered exactly once, FIFO per (src,dst,tag)."""

    src: int
    dst: int
    tag: int
    payload: object
    nbytes: int


@dataclass
class TrafficCounters:
    """Per-rank traffic accounting; monotone within a run."""

    sent_bytes: list
    recv_bytes: list
    sent_messages: list
    recv_messages: list
    allreduce_calls: list
    allreduce_elements: list
    halo_bytes: list  # bytes sent as halo-exchange payloads

    @classmethod
    def zeros(cls, nranks: int):
        return cls(*([0] * nranks for _ in range(7)))

    def snapshot(self) -> "TrafficCounters":
        return copy.deepcopy(self)

    @property
    def total_sent(self) -> int:
        return sum(self.sent_bytes)

    @property
    def total_received(self) -> int:
        return sum(self.recv_bytes)


def _freeze(payload):
    """Snapshot a payload at send time; returns (stored, nbytes)."""
    if isinstance(payload, (bytes, bytearray, memoryview)):
        buf = bytes(payload)
        return buf, len(buf)
    arr = np.array(payload, copy=True)
    arr.setflags(write=False)
    return arr, arr.nbytes


def _thaw(stored):
    if isinstance(stored, bytes):
        return stored
    return stored.copy()


def binomial_tree_sum(vectors):
    """Reference reduction in the fabric's fixed tree order.

    Mirrors allreduce_sum exactly: partials combine pairwise by ascending
    member index, receiver's partial on the left. Exposed so tests can check
    the fabric result bit-for-bit.
    """
    partials = [np.asarray(v).copy() for v in vectors]
    count = len(partials)
    dist = 1
    while dist < count:
        for j in range(0, count, 2 * dist):
            if j + dist < count:
                partials[j] = partials[j] + partials[j + dist]
        dist *= 2
    return partials[0]


class RankCtx:
    """Per-rank handle passed to the rank program."""

    def __init__(self, fabric: "Fabric", rank: int):
        self.fabric = fabric
        self.rank = rank

    def send(self, dst: int, tag: int, payload, kind: str = "p2p"):
        self.fabric.send(self.rank, dst, tag, payload, kind=kind)

    def recv(self, src: int, tag: int):
        return self.fabric.recv(self.rank, src, tag)

    def allreduce_sum(self, vec, group=None):
        return self.fabric.allreduce_sum(self.rank, vec, group)

    def counters(self) -> TrafficCounters:
        return self.fabric.counters()


_NEW, _RUNNING, _BLOCKED, _DONE = "new", "running", "blocked", "done"


class Fabric:
    """Shared, internally synchronized transport for one run."""

    def __init__(self, nranks: int, mode: str = "single", trace: bool = False):
        if mode not in ("single", "parallel"):
            raise ValueError(f"unknown fabric mode {mode!r}")
        self.nranks = nranks
        self.mode = mode
        self._cond = threading.Condition()
        self._queues = {}
        self._counters = TrafficCounters.zeros(nranks)
        self.trace = [] if trace else None
        self._step = 0
        self._state = [_NEW] * nranks
        self._blocked = {}  # rank -> (pred, desc)
        self._current = 0
        self._failure = None
        self._ran = False

    # ------------------------------------------------------------ scheduling

    def _raise_failure(self):
        if self._failure is not None:
            raise self._failure

    def _live_ranks(self):
        return [r for r in range(self.nranks) if self._state[r] != _DONE]

    def _flag_deadlock(self):
        lines = [
            f"rank {r} blocked on {self._blocked[r][1]}"
            for r in sorted(self._blocked)
        ]
        self._failure = DeadlockError(
            "all ranks blocked with no deliverable message: " + "; ".join(lines)
        )
        self._cond.notify_all()

    def _pass_baton(self, rank: int):
        """Single mode: hand the baton to the next runnable rank after `rank`."""
        for step in range(1, self.nranks + 1):
            cand = (rank + step) % self.nranks
            st = self._state[cand]
            if st == _NEW or st == _RUNNING:
                self._current = cand
                self._cond.notify_all()
                return
            if st == _BLOCKED and self._blocked[cand][0]():
                self._current = cand
                self._cond.notify_all()
                return
        if self._live_ranks():
            self._flag_deadlock()

    def _scan_quiescence(self):
        """Parallel mode: flag deadlock if every live rank is stuck."""
        live = self._live_ranks()
        if not live:
            return
        if any(self._state[r] != _BLOCKED for r in live):
            return
        if any(self._blocked[r][0]() for r in live):
            return
        self._flag_deadlock()

    def _await_baton(self, rank: int):
        """Called under the lock before a rank starts executing."""
        self._state[rank] = _RUNNING
        if self.mode == "single":
            while self._failure is None and self._current != rank:
                self._cond.wait()
            self._raise_failure()

    def _wait_for(self, rank: int, pred, desc: str):
        """Block `rank` until pred() holds; called under the lock."""
        if self.mode == "single":
            while not pred():
                self._state[rank] = _BLOCKED
                self._blocked[rank] = (pred, desc)
                self._pass_baton(rank)
                while self._failure is None and not (self._current == rank and pred()):
                    self._cond.wait()
                del self._blocked[rank]
                self._state[rank] = _RUNNING
                self._raise_failure()
        else:
            while not pred():
                self._state[rank] = _BLOCKED
                self._blocked[rank] = (pred, desc)
                self._scan_quiescence()
                self._cond.wait()
                del self._blocked[rank]
                self._state[rank] = _RUNNING
                self._raise_failure()

    def _finish(self, rank: int):
        with self._cond:
            self._state[rank] = _DONE
            self._blocked.pop(rank, None)
            if self.mode == "single":
                if self._current == rank:
                    self._pass_baton(rank)
            else:
                self._scan_quiescence()
            self._cond.notify_all()

    # ------------------------------------------------------------- transport

    def send(self, src: int, dst: int, tag: int, payload, kind: str = "p2p"):
        """Buffered, non-blocking point-to-point send."""
        if not 0 <= dst < self.nranks:
            raise OutOfBounds(f"send dst {dst} outside 0..{self.nranks - 1}")
        stored, nbytes = _freeze(payload)
        with self._cond:
            self._raise_failure()
            self._queues.setdefault((src, dst, tag), deque()).append(stored)
            c = self._counters
            c.sent_bytes[src] += nbytes
            c.sent_messages[src] += 1
            if kind == "halo":
                c.halo_bytes[src] += nbytes
            if self.trace is not None:
                self.trace.append((self._step, src, dst, tag, nbytes))
                self._step += 1
            self._cond.notify_all()

    def recv(self, dst: int, src: int, tag: int):
        """Blocking receive of the next (src, dst, tag) message in FIFO order."""
        key = (src, dst, tag)
        with self._cond:
            self._raise_failure()
            q = self._queues.setdefault(key, deque())
            self._wait_for(dst, lambda: len(q) > 0, f"recv(src={src}, tag={tag})")
            stored = q.popleft()
            c = self._counters
            nbytes = len(stored) if isinstance(stored, bytes) else stored.nbytes
            c.recv_bytes[dst] += nbytes
            c.recv_messages[dst] += 1
        return _thaw(stored)

    def allreduce_sum(self, rank: int, vec, group=None):
        """Sum `vec` over the group in a fixed binomial tree; all members get
        the identical result (see binomial_tree_sum for the exact order)."""
        members = sorted(range(self.nranks) if group is None else group)
        if rank not in members:
            raise OutOfBounds(f"rank {rank} not in allreduce group {members}")
        local = np.array(vec, copy=True)
        with self._cond:
            self._counters.allreduce_calls[rank] += 1
            self._counters.allreduce_elements[rank] += local.size
        count = len(members)
        if count == 1:
            return local
        j = members.index(rank)
        dist = 1
        while dist < count:
            if j % (2 * dist) == 0:
                if j + dist < count:
                    other = self.recv(rank, members[j + dist], TAG_ALLREDUCE)
                    if other.shape != local.shape:
                        raise LengthMismatch(
                            f"allreduce shapes differ: {local.shape} vs {other.shape}"
                        )
                    local = local + other
            elif j % (2 * dist) == dist:
                self.send(rank, members[j - dist], TAG_ALLREDUCE, local, kind="ar")
            dist *= 2
        down = []
        dist = 1
        while dist < count:
            down.append(dist)
            dist *= 2
        for dist in reversed(down):
            if j % (2 * dist) == 0:
                if j + dist < count:
                    self.send(rank, members[j + dist], TAG_ALLREDUCE, local, kind="ar")
            elif j % (2 * dist) == dist:
                local = self.recv(rank, members[j - dist], TAG_ALLREDUCE)
        return local

    def counters(self) -> TrafficCounters:
        with self._cond:
            return self._counters.snapshot()

    def write_trace(self, path):
        """Dump `step,src,dst,tag,bytes` records (debugging aid only)."""
        if self.trace is None:
            raise ValueError("fabric was created without trace recording")
        with open(path, "w") as f:
            f.write("step,src,dst,tag,bytes\n")
            for rec in self.trace:
                f.write(",".join(str(v) for v in rec) + "\n")

    # ------------------------------------------------------------- execution

    def run(self, fn):
        """Run fn(ctx) on every rank; returns per-rank results in rank order."""
        if self._ran:
            raise RuntimeError("Fabric.run is single-use; build a new Fabric")
        self._ran = True
        results = [None] * self.nranks
        errors = [None] * self.nranks

        def worker(rank):
            ctx = RankCtx(self, rank)
            try:
                with self._cond:
                    self._await_baton(rank)
                results[rank] = fn(ctx)
            except BaseException as exc:  # collected and re-raised by run()
                errors[rank] = exc
            finally:
                self._finish(rank)

        threads = [
            threading.Thread(target=worker, args=(r,), name=f"rank{r}", daemon=True)
            for r in range(self.nranks)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        primary = next(
            (e for e in errors if e is not None and not isinstance(e, DeadlockError)),
            None,
        )
        if primary is not None:
            raise primary
        if self._failure is not None:
            raise self._failure
        for e in errors:
            if e is not None:
                raise e
        return results


def run_ranks(nranks: int, fn, mode: str = "single", trace: bool = False):
    """Convenience wrapper: build a Fabric, run fn on all ranks, return results."""
    fab = Fabric(nranks, mode=mode, trace=trace)
    return fab.run(fn)


def _face_id(dim: int, side: int) -> int:
    return dim * 2 + (0 if side < 0 else 1)


def halo_exchange(ctx: RankCtx, tensor: DistTensor) -> DistTensor:
    """Fill the halo margins with neighbor boundary data.

    Runs one round per partitioned dimension in ascending order; each
    round's slabs span the full already-exchanged extents so that edge and
    corner values reach diagonal neighbors in two or three hops. Outer-wall
    margins stay zero (global "same" padding). The local interior is
    untouched. Collective over the tensor's rank map.
    """
    meta = tensor.meta
    me = meta.fabric_rank(tensor.grid_rank)
    if me != ctx.rank:
        raise OutOfBounds(f"rank {ctx.rank} exchanging a tensor owned by {me}")
    frame = tensor.padded()
    for dim in range(3):
        if meta.radii[dim] == 0:
            continue
        sides = [
            (side, nbr)
            for side in (-1, +1)
            if (nbr := meta.neighbor(tensor.grid_rank, dim, side)) is not None
        ]
        for side, nbr in sides:
            boundary, _ = round_slices(meta, tensor.grid_rank, dim, side)
            ctx.send(meta.fabric_rank(nbr), TAG_HALO_BASE - _face_id(dim, side),
                     np.ascontiguousarray(frame[boundary]), kind="halo")
        for side, nbr in sides:
            _, margin = round_slices(meta, tensor.grid_rank, dim, side)
            got = ctx.recv(meta.fabric_rank(nbr),
                           TAG_HALO_BASE - _face_id(dim, -side))
            frame[margin] = got.reshape(frame[margin].shape)
    return tensor


def reverse_halo_exchange(ctx: RankCtx, meta, grid_rank: int, frame: np.ndarray):
    """Adjoint of halo_exchange for gradient frames.

    `frame` is a halo-wide gradient array (local backward-data scatter). Each
    margin slab holds gradient w.r.t. a neighbor's boundary voxels; rounds run
    in descending dimension order with the forward round's exact geometry, the
    received slabs accumulating into the interior boundary. Outer-wall margins
    are gradients of zero padding and are simply dropped.
    """
    me = meta.fabric_rank(grid_rank)
    if me != ctx.rank:
        raise OutOfBounds(f"rank {ctx.rank} exchanging a frame owned by {me}")
    for dim in (2, 1, 0):
        if meta.radii[dim] == 0:
            continue
        sides = [
            (side, nbr)
            for side in (-1, +1)
            if (nbr := meta.neighbor(grid_rank, dim, side)) is not None
        ]
        for side, nbr in sides:
            _, margin = round_slices(meta, grid_rank, dim, side)
            ctx.send(meta.fabric_rank(nbr), TAG_HALO_BASE - _face_id(dim, side),
                     np.ascontiguousarray(frame[margin]), kind="halo")
        for side, nbr in sides:
            boundary, _ = round_slices(meta, grid_rank, dim, side)
            got = ctx.recv(meta.fabric_rank(nbr),
                           TAG_HALO_BASE - _face_id(dim, -side))
            frame[boundary] += got.reshape(frame[boundary].shape)
    return frame
