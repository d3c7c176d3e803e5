"""Scheme-neutral transaction runtime.

Scheme operations are generators.  Each ``yield`` marks one abstract step and
names the stage it belongs to; the executor decides what a step costs (wall
time in threaded mode, one tick in the simulator).  The same scheme code
therefore runs unmodified under both backends.
"""

from __future__ import annotations

import itertools
import random
import time
from typing import Generator, Optional

from .errors import ConfigError, TimestampOverflow
from .metrics import ABORT, CC, INDEX, RECONVERGE, WorkerClock
from .storage import AtomicWords, Database, make_words
from .verify import ABORT_EV, COMMIT_EV, EventLog
from .workload import Batch, Transaction

Step = Generator[int, None, bool]

LATCH_FREE = "latch_free"
LATCHED = "latched"
SYNC_MODES = (LATCH_FREE, LATCHED)


class TimestampAllocator:
    """Global counter; hands out ``1, 2, 3, ...`` (0 means "unset")."""

    def __init__(self, limit: int = (1 << 63) - 1, start: int = 0):
        self.limit = limit
        self._next = itertools.count(start + 1)

    def allocate(self) -> int:
        ts = next(self._next)
        if ts > self.limit:
            raise TimestampOverflow(f"timestamp {ts} exceeds field maximum {self.limit}")
        return ts

    @property
    def counter(self) -> int:
        # peeking would consume a value; itertools.count's repr carries it
        return int(repr(self._next)[6:-1]) - 1


def allocate_timestamp(alloc: TimestampAllocator) -> int:
    return alloc.allocate()


class WorkerState:
    __slots__ = ("worker_id", "clock", "arena_base", "arena_size", "rng")

    def __init__(self, worker_id: int, seed: int = 0):
        self.worker_id = worker_id
        self.clock = WorkerClock(worker_id)
        self.arena_base = 0
        self.arena_size = 0
        # backoff jitter only; seeded so simulator runs stay reproducible
        self.rng = random.Random(seed * 1_000_003 + worker_id)


class TxContext:
    """Private per-transaction state for one run.

    ``workspace`` maps TupleId to staged bytes and is only ever touched by the
    owning worker.
    """

    __slots__ = ("txn", "worker", "attempt", "ts", "age", "restarts", "tids",
                 "held", "read_set", "write_set", "workspace", "staged")

    def __init__(self, txn: Transaction, worker: WorkerState):
        self.txn = txn
        self.worker = worker
        self.attempt = 0
        self.ts = 0
        self.age = 0
        self.restarts = 0
        self.tids: list[int] = []
        self.held: list = []
        self.read_set: list = []
        self.write_set: list = []
        self.workspace: dict[int, bytes] = {}
        self.staged: list = []

    @property
    def clock(self) -> WorkerClock:
        return self.worker.clock

    def reset(self) -> None:
        self.held = []
        self.read_set = []
        self.write_set = []
        self.workspace = {}
        self.staged = []


class Runtime:
    """Shared objects one run's scheme instances operate on."""

    def __init__(self, db: Database, batch: Batch, concurrent: bool,
                 sync_mode: str = LATCH_FREE, log: Optional[EventLog] = None,
                 n_workers: int = 1, seed: int = 0):
        if sync_mode not in SYNC_MODES:
            raise ConfigError(f"unknown sync mode {sync_mode!r}")
        self.db = db
        self.batch = batch
        self.concurrent = concurrent
        self.sync_mode = sync_mode
        self.log = log
        self.n_workers = n_workers
        self.allocator = TimestampAllocator()
        self.indexes = [db.indexes[n] for n in batch.table_names]
        self.workers = [WorkerState(i, seed) for i in range(n_workers)]
        self.stop = False
        # cap on the randomised exponential post-abort pause, in steps (0 = off)
        self.backoff = 0

    def words(self, n: int, initial: int = 0) -> AtomicWords:
        return make_words(n, self.concurrent, initial)


def payload_for(txn_id: int, attempt: int) -> bytes:
    return txn_id.to_bytes(8, "little") + attempt.to_bytes(4, "little")


class Scheme:
    """Base for every concurrency-control scheme.

    Subclasses implement the five interface operations as generators that
    yield stage ids and ``return`` a bool where an outcome is needed.
    ``abort`` releases everything the failed attempt holds.
    """

    name = "base"
    deterministic = False
    # largest timestamp the scheme's control word can hold
    ts_limit = (1 << 63) - 1
    uses_timestamps = False

    def __init__(self, rt: Runtime):
        self.rt = rt
        self.db = rt.db
        self.log = rt.log
        self.latched = rt.sync_mode == LATCHED
        self.latches = rt.words(rt.db.total_rows) if self.latched else None
        rt.allocator.limit = min(rt.allocator.limit, self.ts_limit)

    # -- scheduling hooks -------------------------------------------------

    def preprocess(self, batch: Batch) -> int:
        """Batch-level preparation; returns its cost in abstract steps."""
        return 0

    def phases(self, batch: Batch) -> list[list[int]]:
        """Groups of txn ids executed one after another with a full barrier."""
        return [list(range(len(batch)))]

    def setup_workers(self, assignment: list[list[int]]) -> None:
        pass

    # -- interface --------------------------------------------------------

    def tx_start(self, ctx: TxContext) -> Step:
        return True
        yield

    def read_row(self, ctx: TxContext, i: int, tid: int) -> Step:
        raise NotImplementedError

    def write_row(self, ctx: TxContext, i: int, tid: int) -> Step:
        raise NotImplementedError

    def tx_end(self, ctx: TxContext) -> Step:
        raise NotImplementedError

    def abort(self, ctx: TxContext) -> Step:
        return True
        yield

    def finalize(self) -> dict:
        """End-of-run statistics; held locks and pending versions must be 0."""
        return {"held_locks": 0, "pending_versions": 0}

    # -- control-word access ----------------------------------------------

    def _latch(self, i: int) -> None:
        latch = self.latches
        while not latch.cas(i, 0, 1):
            time.sleep(0)

    def update(self, words: AtomicWords, i: int, transform):
        """One read-transform-update step on ``words[i]``.

        Latch-free mode uses a single-word CAS loop.  Latched mode guards the
        word with a separate spin latch whose acquire, critical section and
        release sit in one loop body, so a lockstep warp can never strand the
        holder; it costs one extra step for the latch access.
        """
        if self.latched:
            self._latch(i)
            try:
                old = words.words[i]
                new = transform(old)
                if new is not None:
                    words.words[i] = new
            finally:
                self.latches.store(i, 0)
            yield CC
            yield CC
            return new is not None, old
        ok, old = words.rtu(i, transform)
        yield CC
        return ok, old

    def store(self, words: AtomicWords, i: int, value: int):
        if self.latched:
            self._latch(i)
            words.words[i] = value
            self.latches.store(i, 0)
        else:
            words.store(i, value)


def run_transaction(ctx: TxContext, scheme: Scheme, rt: Runtime):
    """Retry ``ctx.txn`` under ``scheme`` until it commits.

    Every attempt runs tx_start, an index lookup plus read/write per access,
    then tx_end.  A failed attempt releases its resources and restarts at
    once; its time is charged to the abort stage by the worker clock.

    With ``rt.backoff`` set, the retry first pauses for a random number of
    steps below ``min(backoff, 2**restarts)``.  The pause sits after the
    reconvergence point so that lanes of one warp leave it at different times.
    """
    txn = ctx.txn
    clock = ctx.worker.clock
    log = rt.log
    indexes = rt.indexes
    tables = txn.tables
    keys = txn.keys
    writes = txn.writes
    n = len(keys)
    while True:
        ctx.reset()
        ok = yield from scheme.tx_start(ctx)
        if ok:
            tids = ctx.tids = []
            for i in range(n):
                tid = indexes[tables[i]].lookup(keys[i])
                tids.append(tid)
                yield INDEX
                if writes[i]:
                    ok = yield from scheme.write_row(ctx, i, tid)
                else:
                    ok = yield from scheme.read_row(ctx, i, tid)
                if not ok:
                    break
            if ok:
                ok = yield from scheme.tx_end(ctx)
        if ok:
            if log is not None:
                log.record(txn.txn_id, ctx.attempt, COMMIT_EV)
            clock.close_attempt(True)
            yield RECONVERGE
            return ctx.restarts
        yield from scheme.abort(ctx)
        if log is not None:
            log.record(txn.txn_id, ctx.attempt, ABORT_EV)
        clock.close_attempt(False)
        ctx.restarts += 1
        ctx.attempt += 1
        yield RECONVERGE
        if rt.backoff:
            window = min(rt.backoff, 1 << min(ctx.restarts, 30))
            for _ in range(ctx.worker.rng.randrange(window)):
                yield ABORT
