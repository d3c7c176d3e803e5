"""Pessimistic schemes: two-phase locking (no-wait, wait-die), TO and MVCC."""

from __future__ import annotations

from typing import Optional

from .core import Runtime, Scheme, TxContext, payload_for
from .errors import VersionExhausted
from .metrics import CC, TS_ALLOC, USEFUL, WAIT
from .storage import TO_WORD, TPL_WORD
from .verify import INITIAL, READ_EV, WRITE_EV

# TplWord bit positions (see storage.TPL_WORD)
TPL_SHARED = 1 << TPL_WORD.shifts["shared"]
TPL_COUNT_SHIFT = TPL_WORD.shifts["holder_count"]
TPL_ONE = 1 << TPL_COUNT_SHIFT
TPL_COUNT_MASK = TPL_WORD.max("holder_count")
TPL_HOLDER_MASK = TPL_WORD.max("holder")

# ToWord bit positions; MVCC metadata uses the same word
TO_PENDING = 1 << TO_WORD.shifts["commit"]
TO_RTS_SHIFT = TO_WORD.shifts["rts"]
TO_TS_MASK = TO_WORD.max("wts")
TS31_LIMIT = TO_TS_MASK

INF = float("inf")


def tpl_decode(w: int) -> tuple[int, int, int]:
    """(shared, holder_count, holder)"""
    return (1 if w & TPL_SHARED else 0, (w >> TPL_COUNT_SHIFT) & TPL_COUNT_MASK,
            w & TPL_HOLDER_MASK)


def to_decode(w: int) -> tuple[int, int, int]:
    """(pending, rts, wts)"""
    return (1 if w & TO_PENDING else 0, (w >> TO_RTS_SHIFT) & TO_TS_MASK, w & TO_TS_MASK)


def to_encode(pending: int, rts: int, wts: int) -> int:
    return (TO_PENDING if pending else 0) | (rts << TO_RTS_SHIFT) | wts


# --------------------------------------------------------------------------
# two-phase locking

NO_WAIT = "no_wait"
WAIT_DIE = "wait_die"


class TwoPhaseLocking(Scheme):
    """Strict 2PL over one TplWord per tuple.

    An exclusive holder is recorded by worker ordinal.  Shared holders are
    anonymous; the holder field then keeps the smallest age among everyone
    that joined, which can only overstate the oldest holder's seniority and
    so errs towards aborting under wait-die.
    """

    policy = NO_WAIT

    def __init__(self, rt: Runtime):
        super().__init__(rt)
        self.locks = rt.words(rt.db.total_rows)
        self.ages = [0] * max(1, rt.n_workers)

    def tx_start(self, ctx: TxContext):
        if self.policy == WAIT_DIE:
            if ctx.attempt == 0:
                ctx.age = self.rt.allocator.allocate()
                yield TS_ALLOC
            self.ages[ctx.worker.worker_id] = ctx.age
        return True

    def lock(self, ctx: TxContext, tid: int, exclusive: bool):
        """Acquire ``tid``; returns False when the attempt must abort."""
        me = ctx.worker.worker_id
        age = ctx.age
        if exclusive:
            grant = TPL_ONE | me

            def xform(old):
                return grant if old == 0 else None
        else:
            fresh = TPL_SHARED | TPL_ONE | age

            def xform(old):
                if old == 0:
                    return fresh
                if not old & TPL_SHARED:
                    return None
                holder = old & TPL_HOLDER_MASK
                if age < holder:
                    old = old - holder + age
                return old + TPL_ONE

        while True:
            ok, old = yield from self.update(self.locks, tid, xform)
            if ok:
                ctx.held.append((tid, exclusive))
                return True
            if self.policy == NO_WAIT:
                return False
            if old & TPL_SHARED:
                oldest = old & TPL_HOLDER_MASK
            else:
                oldest = self.ages[old & TPL_HOLDER_MASK]
            if age >= oldest:
                return False
            yield WAIT

    def read_row(self, ctx: TxContext, i: int, tid: int):
        ok = yield from self.lock(ctx, tid, False)
        if not ok:
            return False
        self.db.read(tid)
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        yield USEFUL
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        ok = yield from self.lock(ctx, tid, True)
        if not ok:
            return False
        ctx.workspace[tid] = payload_for(ctx.txn.txn_id, ctx.attempt)
        yield USEFUL
        return True

    def release(self, ctx: TxContext):
        words = self.locks
        for tid, exclusive in reversed(ctx.held):
            if exclusive:
                self.store(words, tid, 0)
            else:
                yield from self.update(words, tid, _shared_release)
        yield CC
        ctx.held = []

    def tx_end(self, ctx: TxContext):
        log = self.log
        for tid, payload in ctx.workspace.items():
            self.db.write(tid, payload)
            if log is not None:
                log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
        if ctx.workspace:
            yield USEFUL
        yield from self.release(ctx)
        return True

    def abort(self, ctx: TxContext):
        ctx.workspace = {}
        yield from self.release(ctx)
        return True

    def finalize(self) -> dict:
        held = sum(1 for w in self.locks.words if w)
        return {"held_locks": held, "pending_versions": 0}


def _shared_release(old: int) -> int:
    if (old >> TPL_COUNT_SHIFT) & TPL_COUNT_MASK == 1:
        return 0
    return old - TPL_ONE


class TplNoWait(TwoPhaseLocking):
    name = "tpl_nw"
    policy = NO_WAIT


class TplWaitDie(TwoPhaseLocking):
    name = "tpl_wd"
    policy = WAIT_DIE
    ts_limit = TS31_LIMIT
    uses_timestamps = True


def tpl_lock(scheme: TwoPhaseLocking, ctx: TxContext, tid: int, exclusive: bool):
    return scheme.lock(ctx, tid, exclusive)


def tpl_commit(scheme: TwoPhaseLocking, ctx: TxContext):
    return scheme.tx_end(ctx)


# --------------------------------------------------------------------------
# timestamp ordering


class TimestampOrdering(Scheme):
    """Basic TO with a pending bit standing in for the write lock.

    A write claims the tuple by setting ``wts`` to its timestamp together
    with the pending bit and installs at commit.  Readers and writers with a
    larger timestamp poll until the bit clears; smaller ones abort.  Every
    wait points from a younger to an older timestamp, so there is no cycle.
    """

    name = "to"
    ts_limit = TS31_LIMIT
    uses_timestamps = True

    def __init__(self, rt: Runtime):
        super().__init__(rt)
        self.meta = rt.words(rt.db.total_rows)

    def tx_start(self, ctx: TxContext):
        ctx.ts = self.rt.allocator.allocate()
        yield TS_ALLOC
        return True

    def _claim_read(self, ctx: TxContext, tid: int):
        """Raise rts to ``ts``; returns the word seen by the update or None to abort."""
        ts = ctx.ts
        words = self.meta
        refused_pending = False

        def xform(old):
            nonlocal refused_pending
            wts = old & TO_TS_MASK
            if ts < wts:
                refused_pending = False
                return None
            if old & TO_PENDING:
                refused_pending = True
                return None
            rts = (old >> TO_RTS_SHIFT) & TO_TS_MASK
            if ts > rts:
                return (old & ~(TO_TS_MASK << TO_RTS_SHIFT)) | (ts << TO_RTS_SHIFT)
            return old

        while True:
            ok, old = yield from self.update(words, tid, xform)
            if ok:
                return old
            if not refused_pending:
                return None
            yield WAIT

    def read_row(self, ctx: TxContext, i: int, tid: int):
        words = self.meta
        log = self.log
        while True:
            claimed = yield from self._claim_read(ctx, tid)
            if claimed is None:
                return False
            self.db.read(tid)
            seq = log.reserve() if log is not None else 0
            now = words.words[tid]
            yield USEFUL
            # a writer that slipped in between claim and copy shows up here
            if (now ^ claimed) & (TO_PENDING | TO_TS_MASK) == 0:
                break
        if log is not None:
            log.append(seq, ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        return True

    def _claim_write(self, ctx: TxContext, tid: int):
        ts = ctx.ts
        wait = False

        def xform(old):
            nonlocal wait
            rts = (old >> TO_RTS_SHIFT) & TO_TS_MASK
            wts = old & TO_TS_MASK
            if ts < rts or ts < wts:
                wait = False
                return None
            if old & TO_PENDING:
                wait = True
                return None
            return TO_PENDING | (rts << TO_RTS_SHIFT) | ts

        while True:
            ok, old = yield from self.update(self.meta, tid, xform)
            if ok:
                return old & TO_TS_MASK
            if not wait:
                return None
            yield WAIT

    def write_row(self, ctx: TxContext, i: int, tid: int):
        prev_wts = yield from self._claim_write(ctx, tid)
        if prev_wts is None:
            return False
        ctx.write_set.append((tid, prev_wts))
        ctx.workspace[tid] = payload_for(ctx.txn.txn_id, ctx.attempt)
        yield USEFUL
        return True

    def tx_end(self, ctx: TxContext):
        log = self.log
        words = self.meta
        for tid, _ in ctx.write_set:
            self.db.write(tid, ctx.workspace[tid])
            if log is not None:
                log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
            yield USEFUL
            yield from self.update(words, tid, _clear_pending)
        ctx.write_set = []
        return True

    def abort(self, ctx: TxContext):
        words = self.meta
        for tid, prev_wts in ctx.write_set:
            def restore(old, prev_wts=prev_wts):
                return (old & ~(TO_PENDING | TO_TS_MASK)) | prev_wts
            yield from self.update(words, tid, restore)
        ctx.write_set = []
        ctx.workspace = {}
        return True

    def finalize(self) -> dict:
        pending = sum(1 for w in self.meta.words if w & TO_PENDING)
        return {"held_locks": pending, "pending_versions": 0}


def _clear_pending(old: int) -> int:
    return old & ~TO_PENDING


def to_access(scheme: TimestampOrdering, ctx: TxContext, tid: int, write: bool):
    if write:
        return scheme.write_row(ctx, 0, tid)
    return scheme.read_row(ctx, 0, tid)


# --------------------------------------------------------------------------
# multi-version concurrency control


class VersionStore:
    """Version nodes in flat arrays; one chain per tuple.

    Node ``k`` has ``begin[k] <= ts < end[k]`` as its validity interval and
    ``prev[k]`` points at the next-older node (-1 at the chain tail).  Nodes
    ``0..n_tuples-1`` are the initial versions, whose payload is the table
    row itself (``payload`` None).  Node fields other than ``end`` are
    immutable once the node is linked.
    """

    def __init__(self, n_tuples: int, n_spare: int):
        size = n_tuples + n_spare
        self.n_tuples = n_tuples
        self.begin = [0] * size
        self.end = [INF] * n_tuples + [0] * n_spare
        self.prev = [-1] * size
        self.writer = [INITIAL] * size
        self.payload: list[Optional[bytes]] = [None] * size

    def fill(self, slot: int, begin: int, prev: int, writer: int, payload: bytes) -> None:
        self.begin[slot] = begin
        self.end[slot] = INF
        self.prev[slot] = prev
        self.writer[slot] = writer
        self.payload[slot] = payload

    def find(self, head: int, ts: int) -> int:
        """Newest node on the chain starting at ``head`` with ``begin <= ts``."""
        begin = self.begin
        prev = self.prev
        v = head
        while v >= 0 and begin[v] > ts:
            v = prev[v]
        if v < 0:
            raise VersionExhausted(f"no version visible at ts={ts}")
        return v

    def chain(self, head: int) -> list[tuple[int, float]]:
        """(begin, end) pairs from oldest to newest."""
        out = []
        v = head
        while v >= 0:
            out.append((self.begin[v], self.end[v]))
            v = self.prev[v]
        return out[::-1]

    def prune_before(self, head: int, ts: int) -> None:
        """Drop every node that ended at or before ``ts``."""
        v = head
        while v >= 0:
            p = self.prev[v]
            if p >= 0 and self.end[p] <= ts:
                self.prev[v] = -1
                return
            v = p


class MultiVersion(Scheme):
    """MVCC with TO-style validation.

    ``meta`` is the ToWord (pending bit, rts, begin ts of the newest version)
    and ``vref`` a separate word array pointing at each chain's newest node.
    A write reserves a node in its worker's arena; commit fills it, closes the
    predecessor's interval and swings ``vref``.  Reads never abort: they pick
    the version whose interval holds their timestamp and only poll while an
    older writer's version is pending.
    """

    name = "mvcc"
    ts_limit = TS31_LIMIT
    uses_timestamps = True

    def __init__(self, rt: Runtime):
        super().__init__(rt)
        n = rt.db.total_rows
        self.meta = rt.words(n)
        self.vref = rt.words(n)
        self.vref.words = list(range(n))
        self.store_ = VersionStore(n, rt.batch.write_count)
        self.arena_next = [0] * max(1, rt.n_workers)
        self.arena_end = [0] * max(1, rt.n_workers)
        # default partition: contiguous per worker by assigned write counts
        self._arenas_ready = False

    def setup_workers(self, assignment: list[list[int]]) -> None:
        base = self.store_.n_tuples
        txns = self.rt.batch.txns
        for w, ids in enumerate(assignment):
            size = sum(sum(txns[t].writes) for t in ids)
            self.arena_next[w] = base
            self.arena_end[w] = base + size
            self.rt.workers[w].arena_base = base
            self.rt.workers[w].arena_size = size
            base += size
        self._arenas_ready = True

    def tx_start(self, ctx: TxContext):
        ctx.ts = self.rt.allocator.allocate()
        yield TS_ALLOC
        ctx.staged = []
        return True

    def read_row(self, ctx: TxContext, i: int, tid: int):
        ts = ctx.ts
        must_wait = False

        def xform(old):
            nonlocal must_wait
            wts = old & TO_TS_MASK
            if old & TO_PENDING and wts <= ts:
                must_wait = True
                return None
            rts = (old >> TO_RTS_SHIFT) & TO_TS_MASK
            if ts > rts:
                return (old & ~(TO_TS_MASK << TO_RTS_SHIFT)) | (ts << TO_RTS_SHIFT)
            return old

        while True:
            ok, _ = yield from self.update(self.meta, tid, xform)
            if ok:
                break
            yield WAIT
        vs = self.store_
        v = vs.find(self.vref.words[tid], ts)
        if vs.payload[v] is None:
            self.db.read(tid)
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, READ_EV, tid, vs.writer[v])
        yield USEFUL
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        ts = ctx.ts
        wait = False

        def xform(old):
            nonlocal wait
            rts = (old >> TO_RTS_SHIFT) & TO_TS_MASK
            wts = old & TO_TS_MASK
            if ts < rts or ts < wts:
                wait = False
                return None
            if old & TO_PENDING:
                wait = True
                return None
            return TO_PENDING | (rts << TO_RTS_SHIFT) | ts

        while True:
            ok, old = yield from self.update(self.meta, tid, xform)
            if ok:
                break
            if not wait:
                return False
            yield WAIT
        w = ctx.worker.worker_id
        slot = self.arena_next[w]
        if slot >= self.arena_end[w]:
            raise VersionExhausted(f"worker {w} version arena exhausted")
        self.arena_next[w] = slot + 1
        ctx.staged.append((tid, slot, old & TO_TS_MASK))
        ctx.workspace[tid] = payload_for(ctx.txn.txn_id, ctx.attempt)
        yield USEFUL
        return True

    def tx_end(self, ctx: TxContext):
        vs = self.store_
        vref = self.vref
        log = self.log
        ts = ctx.ts
        txn_id = ctx.txn.txn_id
        for tid, slot, _ in ctx.staged:
            head = vref.words[tid]
            vs.fill(slot, ts, head, txn_id, ctx.workspace[tid])
            vs.end[head] = ts
            self.store(vref, tid, slot)
            if log is not None:
                log.record(txn_id, ctx.attempt, WRITE_EV, tid)
            yield USEFUL
            yield from self.update(self.meta, tid, _clear_pending)
        ctx.staged = []
        return True

    def abort(self, ctx: TxContext):
        if ctx.staged:
            # staged nodes were never linked; hand the slots back
            self.arena_next[ctx.worker.worker_id] -= len(ctx.staged)
        for tid, _, prev_wts in ctx.staged:
            def restore(old, prev_wts=prev_wts):
                return (old & ~(TO_PENDING | TO_TS_MASK)) | prev_wts
            yield from self.update(self.meta, tid, restore)
        ctx.staged = []
        ctx.workspace = {}
        return True

    def chain(self, tid: int) -> list[tuple[int, float]]:
        return self.store_.chain(self.vref.words[tid])

    def finalize(self) -> dict:
        pending = sum(1 for w in self.meta.words if w & TO_PENDING)
        return {"held_locks": 0, "pending_versions": pending}


def mvcc_read(store: VersionStore, head: int, ts: int) -> int:
    """Node visible at ``ts`` on the chain headed by ``head``."""
    return store.find(head, ts)
