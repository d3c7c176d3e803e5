"""Optimistic schemes: Silo and TicToc.

Both execute against a private workspace, take consistent snapshots of the
rows they read and validate at commit.  Write locks are taken in access-list
order and a busy lock aborts the attempt at once instead of waiting.
"""

from __future__ import annotations

from .core import Runtime, Scheme, TxContext, payload_for
from .metrics import CC, USEFUL, WAIT
from .storage import SILO_WORD, TICTOC_WORD
from .verify import READ_EV, WRITE_EV

SILO_LOCK = 1 << SILO_WORD.shifts["lock"]
SILO_TS_MASK = SILO_WORD.max("ts")

TT_LOCK = 1 << TICTOC_WORD.shifts["lock"]
TT_DELTA_SHIFT = TICTOC_WORD.shifts["delta"]
TT_DELTA_MAX = TICTOC_WORD.max("delta")
TT_WTS_MASK = TICTOC_WORD.max("wts")


def tictoc_decode(w: int) -> tuple[int, int, int]:
    """(locked, wts, rts)"""
    wts = w & TT_WTS_MASK
    return (1 if w & TT_LOCK else 0, wts, wts + ((w >> TT_DELTA_SHIFT) & TT_DELTA_MAX))


def tictoc_encode(wts: int, rts: int, locked: bool = False) -> int:
    """Pack ``(wts, rts)``; a delta too wide for its field moves wts forward."""
    delta = rts - wts
    if delta > TT_DELTA_MAX:
        wts = rts - TT_DELTA_MAX
        delta = TT_DELTA_MAX
    return (TT_LOCK if locked else 0) | (delta << TT_DELTA_SHIFT) | wts


def _lock(bit: int):
    def xform(old):
        return None if old & bit else old | bit
    return xform


_silo_lock = _lock(SILO_LOCK)
_tt_lock = _lock(TT_LOCK)


class OptimisticScheme(Scheme):
    lock_bit = 0
    _lock_xform = None

    def __init__(self, rt: Runtime):
        super().__init__(rt)
        self.words = rt.words(rt.db.total_rows)

    def visible(self, ctx: TxContext, tid: int) -> bytes:
        """Row contents as this transaction sees them (its own writes first)."""
        staged = ctx.workspace.get(tid)
        return staged if staged is not None else self.db.read(tid)

    def read_row(self, ctx: TxContext, i: int, tid: int):
        """Snapshot read: load word, copy row, load word again."""
        if tid in ctx.workspace:
            # read-own-write: served from the workspace, nothing to validate
            yield USEFUL
            return True
        words = self.words.words
        lock = self.lock_bit
        log = self.log
        while True:
            before = words[tid]
            if before & lock:
                yield WAIT
                continue
            self.db.read(tid)
            seq = log.reserve() if log is not None else 0
            after = words[tid]
            yield USEFUL
            if after == before:
                break
        if log is not None:
            log.append(seq, ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        ctx.read_set.append((tid, before))
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        ctx.workspace[tid] = payload_for(ctx.txn.txn_id, ctx.attempt)
        ctx.write_set.append(tid)
        yield USEFUL
        return True

    def lock_writes(self, ctx: TxContext):
        """Lock the write set in list order; False as soon as one is busy."""
        for tid in ctx.write_set:
            ok, old = yield from self.update(self.words, tid, self._lock_xform)
            if not ok:
                return False
            ctx.held.append((tid, old))
        return True

    def install(self, ctx: TxContext, word_for):
        log = self.log
        for tid, old in ctx.held:
            self.db.write(tid, ctx.workspace[tid])
            if log is not None:
                log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
            self.store(self.words, tid, word_for(old))
        if ctx.held:
            yield USEFUL
            yield CC
        ctx.held = []

    def abort(self, ctx: TxContext):
        bit = self.lock_bit
        for tid, old in ctx.held:
            self.store(self.words, tid, old & ~bit)
        if ctx.held:
            yield CC
        ctx.held = []
        ctx.workspace = {}
        return True

    def finalize(self) -> dict:
        bit = self.lock_bit
        return {"held_locks": sum(1 for w in self.words.words if w & bit),
                "pending_versions": 0}


class Silo(OptimisticScheme):
    name = "silo"
    lock_bit = SILO_LOCK
    _lock_xform = staticmethod(_silo_lock)

    def tx_end(self, ctx: TxContext):
        ok = yield from self.lock_writes(ctx)
        if not ok:
            return False
        ok = yield from self.validate(ctx)
        if not ok:
            return False
        top = 0
        for _, w in ctx.read_set:
            top = max(top, w & SILO_TS_MASK)
        for _, w in ctx.held:
            top = max(top, w & SILO_TS_MASK)
        commit_ts = top + 1
        yield from self.install(ctx, lambda old: commit_ts)
        return True

    def validate(self, ctx: TxContext):
        words = self.words.words
        mine = {tid for tid, _ in ctx.held}
        for tid, seen in ctx.read_set:
            now = words[tid]
            if (now ^ seen) & SILO_TS_MASK or (now & SILO_LOCK and tid not in mine):
                yield CC
                return False
        yield CC
        return True


def silo_validate_commit(scheme: Silo, ctx: TxContext):
    return scheme.tx_end(ctx)


class TicToc(OptimisticScheme):
    """TicToc: data-driven commit timestamps from per-tuple (wts, rts)."""

    name = "tictoc"
    lock_bit = TT_LOCK
    _lock_xform = staticmethod(_tt_lock)

    def commit_ts(self, ctx: TxContext) -> int:
        ts = 0
        for _, w in ctx.read_set:
            ts = max(ts, w & TT_WTS_MASK)
        for _, w in ctx.held:
            _, _, rts = tictoc_decode(w)
            ts = max(ts, rts + 1)
        return ts

    def tx_end(self, ctx: TxContext):
        ok = yield from self.lock_writes(ctx)
        if not ok:
            return False
        cts = self.commit_ts(ctx)
        mine = {tid for tid, _ in ctx.held}
        for tid, seen in ctx.read_set:
            _, wts, rts = tictoc_decode(seen)
            if rts >= cts:
                continue
            ok = yield from self.extend(tid, wts, cts, tid in mine)
            if not ok:
                return False
        yield CC
        yield from self.install(ctx, lambda old: cts)
        return True

    def extend(self, tid: int, wts: int, cts: int, mine: bool):
        """Raise the tuple's rts to ``cts`` provided its wts is still ``wts``."""

        def xform(old):
            if old & TT_WTS_MASK != wts:
                return None
            _, cur_wts, rts = tictoc_decode(old)
            if rts >= cts:
                # someone else already extended far enough
                return old
            if old & TT_LOCK and not mine:
                return None
            return tictoc_encode(cur_wts, cts, bool(old & TT_LOCK))

        ok, _ = yield from self.update(self.words, tid, xform)
        return ok


def tictoc_validate_commit(scheme: TicToc, ctx: TxContext):
    return scheme.tx_end(ctx)
