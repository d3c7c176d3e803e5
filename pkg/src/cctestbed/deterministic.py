"""Deterministic schemes that order conflicts before execution: GPUTx and GaccO.

Both start from an access table: every (transaction, tuple) pair of the batch
sorted by tuple then transaction, so each tuple's accessors form a contiguous
group in transaction-id order.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .core import Runtime, Scheme, TxContext, payload_for
from .metrics import CC, USEFUL, WAIT
from .storage import Database
from .verify import READ_EV, WRITE_EV
from .workload import Batch


@dataclass
class AccessTable:
    """Accesses grouped per tuple.

    ``tids``/``txns``/``writes`` are the sorted entries; group ``g`` spans
    ``bounds[g]:bounds[g+1]`` and belongs to tuple ``items[g]``.  For the
    access at flat position ``a`` (transaction order, see ``offsets``),
    ``group[a]`` is its group and ``slot[a]`` its position inside it.
    """

    items: np.ndarray
    bounds: np.ndarray
    tids: np.ndarray
    txns: np.ndarray
    writes: np.ndarray
    offsets: np.ndarray
    group: np.ndarray
    slot: np.ndarray
    # per-access write flags in transaction order
    flat_writes: np.ndarray

    def __len__(self) -> int:
        return len(self.tids)

    def groups(self) -> dict[int, list[tuple[int, bool]]]:
        out = {}
        for g, item in enumerate(self.items.tolist()):
            lo, hi = int(self.bounds[g]), int(self.bounds[g + 1])
            out[item] = list(zip(self.txns[lo:hi].tolist(), map(bool, self.writes[lo:hi].tolist())))
        return out


def build_access_table(batch: Batch, db: Database | None = None) -> AccessTable:
    offsets, tables, keys, writes = batch.columns()
    n = len(keys)
    if db is None:
        bases_by_name = {}
        base = 0
        for s in batch.schemas:
            bases_by_name[s.name] = base
            base += s.row_count
    else:
        bases_by_name = {t.name: t.base_id for t in db.tables}
    bases = np.array([bases_by_name[nm] for nm in batch.table_names] or [0], dtype=np.int64)
    tids = bases[tables.astype(np.int64)] + keys.astype(np.int64) if n else np.zeros(0, np.int64)
    txn_of = np.repeat(np.arange(len(batch), dtype=np.int64), np.diff(offsets))
    order = np.lexsort((txn_of, tids))
    s_tids = tids[order]
    new_group = np.ones(n, dtype=bool)
    if n:
        new_group[1:] = s_tids[1:] != s_tids[:-1]
    starts = np.flatnonzero(new_group)
    bounds = np.append(starts, n).astype(np.int64)
    gid_sorted = np.cumsum(new_group) - 1
    pos_sorted = np.arange(n, dtype=np.int64) - starts[gid_sorted] if n else np.zeros(0, np.int64)
    group = np.empty(n, dtype=np.int64)
    slot = np.empty(n, dtype=np.int64)
    group[order] = gid_sorted
    slot[order] = pos_sorted
    return AccessTable(
        items=s_tids[starts],
        bounds=bounds,
        tids=s_tids,
        txns=txn_of[order],
        writes=writes[order].astype(bool),
        offsets=offsets,
        group=group,
        slot=slot,
        flat_writes=writes.astype(bool),
    )


# --------------------------------------------------------------------------
# GPUTx


def gputx_compute_ranks(at: AccessTable, strict: bool = False) -> np.ndarray:
    """Rank of each transaction in the conflict order.

    Transactions are visited in id order.  Per tuple the walk keeps the rank
    of the last writer and the highest rank among readers since then; a read
    must rank above the last writer, a write above both.  A transaction's
    rank is the largest requirement over its accesses, so two transactions
    that share a rank never conflict.  ``strict`` treats reads as writes.
    """
    n_txn = len(at.offsets) - 1
    ranks = np.zeros(n_txn, dtype=np.int64)
    n_items = len(at.items)
    last_w = [-1] * n_items
    max_r = [-1] * n_items
    group = at.group.tolist()
    wflags = at.flat_writes.tolist()
    offs = at.offsets.tolist()
    out = [0] * n_txn
    for t in range(n_txn):
        lo, hi = offs[t], offs[t + 1]
        r = 0
        for a in range(lo, hi):
            g = group[a]
            if strict or wflags[a]:
                need = max(last_w[g], max_r[g]) + 1
            else:
                need = last_w[g] + 1
            if need > r:
                r = need
        for a in range(lo, hi):
            g = group[a]
            if strict or wflags[a]:
                last_w[g] = r
                max_r[g] = -1
            elif r > max_r[g]:
                max_r[g] = r
        out[t] = r
    ranks[:] = out
    return ranks


def conflicting_pairs(at: AccessTable, strict: bool = False) -> np.ndarray:
    """Every ordered pair (earlier, later) of transactions that conflict on some tuple."""
    lens = np.diff(at.bounds)
    n_txn = len(at.offsets) - 1
    if len(lens) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    codes = []
    # entries left after each sorted position within its group
    left = np.repeat(at.bounds[1:], lens) - np.arange(len(at)) - 1
    cand = np.flatnonzero(left > 0)
    d = 1
    while len(cand):
        j = cand + d
        if strict:
            hit = np.ones(len(cand), dtype=bool)
        else:
            hit = at.writes[cand] | at.writes[j]
        hit &= at.txns[cand] != at.txns[j]
        codes.append(at.txns[cand[hit]] * n_txn + at.txns[j[hit]])
        d += 1
        cand = cand[left[cand] >= d]
    if not codes:
        return np.zeros((0, 2), dtype=np.int64)
    flat = np.unique(np.concatenate(codes))
    return np.stack([flat // n_txn, flat % n_txn], axis=1)


def gputx_rank_oracle(at: AccessTable, strict: bool = False, pairs: np.ndarray | None = None) -> np.ndarray:
    """Longest-path ranks over the full conflict DAG (edges point to higher ids).

    ``pairs`` may carry a precomputed :func:`conflicting_pairs` result.
    """
    n_txn = len(at.offsets) - 1
    if pairs is None:
        pairs = conflicting_pairs(at, strict)
    # pairs come sorted by earlier id; regroup them by later id
    order = np.argsort(pairs[:, 1], kind="stable")
    src = pairs[order, 0]
    cuts = np.searchsorted(pairs[order, 1], np.arange(n_txn + 1))
    rank = np.zeros(n_txn, dtype=np.int64)
    for t in range(n_txn):
        lo, hi = cuts[t], cuts[t + 1]
        if hi > lo:
            rank[t] = 1 + rank[src[lo:hi]].max()
    return rank


def k_sets(ranks: np.ndarray) -> list[list[int]]:
    if len(ranks) == 0:
        return []
    order = np.argsort(ranks, kind="stable")
    cuts = np.flatnonzero(np.diff(ranks[order])) + 1
    return [g.tolist() for g in np.split(order, cuts)]


class GPUTx(Scheme):
    """Rank-ordered execution: each K-set runs with no concurrency control."""

    name = "gputx"
    deterministic = True
    strict = False

    def __init__(self, rt: Runtime, strict: bool = False):
        super().__init__(rt)
        self.strict = strict
        self.ranks: np.ndarray | None = None

    def preprocess(self, batch: Batch) -> int:
        self.table = build_access_table(batch, self.db)
        self.ranks = gputx_compute_ranks(self.table, self.strict)
        return len(self.table)

    def phases(self, batch: Batch) -> list[list[int]]:
        return k_sets(self.ranks)

    def read_row(self, ctx: TxContext, i: int, tid: int):
        self.db.read(tid)
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        yield USEFUL
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        self.db.write(tid, payload_for(ctx.txn.txn_id, ctx.attempt))
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
        yield USEFUL
        return True

    def tx_end(self, ctx: TxContext):
        return True
        yield


def gputx_execute(batch: Batch, launch=None, **kwargs):
    from .executor import execute_batch
    return execute_batch(batch, "gputx", launch, **kwargs)


# --------------------------------------------------------------------------
# GaccO


@dataclass
class GaccoLockTable:
    """Per-tuple turn queues; ``cursor`` is indexed by TupleId."""

    table: AccessTable
    cursor: object  # AtomicWords

    def queue(self, tid: int) -> list[int]:
        g = int(np.searchsorted(self.table.items, tid))
        if g >= len(self.table.items) or self.table.items[g] != tid:
            return []
        lo, hi = self.table.bounds[g], self.table.bounds[g + 1]
        return self.table.txns[lo:hi].tolist()

    def unfinished(self) -> int:
        items = self.table.items.tolist()
        lens = np.diff(self.table.bounds).tolist()
        words = self.cursor.words
        return sum(1 for tid, n in zip(items, lens) if words[tid] != n)


def gacco_build_lock_table(at: AccessTable, rt: Runtime) -> GaccoLockTable:
    return GaccoLockTable(at, rt.words(rt.db.total_rows))


class GaccO(Scheme):
    """Every access waits for its preassigned turn on the tuple, reads included."""

    name = "gacco"
    deterministic = True

    def preprocess(self, batch: Batch) -> int:
        at = build_access_table(batch, self.db)
        self.locks = gacco_build_lock_table(at, self.rt)
        self.slot = at.slot.tolist()
        self.offsets = at.offsets.tolist()
        return len(at)

    def _turn(self, ctx: TxContext, i: int, tid: int):
        pos = self.slot[self.offsets[ctx.txn.txn_id] + i]
        words = self.locks.cursor.words
        while words[tid] != pos:
            yield WAIT
        yield CC
        return pos

    def read_row(self, ctx: TxContext, i: int, tid: int):
        pos = yield from self._turn(ctx, i, tid)
        self.db.read(tid)
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        self.store(self.locks.cursor, tid, pos + 1)
        yield USEFUL
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        pos = yield from self._turn(ctx, i, tid)
        self.db.write(tid, payload_for(ctx.txn.txn_id, ctx.attempt))
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
        self.store(self.locks.cursor, tid, pos + 1)
        yield USEFUL
        return True

    def tx_end(self, ctx: TxContext):
        return True
        yield

    def finalize(self) -> dict:
        return {"held_locks": self.locks.unfinished(), "pending_versions": 0}


def gacco_execute(batch: Batch, launch=None, **kwargs):
    from .executor import execute_batch
    return execute_batch(batch, "gacco", launch, **kwargs)
