from __future__ import annotations

import pytest

from cctestbed.core import Runtime, TxContext, WorkerState
from cctestbed.schemes import make_scheme
from cctestbed.storage import TableSchema
from cctestbed.verify import EventLog
from cctestbed.workload import WorkloadConfig, make_batch


def drive(gen):
    """Run a scheme generator to completion; returns (result, yielded labels)."""
    labels = []
    while True:
        try:
            labels.append(next(gen))
        except StopIteration as done:
            return done.value, labels


def step_until(gen, n):
    """Advance ``gen`` by ``n`` yields (for interleaving tests)."""
    out = []
    for _ in range(n):
        out.append(next(gen))
    return out


def interleave(gens: dict, schedule, burst: int = 64, limit: int = 10_000) -> None:
    """Step generators in ``schedule`` order, then drain them in bursts.

    Draining one yield at a time would be lockstep and can livelock two
    symmetric optimistic transactions; a burst lets one of them finish.
    """
    gens = dict(gens)

    def step(k):
        try:
            next(gens[k])
        except StopIteration:
            del gens[k]

    for k in schedule:
        if k in gens:
            step(k)
    rounds = 0
    while gens:
        for k in list(gens):
            for _ in range(burst):
                if k not in gens:
                    break
                step(k)
        rounds += 1
        if rounds > limit:
            raise AssertionError("interleaving did not finish")


class Harness:
    """One scheme instance over a tiny single-table database."""

    def __init__(self, scheme: str, specs, rows: int = 8, workers: int = 4,
                 log: bool = True, sync_mode: str = "latch_free", concurrent: bool = False):
        cfg = WorkloadConfig(table_rows=max(rows, 16), batch_size=len(specs))
        self.batch = make_batch(specs, cfg, [TableSchema("t", rows)])
        self.db = self.batch.make_database()
        self.log = EventLog() if log else None
        self.rt = Runtime(self.db, self.batch, concurrent=concurrent, sync_mode=sync_mode,
                          log=self.log, n_workers=workers)
        self.scheme = make_scheme(scheme, self.rt)
        self.scheme.setup_workers([[t for t in range(len(specs)) if t % workers == w]
                                   for w in range(workers)])

    def ctx(self, txn: int, worker: int | None = None) -> TxContext:
        w = self.rt.workers[txn % len(self.rt.workers) if worker is None else worker]
        return TxContext(self.batch.txns[txn], w)


@pytest.fixture
def harness():
    return Harness


def random_history(rng, n_txns: int = 4, n_tuples: int = 3, max_ops: int = 3,
                   versioned: bool = False, cross: bool = False) -> list[tuple]:
    """A random committed history as raw events.

    Each transaction gets distinct tuples with random read/write flags and the
    operations of all transactions are interleaved at random.  ``versioned``
    gives every read a version tag drawn from the tuple's writers.  ``cross``
    appends two transactions in the textbook non-serializable pattern.
    """
    from cctestbed.verify import COMMIT_EV, INITIAL, READ_EV, WRITE_EV

    progs = []
    for t in range(n_txns):
        tids = rng.sample(range(n_tuples), rng.randint(1, min(max_ops, n_tuples)))
        progs.append([(t, tid, rng.random() < 0.5) for tid in tids])
    queue = [op for p in progs for op in p]
    rng.shuffle(queue)
    # keep each program in its own order while interleaving
    cursor = {t: iter(p) for t, p in enumerate(progs)}
    ops = [next(cursor[t]) for t, _, _ in queue]
    if cross:
        a, b = n_txns, n_txns + 1
        x, y = n_tuples, n_tuples + 1  # untouched by the others
        tail = [(a, x, False), (b, y, False), (a, y, True), (b, x, True)]
        at = rng.randint(0, len(ops))
        ops[at:at] = tail
        n_txns += 2
    writers: dict[int, list[int]] = {}
    for t, tid, w in ops:
        if w:
            writers.setdefault(tid, []).append(t)
    events = []
    for seq, (t, tid, w) in enumerate(ops):
        version = None
        if versioned and not w and tid >= n_tuples:
            version = INITIAL  # the cross pair reads before either writes
        elif versioned and not w:
            version = rng.choice([INITIAL] + [x for x in writers.get(tid, []) if x != t])
        events.append((seq, t, 0, WRITE_EV if w else READ_EV, tid, version))
    seq = len(events)
    for t in range(n_txns):
        events.append((seq, t, 0, COMMIT_EV, -1, None))
        seq += 1
    return events


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
