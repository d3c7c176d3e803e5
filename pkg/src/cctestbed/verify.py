"""Event recording and post-hoc conflict-serializability checking."""

from __future__ import annotations

import itertools
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .errors import LogCapacityExceeded, MalformedLog

READ_EV, WRITE_EV, COMMIT_EV, ABORT_EV = range(4)
KIND_NAMES = ("read", "write", "commit", "abort")
KIND_CODES = {n: i for i, n in enumerate(KIND_NAMES)}

# version tag of a tuple's initial contents
INITIAL = -1


class EventLog:
    """Append-only event sequence.

    Each event is a tuple ``(seq, txn, attempt, kind, tuple_id, version)``.
    ``version`` is only set on reads by multi-version schemes and names the
    writer whose version was returned (:data:`INITIAL` for the loaded row).

    ``seq`` comes from a shared counter.  Callers that must validate after
    taking a position in the order (snapshot reads) use :meth:`reserve` and
    :meth:`append`; everything else calls :meth:`record`.
    """

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self.events: list[tuple] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self.events)

    def reserve(self) -> int:
        seq = next(self._seq)
        if self.capacity is not None and seq >= self.capacity:
            raise LogCapacityExceeded(f"event log full ({self.capacity} events)")
        return seq

    def append(self, seq: int, txn: int, attempt: int, kind: int,
               tid: int = -1, version: Optional[int] = None) -> None:
        self.events.append((seq, txn, attempt, kind, tid, version))

    def record(self, txn: int, attempt: int, kind: int, tid: int = -1,
               version: Optional[int] = None) -> int:
        seq = self.reserve()
        self.events.append((seq, txn, attempt, kind, tid, version))
        return seq

    def sorted_events(self) -> list[tuple]:
        return sorted(self.events)


def record_event(log: Optional[EventLog], txn: int, attempt: int, kind: int,
                 tid: int = -1, version: Optional[int] = None) -> None:
    if log is not None:
        log.record(txn, attempt, kind, tid, version)


def export_log(log: EventLog | Iterable[tuple], path: str | Path) -> None:
    """Write one JSON object per line, ordered by seq."""
    events = log.sorted_events() if isinstance(log, EventLog) else sorted(log)
    with open(path, "w") as fh:
        for seq, txn, attempt, kind, tid, version in events:
            rec = {"seq": seq, "txn": txn, "attempt": attempt, "kind": KIND_NAMES[kind]}
            if kind <= WRITE_EV:
                rec["tuple"] = tid
            if version is not None:
                rec["version"] = version
            fh.write(json.dumps(rec) + "\n")


def import_log(path: str | Path) -> EventLog:
    log = EventLog()
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        log.events.append((r["seq"], r["txn"], r["attempt"], KIND_CODES[r["kind"]],
                           r.get("tuple", -1), r.get("version")))
    if log.events:
        log._seq = itertools.count(max(e[0] for e in log.events) + 1)
    return log


def final_attempts(events: Iterable[tuple]) -> list[tuple]:
    """Events of each transaction's committing attempt, in seq order.

    Raises :class:`MalformedLog` when a transaction's last attempt has no
    commit event.
    """
    events = sorted(events)
    last: dict[int, int] = {}
    committed: set[tuple[int, int]] = set()
    for seq, txn, attempt, kind, tid, version in events:
        if attempt > last.get(txn, -1):
            last[txn] = attempt
        if kind == COMMIT_EV:
            committed.add((txn, attempt))
    for txn, attempt in last.items():
        if (txn, attempt) not in committed:
            raise MalformedLog(f"txn {txn} attempt {attempt} has no commit event")
    return [e for e in events if e[2] == last[e[1]] and e[3] <= WRITE_EV]


def conflict_edges(ops: list[tuple]) -> tuple[set[int], set[tuple[int, int]]]:
    """Conflict graph over final-attempt read/write events.

    Writes to a tuple are ordered by seq.  A read carrying a version tag is
    placed right after the write that produced that version; a read without
    one is placed by its own seq.  Edges between consecutive conflicting
    operations suffice: every other conflict edge follows by transitivity.
    """
    nodes: set[int] = set()
    per_tuple: dict[int, list[tuple]] = defaultdict(list)
    for e in ops:
        nodes.add(e[1])
        per_tuple[e[4]].append(e)
    edges: set[tuple[int, int]] = set()
    for tid, evs in per_tuple.items():
        writers = [e[1] for e in evs if e[3] == WRITE_EV]
        pos = {w: k for k, w in enumerate(writers)}
        last_writer = None
        readers: list[int] = []
        for seq, txn, attempt, kind, _, version in evs:
            if kind == WRITE_EV:
                if last_writer is not None and last_writer != txn:
                    edges.add((last_writer, txn))
                for r in readers:
                    if r != txn:
                        edges.add((r, txn))
                last_writer = txn
                readers = []
            elif version is None:
                if last_writer is not None and last_writer != txn:
                    edges.add((last_writer, txn))
                readers.append(txn)
            else:
                if version == INITIAL:
                    nxt = 0
                else:
                    if version not in pos:
                        raise MalformedLog(f"txn {txn} read tuple {tid} version {version} that was never committed")
                    if version != txn:
                        edges.add((version, txn))
                    nxt = pos[version] + 1
                if nxt < len(writers) and writers[nxt] != txn:
                    edges.add((txn, writers[nxt]))
    return nodes, edges


@dataclass
class VerifyResult:
    serializable: bool
    witness: list[int] = field(default_factory=list)
    cycle: list[int] = field(default_factory=list)
    # txn -> (first seq, last seq) of its final attempt, for cycle members
    details: dict[int, tuple[int, int]] = field(default_factory=dict)
    n_txns: int = 0
    n_edges: int = 0

    def __bool__(self) -> bool:
        return self.serializable

    def describe(self) -> str:
        if self.serializable:
            return f"serializable ({self.n_txns} txns, {self.n_edges} edges)"
        parts = [f"T{t}[seq {self.details[t][0]}..{self.details[t][1]}]" for t in self.cycle]
        return "cycle: " + " -> ".join(parts + [parts[0]])


def _shortest_cycle(adj: dict[int, list[int]], candidates: list[int], limit: int = 64) -> list[int]:
    best: list[int] = []
    for start in candidates[:limit]:
        parent = {start: None}
        q = deque([start])
        found = None
        while q and found is None:
            u = q.popleft()
            for v in adj.get(u, ()):
                if v == start:
                    found = u
                    break
                if v not in parent:
                    parent[v] = u
                    q.append(v)
        if found is None:
            continue
        path = [found]
        while path[-1] != start:
            path.append(parent[path[-1]])
        path.reverse()
        if not best or len(path) < len(best):
            best = path
            if len(best) == 2:
                break
    return best


def check_serializable(log: EventLog | Iterable[tuple]) -> VerifyResult:
    """Conflict-graph check over each transaction's committing attempt.

    Returns a topological order as witness, or the shortest cycle found with
    the seq range of every transaction on it.
    """
    events = log.events if isinstance(log, EventLog) else list(log)
    ops = final_attempts(events)
    nodes, edges = conflict_edges(ops)
    # committed transactions with no accesses still belong in the witness
    for e in events:
        if e[3] == COMMIT_EV:
            nodes.add(e[1])
    adj: dict[int, list[int]] = defaultdict(list)
    indeg = dict.fromkeys(nodes, 0)
    for a, b in edges:
        adj[a].append(b)
        indeg[b] += 1
    order = []
    q = deque(sorted(n for n, d in indeg.items() if d == 0))
    while q:
        u = q.popleft()
        order.append(u)
        for v in adj.get(u, ()):
            indeg[v] -= 1
            if indeg[v] == 0:
                q.append(v)
    res = VerifyResult(True, order, n_txns=len(nodes), n_edges=len(edges))
    if len(order) == len(nodes):
        return res
    stuck = sorted(n for n, d in indeg.items() if d > 0)
    cycle = _shortest_cycle(adj, stuck)
    spans: dict[int, tuple[int, int]] = {}
    members = set(cycle)
    for e in ops:
        if e[1] in members:
            lo, hi = spans.get(e[1], (e[0], e[0]))
            spans[e[1]] = (min(lo, e[0]), max(hi, e[0]))
    res.serializable = False
    res.witness = []
    res.cycle = cycle
    res.details = spans
    return res


def brute_force_serializable(events: Iterable[tuple], max_txns: int = 8) -> Optional[list[int]]:
    """Search every serial order for one equivalent to the history.

    Independent of the graph construction: each candidate order is replayed
    and accepted iff every read observes the same writer it observed in the
    history and every tuple's writes occur in the same order.  Returns the
    first accepted order or ``None``.
    """
    ops = final_attempts(events)
    txns = sorted({e[1] for e in ops} | {e[1] for e in events if e[3] == COMMIT_EV})
    if len(txns) > max_txns:
        raise ValueError(f"{len(txns)} transactions is too many to enumerate")
    # what each read observed, and the history's write order per tuple
    observed: dict[tuple[int, int], int] = {}
    last_w: dict[int, int] = {}
    write_order: dict[int, list[int]] = defaultdict(list)
    per_txn: dict[int, list[tuple[int, int, int]]] = defaultdict(list)
    for k, (seq, txn, attempt, kind, tid, version) in enumerate(ops):
        per_txn[txn].append((k, kind, tid))
        if kind == WRITE_EV:
            last_w[tid] = txn
            write_order[tid].append(txn)
        else:
            observed[(k, txn)] = version if version is not None else last_w.get(tid, INITIAL)
    for perm in itertools.permutations(txns):
        cur: dict[int, int] = {}
        order: dict[int, list[int]] = defaultdict(list)
        ok = True
        for t in perm:
            for k, kind, tid in per_txn[t]:
                if kind == WRITE_EV:
                    cur[tid] = t
                    order[tid].append(t)
                elif cur.get(tid, INITIAL) != observed[(k, t)]:
                    ok = False
                    break
            if not ok:
                break
        if ok and order == write_order:
            return list(perm)
    return None
