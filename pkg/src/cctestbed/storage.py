"""Row-store tables, sorted-array indexes and the 64-bit control-word substrate.

Every scheme keeps its per-tuple control information in a packed 64-bit word
and mutates it only through :meth:`AtomicWords.cas` / :meth:`AtomicWords.rtu`.
Python has no native CAS, so the concurrent variant serialises each
compare-and-swap on a striped mutex; a plain list store is atomic under the
interpreter lock, so loads need no locking.
"""

from __future__ import annotations

import threading
import time
from array import array
from bisect import bisect_left, bisect_right
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import yaml

from .errors import ConfigError, KeyNotFound
from .metrics import SPIN

WORD_MASK = (1 << 64) - 1


# --------------------------------------------------------------------------
# packed word layouts


class Layout:
    """A named bit layout over one 64-bit word.

    Fields are listed most-significant first; any bits not claimed by a field
    form a ``reserved`` field at the top of the word so that decoding and
    re-encoding is lossless for every 64-bit value.
    """

    def __init__(self, name: str, fields: Sequence[tuple[str, int]]):
        total = sum(w for _, w in fields)
        if total > 64:
            raise ConfigError(f"{name}: fields use {total} bits")
        spec = list(fields)
        if total < 64:
            spec.insert(0, ("reserved", 64 - total))
        self.name = name
        self.widths: dict[str, int] = {}
        self.shifts: dict[str, int] = {}
        shift = 64
        for fname, width in spec:
            shift -= width
            self.widths[fname] = width
            self.shifts[fname] = shift
        self.fields = tuple(f for f, _ in spec)
        self.tuple_type = NamedTuple(name, [(f, int) for f in self.fields])

    def max(self, fname: str) -> int:
        return (1 << self.widths[fname]) - 1

    def encode(self, **values: int) -> int:
        bits = 0
        for fname, value in values.items():
            if fname not in self.widths:
                raise ConfigError(f"{self.name} has no field {fname!r}")
            if not 0 <= value <= self.max(fname):
                raise ValueError(f"{self.name}.{fname}={value} exceeds {self.widths[fname]} bits")
            bits |= value << self.shifts[fname]
        return bits

    def decode(self, bits: int):
        if not 0 <= bits <= WORD_MASK:
            raise ValueError("not a 64-bit value")
        return self.tuple_type(
            *((bits >> self.shifts[f]) & self.max(f) for f in self.fields)
        )

    def get(self, bits: int, fname: str) -> int:
        return (bits >> self.shifts[fname]) & self.max(fname)

    def __repr__(self) -> str:
        return f"Layout({self.name}, {dict(self.widths)})"


TPL_WORD = Layout("TplWord", [("shared", 1), ("holder_count", 31), ("holder", 31)])
TO_WORD = Layout("ToWord", [("commit", 1), ("rts", 31), ("wts", 31)])
# MVCC keeps the timestamps in a ToWord and the version reference in a second word.
MVCC_META = TO_WORD
VERSION_REF = Layout("VersionRef", [("version_ref", 64)])
SILO_WORD = Layout("SiloWord", [("lock", 1), ("ts", 63)])
TICTOC_WORD = Layout("TicTocWord", [("lock", 1), ("delta", 15), ("wts", 48)])

LAYOUTS = {
    "tpl": TPL_WORD,
    "to": TO_WORD,
    "mvcc": MVCC_META,
    "mvcc_ref": VERSION_REF,
    "silo": SILO_WORD,
    "tictoc": TICTOC_WORD,
}


# --------------------------------------------------------------------------
# atomic words


class AtomicWords:
    """An array of 64-bit words mutated by compare-and-swap.

    ``words`` is exposed for plain loads.  All writes go through :meth:`cas`,
    :meth:`store` or :meth:`rtu`.
    """

    concurrent = True

    def __init__(self, n: int, initial: int = 0, stripes: int = 1024):
        self.words = [initial] * n
        self._stripes = stripes
        self._locks = [threading.Lock() for _ in range(stripes)]

    def __len__(self) -> int:
        return len(self.words)

    def load(self, i: int) -> int:
        return self.words[i]

    def cas(self, i: int, expected: int, new: int) -> bool:
        with self._locks[i % self._stripes]:
            if self.words[i] != expected:
                return False
            self.words[i] = new
            return True

    def store(self, i: int, value: int) -> None:
        # the mutex release doubles as the memory fence after a store
        with self._locks[i % self._stripes]:
            self.words[i] = value

    def fetch_add(self, i: int, delta: int) -> int:
        with self._locks[i % self._stripes]:
            old = self.words[i]
            self.words[i] = (old + delta) & WORD_MASK
            return old

    def rtu(self, i: int, transform: Callable[[int], Optional[int]]) -> tuple[bool, int]:
        """Read-transform-update loop.

        ``transform`` maps the current bits to new bits or ``None`` to refuse.
        Returns ``(True, old)`` after exactly one successful transition or
        ``(False, observed)`` when refused, leaving the word untouched.
        """
        words = self.words
        while True:
            old = words[i]
            new = transform(old)
            if new is None:
                return False, old
            if self.cas(i, old, new):
                return True, old


class LocalWords(AtomicWords):
    """Lock-free variant for the single-threaded simulator backend."""

    concurrent = False

    def __init__(self, n: int, initial: int = 0, stripes: int = 0):
        self.words = [initial] * n

    def cas(self, i: int, expected: int, new: int) -> bool:
        if self.words[i] != expected:
            return False
        self.words[i] = new
        return True

    def store(self, i: int, value: int) -> None:
        self.words[i] = value

    def fetch_add(self, i: int, delta: int) -> int:
        old = self.words[i]
        self.words[i] = (old + delta) & WORD_MASK
        return old

    def rtu(self, i: int, transform: Callable[[int], Optional[int]]) -> tuple[bool, int]:
        old = self.words[i]
        new = transform(old)
        if new is None:
            return False, old
        self.words[i] = new
        return True, old


def make_words(n: int, concurrent: bool, initial: int = 0) -> AtomicWords:
    return AtomicWords(n, initial) if concurrent else LocalWords(n, initial)


def atomic_rtu(words: AtomicWords, i: int, transform: Callable[[int], Optional[int]]):
    return words.rtu(i, transform)


# --------------------------------------------------------------------------
# spin locks


class SpinLock:
    """Spin locks stamped with their owner, one per slot of a word array.

    A slot holds 0 when free and ``owner + 1`` while held, which lets
    :meth:`release` assert that the caller really is the exclusive holder.
    """

    def __init__(self, words: AtomicWords):
        self.words = words

    def try_acquire(self, i: int, owner: int) -> bool:
        return self.words.cas(i, 0, owner + 1)

    def acquire(self, i: int, owner: int):
        """Generator form: yields :data:`SPIN` once per failed attempt."""
        while not self.words.cas(i, 0, owner + 1):
            yield SPIN

    def acquire_blocking(self, i: int, owner: int) -> None:
        while not self.words.cas(i, 0, owner + 1):
            time.sleep(0)

    def holder(self, i: int) -> Optional[int]:
        v = self.words.words[i]
        return v - 1 if v else None

    def release(self, i: int, owner: int) -> None:
        held = self.words.words[i]
        if held != owner + 1:
            raise RuntimeError(f"spin lock {i} released by {owner} but held by {held - 1}")
        self.words.store(i, 0)


def spin_lock_acquire(lock: SpinLock, i: int, owner: int, try_only: bool = False) -> bool:
    """Acquire ``lock[i]``; with ``try_only`` report busy instead of looping."""
    if try_only:
        return lock.try_acquire(i, owner)
    lock.acquire_blocking(i, owner)
    return True


# --------------------------------------------------------------------------
# tables and indexes


class SortedIndex:
    """Read-only sorted array of ``(key, tuple_id)`` pairs."""

    def __init__(self, keys: Iterable[int], ids: Iterable[int]):
        self.keys = array("Q", keys)
        self.ids = array("Q", ids)
        if len(self.keys) != len(self.ids):
            raise ConfigError("index keys and ids differ in length")
        for a, b in zip(self.keys, self.keys[1:]):
            if b <= a:
                raise ConfigError("index keys must be strictly ascending and unique")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, int]]) -> "SortedIndex":
        items = sorted(pairs)
        return cls((k for k, _ in items), (t for _, t in items))

    @classmethod
    def identity(cls, n: int, base_id: int = 0) -> "SortedIndex":
        idx = cls.__new__(cls)
        idx.keys = array("Q", range(n))
        idx.ids = array("Q", range(base_id, base_id + n))
        return idx

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, key: int) -> int:
        keys = self.keys
        pos = bisect_left(keys, key)
        if pos == len(keys) or keys[pos] != key:
            raise KeyNotFound(key)
        return self.ids[pos]


def index_lookup(index: SortedIndex, key: int) -> int:
    return index.lookup(key)


@dataclass
class TableSchema:
    name: str
    row_count: int
    row_size: int = 100
    columns: list[tuple[str, int]] = field(default_factory=list)
    indexed: list[str] = field(default_factory=lambda: ["id"])

    def __post_init__(self):
        if self.columns:
            self.row_size = sum(w for _, w in self.columns)
        if self.row_count < 1 or self.row_size < 1:
            raise ConfigError(f"table {self.name}: row_count and row_size must be positive")


class Table:
    def __init__(self, schema: TableSchema, base_id: int):
        self.schema = schema
        self.name = schema.name
        self.row_size = schema.row_size
        self.row_count = schema.row_count
        self.base_id = base_id
        self.rows = bytearray(self.row_count * self.row_size)

    def __repr__(self) -> str:
        return f"Table({self.name!r}, rows={self.row_count}, base={self.base_id})"


class Database:
    """Tables laid out back to back in one TupleId space.

    Rows are read and written without synchronisation: isolation is the job
    of the concurrency-control scheme, not of storage.
    """

    def __init__(self, schemas: Sequence[TableSchema]):
        self.tables: list[Table] = []
        self.by_name: dict[str, Table] = {}
        self.indexes: dict[str, SortedIndex] = {}
        base = 0
        for s in schemas:
            if s.name in self.by_name:
                raise ConfigError(f"duplicate table {s.name!r}")
            t = Table(s, base)
            self.tables.append(t)
            self.by_name[s.name] = t
            self.indexes[s.name] = SortedIndex.identity(t.row_count, base)
            base += t.row_count
        self.total_rows = base
        self._bases = [t.base_id for t in self.tables]

    def table_of(self, tid: int) -> Table:
        return self.tables[bisect_right(self._bases, tid) - 1]

    def table_index(self, name: str) -> int:
        for i, t in enumerate(self.tables):
            if t.name == name:
                return i
        raise ConfigError(f"no table {name!r}")

    def read(self, tid: int) -> bytes:
        t = self.tables[bisect_right(self._bases, tid) - 1] if len(self.tables) > 1 else self.tables[0]
        off = (tid - t.base_id) * t.row_size
        return bytes(t.rows[off:off + t.row_size])

    def write(self, tid: int, payload: bytes) -> None:
        t = self.tables[bisect_right(self._bases, tid) - 1] if len(self.tables) > 1 else self.tables[0]
        size = t.row_size
        off = (tid - t.base_id) * size
        data = payload[:size]
        t.rows[off:off + len(data)] = data


def load_schemas(path: str | Path) -> list[TableSchema]:
    """Read table definitions from a YAML (or JSON) document.

    Expected shape::

        tables:
          - name: usertable
            row_count: 131072
            columns: [[key, 8], [field0, 92]]
            indexed: [key]
    """
    doc = yaml.safe_load(Path(path).read_text())
    if not isinstance(doc, dict) or "tables" not in doc:
        raise ConfigError(f"{path}: missing 'tables'")
    out = []
    for entry in doc["tables"]:
        cols = [tuple(c) for c in entry.get("columns", [])]
        out.append(
            TableSchema(
                name=entry["name"],
                row_count=int(entry["row_count"]),
                row_size=int(entry.get("row_size", 100)),
                columns=[(str(n), int(w)) for n, w in cols],
                indexed=list(entry.get("indexed", ["id"])),
            )
        )
    return out
