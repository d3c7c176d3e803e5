"""Batch generators with fully predetermined read/write sets.

YCSB transactions touch 16 distinct Zipfian keys; TPC-C Payment and NewOrder
are reduced to their read/write footprints.  Orderline inserts become writes
into rows reserved for each transaction, so no generator ever inserts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ConfigError
from .storage import Database, TableSchema

YCSB = "ycsb"
TPCC_PAYMENT = "tpcc_payment"
TPCC_NEWORDER = "tpcc_neworder"
KINDS = (YCSB, TPCC_PAYMENT, TPCC_NEWORDER)

YCSB_ACCESSES = 16
DISTRICTS_PER_WAREHOUSE = 10
MAX_ORDER_LINES = 15

READ, WRITE = "read", "write"


@dataclass(frozen=True)
class WorkloadConfig:
    kind: str = YCSB
    write_frac: float = 0.0
    theta: float = 0.0
    table_rows: int = 1 << 17
    batch_size: int = 1 << 16
    warehouses: int = 1
    seed: int = 0
    row_size: int = 100
    # TPC-C sizing; the benchmark's full values are 3000 and 100000
    customers_per_district: int = 100
    items: int = 1000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown workload kind {self.kind!r}")
        if not 0.0 <= self.write_frac <= 1.0:
            raise ConfigError("write fraction must lie in [0, 1]")
        if not 0.0 <= self.theta < 1.0:
            raise ConfigError("theta must lie in [0, 1)")
        if self.batch_size < 0:
            raise ConfigError("batch size must be non-negative")

    @property
    def name(self) -> str:
        if self.kind != YCSB:
            return f"{self.kind}-w{self.warehouses}"
        for pname, (w, t) in PRESETS.items():
            if (w, t) == (self.write_frac, self.theta):
                return f"ycsb-{pname}"
        return f"ycsb-W{self.write_frac}-t{self.theta}"


# preset name -> (write fraction, theta)
PRESETS = {"RO": (0.0, 0.0), "MC": (0.1, 0.6), "HC": (0.5, 0.8)}

DESK_ROWS = 1 << 17
DESK_BATCH = 1 << 16
PAPER_ROWS = (1 << 20) * 10
PAPER_BATCH = 1 << 20


def preset(name: str, paper_scale: bool = False, **overrides) -> WorkloadConfig:
    try:
        w, theta = PRESETS[name.upper()]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None
    rows, batch = (PAPER_ROWS, PAPER_BATCH) if paper_scale else (DESK_ROWS, DESK_BATCH)
    base = dict(kind=YCSB, write_frac=w, theta=theta, table_rows=rows, batch_size=batch)
    base.update(overrides)
    return WorkloadConfig(**base)


# --------------------------------------------------------------------------
# Zipfian sampling


class ZipfSampler:
    """Zipf(theta) over ``n`` keys by rejection-inversion (Hörmann & Derflinger).

    Rank ``r`` (1-based) is drawn with probability proportional to
    ``r ** -theta``; ranks map to keys through a seed-derived permutation so
    the hot keys are scattered over the key space.
    """

    def __init__(self, n: int, theta: float, seed: int = 0, permute: bool = True):
        if n < 1:
            raise ConfigError("Zipf sampler needs n >= 1")
        if not 0.0 <= theta < 1.0:
            raise ConfigError("theta must lie in [0, 1)")
        self.n = n
        self.theta = theta
        self.rng = np.random.default_rng(seed)
        self.perm = self.rng.permutation(n).astype(np.int64) if permute else None
        s = theta
        self._one_minus_s = 1.0 - s
        self._hx1 = self._H(1.5) - 1.0
        self._hn = self._H(n + 0.5)
        self._s = 2.0 - self._Hinv(self._H(2.5) - 2.0 ** -s)
        self._buf = np.empty(0, dtype=np.int64)
        self._pos = 0

    def _H(self, x):
        return (np.power(x, self._one_minus_s) - 1.0) / self._one_minus_s

    def _Hinv(self, y):
        return np.power(1.0 + y * self._one_minus_s, 1.0 / self._one_minus_s)

    def sample_ranks(self, size: int) -> np.ndarray:
        """``size`` ranks in ``[1, n]``."""
        out = np.empty(size, dtype=np.int64)
        if self.n == 1:
            out[:] = 1
            return out
        if self.theta == 0.0:
            return self.rng.integers(1, self.n + 1, size=size, dtype=np.int64)
        filled = 0
        while filled < size:
            m = size - filled
            u = self._hn + self.rng.random(m) * (self._hx1 - self._hn)
            x = self._Hinv(u)
            k = np.clip(np.floor(x + 0.5), 1, self.n)
            ok = (k - x <= self._s) | (u >= self._H(k + 0.5) - np.power(k, -self.theta))
            acc = k[ok].astype(np.int64)
            out[filled:filled + len(acc)] = acc
            filled += len(acc)
        return out

    def sample(self, size: int) -> np.ndarray:
        ranks = self.sample_ranks(size)
        if self.perm is None:
            return ranks - 1
        return self.perm[ranks - 1]

    def hottest_key(self) -> int:
        return 0 if self.perm is None else int(self.perm[0])

    def next(self) -> int:
        if self._pos >= len(self._buf):
            self._buf = self.sample(4096)
            self._pos = 0
        k = int(self._buf[self._pos])
        self._pos += 1
        return k


def zipf_next(sampler: ZipfSampler) -> int:
    return sampler.next()


def harmonic(n: int, theta: float) -> float:
    """Generalised harmonic number sum_{k=1..n} k^-theta."""
    return float(np.sum(np.arange(1, n + 1, dtype=np.float64) ** -theta))


# --------------------------------------------------------------------------
# transactions and batches


class Access(NamedTuple):
    table: str
    key: int
    mode: str


class Transaction:
    """A predetermined access list.

    ``tables`` holds table ordinals within the batch's database, ``keys`` the
    per-table primary keys and ``writes`` the access modes.  Accesses are
    ordered by (table, key), which is TupleId order.  Retry state (current
    timestamp, restart count) lives in the executor's per-run context, so a
    batch can be replayed any number of times.
    """

    __slots__ = ("txn_id", "tables", "keys", "writes", "_names")

    def __init__(self, txn_id: int, tables: Sequence[int], keys: Sequence[int],
                 writes: Sequence[bool], table_names: Sequence[str]):
        self.txn_id = txn_id
        self.tables = tuple(tables)
        self.keys = tuple(keys)
        self.writes = tuple(writes)
        self._names = table_names

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def accesses(self) -> list[Access]:
        return [Access(self._names[t], k, WRITE if w else READ)
                for t, k, w in zip(self.tables, self.keys, self.writes)]

    @property
    def read_only(self) -> bool:
        return not any(self.writes)

    def __repr__(self) -> str:
        return f"Transaction({self.txn_id}, {self.accesses})"


@dataclass
class Batch:
    config: WorkloadConfig
    table_names: tuple[str, ...]
    txns: list[Transaction] = field(default_factory=list)
    schemas: tuple[TableSchema, ...] = ()

    def __len__(self) -> int:
        return len(self.txns)

    def __iter__(self) -> Iterator[Transaction]:
        return iter(self.txns)

    def __getitem__(self, i: int) -> Transaction:
        return self.txns[i]

    @property
    def write_count(self) -> int:
        return sum(sum(t.writes) for t in self.txns)

    def make_database(self) -> Database:
        return Database(self.schemas)

    def columns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Flattened (offsets, tables, keys, writes) arrays."""
        lens = np.fromiter((len(t) for t in self.txns), dtype=np.int64, count=len(self.txns))
        offsets = np.zeros(len(self.txns) + 1, dtype=np.int64)
        np.cumsum(lens, out=offsets[1:])
        tables = np.fromiter((x for t in self.txns for x in t.tables), dtype=np.uint8, count=int(offsets[-1]))
        keys = np.fromiter((x for t in self.txns for x in t.keys), dtype=np.uint64, count=int(offsets[-1]))
        writes = np.fromiter((x for t in self.txns for x in t.writes), dtype=np.uint8, count=int(offsets[-1]))
        return offsets, tables, keys, writes

    def tuple_ids(self, db: Database) -> list[tuple[int, ...]]:
        bases = [db.by_name[n].base_id for n in self.table_names]
        return [tuple(bases[t] + k for t, k in zip(x.tables, x.keys)) for x in self.txns]


def make_batch(txn_specs, cfg: WorkloadConfig, schemas: Sequence[TableSchema]) -> Batch:
    """Build a batch from ``[(tables, keys, writes), ...]`` (useful for tests)."""
    names = tuple(s.name for s in schemas)
    txns = []
    for i, (tables, keys, writes) in enumerate(txn_specs):
        order = sorted(range(len(keys)), key=lambda j: (tables[j], keys[j]))
        txns.append(Transaction(i, [tables[j] for j in order], [keys[j] for j in order],
                                [bool(writes[j]) for j in order], names))
    return Batch(cfg, names, txns, tuple(schemas))


def ycsb_schemas(cfg: WorkloadConfig) -> tuple[TableSchema, ...]:
    return (TableSchema("usertable", cfg.table_rows, cfg.row_size),)


def gen_ycsb_batch(cfg: WorkloadConfig) -> Batch:
    if cfg.kind != YCSB:
        raise ConfigError(f"not a YCSB config: {cfg.kind}")
    if cfg.table_rows < YCSB_ACCESSES:
        raise ConfigError(f"YCSB needs at least {YCSB_ACCESSES} rows")
    sampler = ZipfSampler(cfg.table_rows, cfg.theta, seed=cfg.seed)
    B = cfg.batch_size
    keys = sampler.sample(B * YCSB_ACCESSES).reshape(B, YCSB_ACCESSES) if B else np.zeros((0, 16), np.int64)
    keys.sort(axis=1)
    dup_rows = np.nonzero((keys[:, 1:] == keys[:, :-1]).any(axis=1))[0]
    for r in dup_rows:
        # resample duplicates so every transaction keeps exactly 16 keys
        seen: set[int] = set()
        row = []
        for k in keys[r]:
            k = int(k)
            while k in seen:
                k = sampler.next()
            seen.add(k)
            row.append(k)
        keys[r] = sorted(row)
    writes = sampler.rng.random((B, YCSB_ACCESSES)) < cfg.write_frac
    names = ("usertable",)
    zeros = (0,) * YCSB_ACCESSES
    key_rows = keys.tolist()
    write_rows = writes.tolist()
    txns = [Transaction(i, zeros, key_rows[i], write_rows[i], names) for i in range(B)]
    return Batch(cfg, names, txns, ycsb_schemas(cfg))


TPCC_ROW_SIZES = {"warehouse": 89, "district": 95, "customer": 655, "stock": 306, "order_line": 54}


def tpcc_schemas(cfg: WorkloadConfig) -> tuple[TableSchema, ...]:
    W = cfg.warehouses
    return (
        TableSchema("warehouse", W, TPCC_ROW_SIZES["warehouse"]),
        TableSchema("district", W * DISTRICTS_PER_WAREHOUSE, TPCC_ROW_SIZES["district"]),
        TableSchema("customer", W * DISTRICTS_PER_WAREHOUSE * cfg.customers_per_district,
                    TPCC_ROW_SIZES["customer"]),
        TableSchema("stock", W * cfg.items, TPCC_ROW_SIZES["stock"]),
        TableSchema("order_line", max(1, cfg.batch_size * MAX_ORDER_LINES), TPCC_ROW_SIZES["order_line"]),
    )


WH, DIST, CUST, STOCK, OL = range(5)


def gen_tpcc_batch(cfg: WorkloadConfig) -> Batch:
    if cfg.kind not in (TPCC_PAYMENT, TPCC_NEWORDER):
        raise ConfigError(f"not a TPC-C config: {cfg.kind}")
    if cfg.warehouses < 1:
        raise ConfigError("TPC-C needs at least one warehouse")
    if cfg.kind == TPCC_NEWORDER and cfg.items < MAX_ORDER_LINES:
        raise ConfigError(f"NewOrder needs at least {MAX_ORDER_LINES} items")
    rng = np.random.default_rng(cfg.seed)
    schemas = tpcc_schemas(cfg)
    names = tuple(s.name for s in schemas)
    C = cfg.customers_per_district
    txns = []
    for i in range(cfg.batch_size):
        w = int(rng.integers(cfg.warehouses))
        d = w * DISTRICTS_PER_WAREHOUSE + int(rng.integers(DISTRICTS_PER_WAREHOUSE))
        c = d * C + int(rng.integers(C))
        if cfg.kind == TPCC_PAYMENT:
            tables, keys, writes = (WH, DIST, CUST), (w, d, c), (True, True, True)
        else:
            ol_cnt = int(rng.integers(5, MAX_ORDER_LINES + 1))
            items = np.sort(rng.choice(cfg.items, size=ol_cnt, replace=False))
            tables = (WH, DIST, CUST) + (STOCK,) * ol_cnt + (OL,) * ol_cnt
            keys = ((w, d, c) + tuple(int(w * cfg.items + it) for it in items)
                    + tuple(range(i * MAX_ORDER_LINES, i * MAX_ORDER_LINES + ol_cnt)))
            writes = (False, False, False) + (True,) * (2 * ol_cnt)
        txns.append(Transaction(i, tables, keys, writes, names))
    return Batch(cfg, names, txns, schemas)


def generate(cfg: WorkloadConfig) -> Batch:
    if cfg.kind == YCSB:
        return gen_ycsb_batch(cfg)
    return gen_tpcc_batch(cfg)


# --------------------------------------------------------------------------
# framed binary dump / load

MAGIC = b"CCTBATCH"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sHBBQQ")


def dump_batch(batch: Batch, path: str | Path) -> None:
    """Write ``batch`` in a little-endian framed format.

    Layout: header (magic, version, kind, n_tables, n_txns, n_accesses),
    table names (u8 length + utf-8), then offsets u64[n_txns + 1],
    tables u8[n], keys u64[n], modes u8[n].  The generating config follows
    as a JSON trailer so the batch can be replayed with its schema.
    """
    import json

    offsets, tables, keys, writes = batch.columns()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, KINDS.index(batch.config.kind),
                             len(batch.table_names), len(batch.txns), len(keys)))
        for n in batch.table_names:
            raw = n.encode()
            f.write(struct.pack("<B", len(raw)) + raw)
        f.write(offsets.astype("<u8").tobytes())
        f.write(tables.astype("u1").tobytes())
        f.write(keys.astype("<u8").tobytes())
        f.write(writes.astype("u1").tobytes())
        trailer = json.dumps(batch.config.__dict__, sort_keys=True).encode()
        f.write(struct.pack("<I", len(trailer)) + trailer)


def load_batch(path: str | Path) -> Batch:
    import json

    data = Path(path).read_bytes()
    magic, version, kind, ntab, ntxn, nacc = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ConfigError(f"{path}: not a batch file")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported batch format version {version}")
    pos = _HEADER.size
    names = []
    for _ in range(ntab):
        (ln,) = struct.unpack_from("<B", data, pos)
        names.append(data[pos + 1:pos + 1 + ln].decode())
        pos += 1 + ln
    offsets = np.frombuffer(data, "<u8", ntxn + 1, pos).astype(np.int64)
    pos += 8 * (ntxn + 1)
    tables = np.frombuffer(data, "u1", nacc, pos)
    pos += nacc
    keys = np.frombuffer(data, "<u8", nacc, pos)
    pos += 8 * nacc
    writes = np.frombuffer(data, "u1", nacc, pos)
    pos += nacc
    (tlen,) = struct.unpack_from("<I", data, pos)
    cfg = WorkloadConfig(**json.loads(data[pos + 4:pos + 4 + tlen]))
    if cfg.kind != KINDS[kind]:
        raise ConfigError(f"{path}: header kind disagrees with trailer")
    names_t = tuple(names)
    tl, kl, wl = tables.tolist(), keys.tolist(), writes.astype(bool).tolist()
    txns = [Transaction(i, tl[offsets[i]:offsets[i + 1]], kl[offsets[i]:offsets[i + 1]],
                        wl[offsets[i]:offsets[i + 1]], names_t) for i in range(ntxn)]
    schemas = ycsb_schemas(cfg) if cfg.kind == YCSB else tpcc_schemas(cfg)
    return Batch(cfg, names_t, txns, schemas)
