from __future__ import annotations

import threading

import pytest
from hypothesis import given, strategies as st

from cctestbed.errors import ConfigError, KeyNotFound
from cctestbed.metrics import SPIN
from cctestbed.storage import (LAYOUTS, TICTOC_WORD, TO_WORD, TPL_WORD, AtomicWords, Database, Layout,
                               LocalWords, SortedIndex, SpinLock, TableSchema, atomic_rtu, index_lookup,
                               load_schemas, spin_lock_acquire)

words64 = st.integers(min_value=0, max_value=(1 << 64) - 1)


@pytest.mark.parametrize("name", sorted(LAYOUTS))
@given(bits=words64)
def test_layout_decode_encode_roundtrip(name, bits):
    lay = LAYOUTS[name]
    assert lay.encode(**lay.decode(bits)._asdict()) == bits


@pytest.mark.parametrize("name", sorted(LAYOUTS))
def test_layout_field_boundaries(name):
    lay = LAYOUTS[name]
    assert sum(lay.widths.values()) == 64
    for f in lay.fields:
        for v in (0, 1, lay.max(f) - 1, lay.max(f)):
            if v < 0:
                continue
            bits = lay.encode(**{f: v})
            dec = lay.decode(bits)._asdict()
            assert dec[f] == v
            assert all(x == 0 for g, x in dec.items() if g != f)
        with pytest.raises(ValueError):
            lay.encode(**{f: lay.max(f) + 1})


def test_layout_widths_match_table():
    assert TPL_WORD.widths == {"reserved": 1, "shared": 1, "holder_count": 31, "holder": 31}
    assert TO_WORD.widths == {"reserved": 1, "commit": 1, "rts": 31, "wts": 31}
    assert TICTOC_WORD.widths == {"lock": 1, "delta": 15, "wts": 48}
    assert LAYOUTS["silo"].widths == {"lock": 1, "ts": 63}
    assert LAYOUTS["mvcc_ref"].widths == {"version_ref": 64}


def test_layout_rejects_overfull_and_unknown():
    with pytest.raises(ConfigError):
        Layout("x", [("a", 40), ("b", 40)])
    with pytest.raises(ConfigError):
        TO_WORD.encode(nope=1)
    with pytest.raises(ValueError):
        TO_WORD.decode(1 << 64)


def test_rtu_increment_and_refusal():
    w = LocalWords(1)
    assert atomic_rtu(w, 0, lambda old: old + 1) == (True, 0)
    assert w.load(0) == 1
    assert atomic_rtu(w, 0, lambda old: None) == (False, 1)
    assert w.load(0) == 1


def test_concurrent_increments_are_atomic():
    w = AtomicWords(1)
    n, per = 8, 2000

    def body():
        for _ in range(per):
            w.rtu(0, lambda old: old + 1)

    ts = [threading.Thread(target=body) for _ in range(n)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert w.load(0) == n * per


def test_cas_and_fetch_add():
    for cls in (AtomicWords, LocalWords):
        w = cls(2, initial=5)
        assert not w.cas(0, 4, 9)
        assert w.cas(0, 5, 9) and w.load(0) == 9
        assert w.fetch_add(1, 3) == 5 and w.load(1) == 8


def test_spin_lock_states():
    lock = SpinLock(LocalWords(1))
    assert spin_lock_acquire(lock, 0, owner=1, try_only=True)
    assert lock.holder(0) == 1
    assert not spin_lock_acquire(lock, 0, owner=2, try_only=True)
    with pytest.raises(RuntimeError):
        lock.release(0, owner=2)
    gen = lock.acquire(0, owner=2)
    assert next(gen) == SPIN
    lock.release(0, owner=1)
    with pytest.raises(StopIteration):
        next(gen)
    assert lock.holder(0) == 2


def test_spin_lock_blocking_waiter_gets_lock():
    lock = SpinLock(AtomicWords(1))
    lock.try_acquire(0, 0)
    got = []
    t = threading.Thread(target=lambda: got.append(spin_lock_acquire(lock, 0, owner=1)))
    t.start()
    lock.release(0, 0)
    t.join(5)
    assert got == [True] and lock.holder(0) == 1


def test_sorted_index_lookup():
    idx = SortedIndex.from_pairs([(9, 102), (5, 100), (7, 101)])
    assert index_lookup(idx, 7) == 101
    with pytest.raises(KeyNotFound):
        SortedIndex([5], [100]).lookup(6)
    ident = SortedIndex.identity(100, base_id=10)
    assert ident.lookup(42) == 52
    with pytest.raises(KeyNotFound):
        ident.lookup(100)
    with pytest.raises(ConfigError):
        SortedIndex([3, 3], [1, 2])


def test_database_tuple_space():
    db = Database([TableSchema("a", 4, 8), TableSchema("b", 3, 16)])
    assert db.total_rows == 7
    assert db.indexes["b"].lookup(0) == 4
    db.write(5, b"x" * 20)
    assert db.read(5) == b"x" * 16
    assert db.read(4) == bytes(16)
    assert db.table_of(3).name == "a"
    with pytest.raises(ConfigError):
        Database([TableSchema("a", 1), TableSchema("a", 1)])


def test_load_schemas(tmp_path):
    p = tmp_path / "t.yaml"
    p.write_text("tables:\n  - name: usertable\n    row_count: 64\n    columns: [[key, 8], [f0, 92]]\n")
    (s,) = load_schemas(p)
    assert (s.name, s.row_count, s.row_size) == ("usertable", 64, 100)
