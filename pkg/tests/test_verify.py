from __future__ import annotations

import random
import threading

import pytest

from cctestbed.core import run_transaction
from cctestbed.errors import LogCapacityExceeded, MalformedLog
from cctestbed.executor import LaunchConfig, execute_batch
from cctestbed.schemes import SCHEMES
from cctestbed.verify import (ABORT_EV, COMMIT_EV, READ_EV, WRITE_EV, EventLog, brute_force_serializable,
                              check_serializable, export_log, final_attempts, import_log)
from cctestbed.storage import TableSchema
from cctestbed.workload import WorkloadConfig, generate, make_batch, preset

from conftest import Harness, drive, random_history


def _ev(seq, txn, kind, tid=-1, attempt=0, version=None):
    return (seq, txn, attempt, kind, tid, version)


def test_empty_log():
    res = check_serializable(EventLog())
    assert res and res.witness == [] and brute_force_serializable([]) == []


def test_textbook_cross_is_a_violation():
    x, y = 0, 1
    events = [_ev(0, 1, READ_EV, x), _ev(1, 2, READ_EV, y), _ev(2, 1, WRITE_EV, y),
              _ev(3, 2, WRITE_EV, x), _ev(4, 1, COMMIT_EV), _ev(5, 2, COMMIT_EV)]
    res = check_serializable(events)
    assert not res and sorted(res.cycle) == [1, 2]
    assert "T1" in res.describe() and "T2" in res.describe()
    assert brute_force_serializable(events) is None


def test_witness_respects_conflicts():
    events = [_ev(0, 2, WRITE_EV, 0), _ev(1, 0, READ_EV, 0), _ev(2, 1, WRITE_EV, 0),
              _ev(3, 0, COMMIT_EV), _ev(4, 1, COMMIT_EV), _ev(5, 2, COMMIT_EV)]
    res = check_serializable(events)
    assert res.witness == [2, 0, 1]
    assert brute_force_serializable(events) == [2, 0, 1]


def test_only_final_attempt_counts():
    events = [_ev(0, 0, READ_EV, 0), _ev(1, 1, WRITE_EV, 0), _ev(2, 0, WRITE_EV, 1),
              _ev(3, 0, ABORT_EV), _ev(4, 1, WRITE_EV, 1), _ev(5, 1, COMMIT_EV),
              _ev(6, 0, READ_EV, 0, attempt=1), _ev(7, 0, WRITE_EV, 1, attempt=1),
              _ev(8, 0, COMMIT_EV, attempt=1)]
    assert [e[1:4] for e in final_attempts(events)][0] == (1, 0, WRITE_EV)
    assert check_serializable(events).witness == [1, 0]


def test_missing_commit_is_malformed():
    events = [_ev(0, 0, READ_EV, 0), _ev(1, 0, ABORT_EV), _ev(2, 0, READ_EV, 0, attempt=1)]
    with pytest.raises(MalformedLog):
        check_serializable(events)


def test_version_tags_order_stale_reads():
    # T2 reads the initial version after T1 installed a newer one: serializable as T2, T1
    events = [_ev(0, 1, WRITE_EV, 0), _ev(1, 2, READ_EV, 0, version=-1),
              _ev(2, 1, COMMIT_EV), _ev(3, 2, COMMIT_EV)]
    assert check_serializable(events).witness == [2, 1]
    bad = events[:1] + [_ev(1, 2, READ_EV, 0, version=7)] + events[2:]
    with pytest.raises(MalformedLog):
        check_serializable(bad)


def test_export_import_round_trip(tmp_path):
    events = random_history(random.Random(1), 5, versioned=True)
    log = EventLog()
    log.events = list(events)
    path = tmp_path / "log.jsonl"
    export_log(log, path)
    back = import_log(path)
    assert sorted(back.events) == sorted(events)
    assert back.record(0, 1, ABORT_EV) == max(e[0] for e in events) + 1


def test_capacity_and_disabled_recording():
    log = EventLog(capacity=3)
    for _ in range(3):
        log.record(0, 0, READ_EV, 1)
    with pytest.raises(LogCapacityExceeded):
        log.record(0, 0, COMMIT_EV)
    res = execute_batch(generate(preset("MC", table_rows=256, batch_size=64)), "silo",
                        LaunchConfig(backend="simt", wd=1, bs=2), backoff=16)
    assert res.log is None and res.commits == 64


def test_sixteen_accesses_give_seventeen_events():
    specs = [([0] * 16, list(range(16)), [k % 3 == 0 for k in range(16)])]
    for name in SCHEMES:
        h = Harness(name, specs, rows=16, workers=1)
        h.scheme.preprocess(h.batch)
        drive(run_transaction(h.ctx(0), h.scheme, h.rt))
        assert len(final_attempts(h.log.events)) + 1 == 17 == len(h.log.events), name


def test_seq_unique_across_threads():
    log = EventLog()

    def body(w):
        for _ in range(31_250):
            log.record(w, 0, READ_EV, w)

    threads = [threading.Thread(target=body, args=(w,)) for w in range(32)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    seqs = [e[0] for e in log.events]
    assert len(seqs) == 1_000_000 == len(set(seqs))


@pytest.mark.parametrize("versioned", [False, True])
def test_checkers_agree_on_random_histories(versioned):
    rng = random.Random(11 + versioned)
    verdicts = set()
    for k in range(300):
        cross = k % 4 == 0
        ev = random_history(rng, rng.randint(1, 4 if cross else 6), versioned=versioned, cross=cross)
        graph = bool(check_serializable(ev))
        brute = brute_force_serializable(ev) is not None
        assert graph == brute, ev
        if cross:
            assert not graph
        verdicts.add(graph)
    assert verdicts == {True, False}


@pytest.mark.parametrize("name", SCHEMES)
def test_scheme_histories_agree_with_brute_force(name):
    rng = random.Random(5)
    for seed in range(6):
        specs = []
        for _ in range(6):
            keys = rng.sample(range(6), 3)
            specs.append(([0] * 3, keys, [rng.random() < 0.5 for _ in keys]))
        b = make_batch(specs, WorkloadConfig(table_rows=16, batch_size=6), [TableSchema("t", 6)])
        res = execute_batch(b, name, LaunchConfig(backend="simt", wd=2, bs=2, seed=seed),
                            verify=True, backoff=16)
        order = brute_force_serializable(res.log.events)
        assert order is not None and bool(check_serializable(res.log))
