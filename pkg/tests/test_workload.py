from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cctestbed.errors import ConfigError
from cctestbed.executor import LaunchConfig, execute_batch
from cctestbed.workload import (TPCC_NEWORDER, TPCC_PAYMENT, WorkloadConfig, ZipfSampler, dump_batch,
                                generate, harmonic, load_batch, preset)


def test_presets_resolve():
    assert (preset("RO").write_frac, preset("RO").theta) == (0.0, 0.0)
    assert (preset("mc").write_frac, preset("MC").theta) == (0.1, 0.6)
    assert (preset("HC").write_frac, preset("HC").theta) == (0.5, 0.8)
    assert preset("MC").table_rows == 1 << 17 and preset("MC").batch_size == 1 << 16
    big = preset("MC", paper_scale=True)
    assert big.table_rows == (1 << 20) * 10 and big.batch_size == 1 << 20
    with pytest.raises(ConfigError):
        preset("XX")


@pytest.mark.parametrize("bad", [dict(theta=1.0), dict(theta=-0.1), dict(write_frac=1.5), dict(kind="nope")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        WorkloadConfig(**bad)


def test_zipf_uniform_limit():
    s = ZipfSampler(4, 0.0, seed=3)
    freq = np.bincount(s.sample(200_000), minlength=4) / 200_000
    assert np.allclose(freq, 0.25, atol=0.01)


def test_zipf_single_key():
    assert set(ZipfSampler(1, 0.7, seed=1).sample(1000).tolist()) == {0}


def test_zipf_hottest_matches_harmonic():
    s = ZipfSampler(1000, 0.6, seed=11)
    x = s.sample(200_000)
    hot = np.mean(x == s.hottest_key())
    expect = 1.0 / harmonic(1000, 0.6)
    assert abs(hot - expect) / expect < 0.05


def test_harmonic_oracle():
    assert harmonic(3, 0.0) == 3
    assert harmonic(4, 1.0) == pytest.approx(1 + 1 / 2 + 1 / 3 + 1 / 4)


@settings(max_examples=20, deadline=None)
@given(n=st.integers(1, 5000), theta=st.floats(0, 0.99), seed=st.integers(0, 2**31))
def test_zipf_in_range(n, theta, seed):
    x = ZipfSampler(n, theta, seed=seed).sample(500)
    assert x.min() >= 0 and x.max() < n


def test_ycsb_batches():
    b = generate(preset("RO", table_rows=4096, batch_size=300))
    assert len(b) == 300
    assert all(len(t) == 16 and len(set(t.keys)) == 16 for t in b)
    assert all(t.read_only for t in b)
    w = generate(WorkloadConfig(write_frac=1.0, table_rows=256, batch_size=50))
    assert all(all(t.writes) for t in w)


def test_mc_write_fraction_concentrates():
    b = generate(preset("MC", table_rows=1 << 15, batch_size=100_000 // 16 + 1))
    frac = b.write_count / sum(len(t) for t in b)
    assert abs(frac - 0.1) <= 0.005


def test_generation_is_seeded():
    a = generate(preset("HC", table_rows=1024, batch_size=64, seed=5))
    b = generate(preset("HC", table_rows=1024, batch_size=64, seed=5))
    c = generate(preset("HC", table_rows=1024, batch_size=64, seed=6))
    assert [t.keys for t in a] == [t.keys for t in b]
    assert [t.keys for t in a] != [t.keys for t in c]


def test_payment_hits_single_warehouse():
    b = generate(WorkloadConfig(kind=TPCC_PAYMENT, warehouses=1, batch_size=40))
    for t in b:
        acc = t.accesses
        assert acc[0].table == "warehouse" and acc[0].key == 0 and acc[0].mode == "write"


def test_neworder_orderlines_are_private():
    b = generate(WorkloadConfig(kind=TPCC_NEWORDER, warehouses=2, batch_size=30, seed=2))
    seen = set()
    for t in b:
        ols = [a.key for a in t.accesses if a.table == "order_line"]
        assert all(t.txn_id * 15 <= k < (t.txn_id + 1) * 15 for k in ols)
        assert not seen & set(ols)
        seen |= set(ols)
    one = generate(WorkloadConfig(kind=TPCC_NEWORDER, batch_size=1))
    assert all(a.mode == "write" for a in one[0].accesses if a.table == "order_line")


def test_more_warehouses_fewer_aborts():
    def rate(w):
        b = generate(WorkloadConfig(kind=TPCC_PAYMENT, warehouses=w, batch_size=512, seed=1))
        return execute_batch(b, "tpl_nw", LaunchConfig(backend="simt", wd=0, bs=32)).metrics.abort_rate
    assert rate(64) < rate(1)


def test_dump_load_roundtrip(tmp_path):
    for cfg in (preset("MC", table_rows=512, batch_size=20),
                WorkloadConfig(kind=TPCC_NEWORDER, warehouses=2, batch_size=10)):
        b = generate(cfg)
        p = tmp_path / f"{cfg.kind}.bin"
        dump_batch(b, p)
        r = load_batch(p)
        assert r.config == b.config and r.table_names == b.table_names
        assert [(t.tables, t.keys, t.writes) for t in r] == [(t.tables, t.keys, t.writes) for t in b]
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"garbage" * 10)
    with pytest.raises(ConfigError):
        load_batch(bad)
