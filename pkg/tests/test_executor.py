from __future__ import annotations

import pytest

from cctestbed.core import LATCH_FREE, LATCHED
from cctestbed.deterministic import GaccO
from cctestbed.errors import ConfigError, WatchdogTimeout
from cctestbed.executor import LaunchConfig, assign, execute_batch, run_spin_hazard
from cctestbed.schemes import CPU_SCHEMES, SCHEMES
from cctestbed.verify import check_serializable
from cctestbed.workload import generate, preset

SMALL = dict(table_rows=512, batch_size=256)


def _mc(seed=0, **kw):
    return generate(preset("MC", **(SMALL | {"seed": seed} | kw)))


VARIANTS = [(n, LATCH_FREE) for n in SCHEMES] + [(n, LATCHED) for n in CPU_SCHEMES]


@pytest.mark.parametrize("backend", ["simt", "threaded"])
@pytest.mark.parametrize("name,sync", VARIANTS)
def test_every_scheme_serializable(name, sync, backend):
    b = generate(preset("HC", **SMALL))
    res = execute_batch(b, name, LaunchConfig(backend=backend, wd=0, bs=8), sync_mode=sync, verify=True)
    assert res.commits == len(b)
    assert res.final_state == {"held_locks": 0, "pending_versions": 0}
    assert check_serializable(res.log), check_serializable(res.log).describe()
    assert sum(res.restarts) == res.aborts


def test_launch_config_validation():
    assert LaunchConfig(wd=0, bs=32).workers == 32
    assert LaunchConfig(wd=5, bs=32, blocks=2).workers == 2048
    assert LaunchConfig(wd=3, bs=4).lanes_per_warp == 8
    for bad in (dict(wd=6), dict(wd=-1), dict(bs=0), dict(bs=33), dict(blocks=0),
                dict(backend="gpu"), dict(wait_sleep=-1.0), dict(abort_pause=-1.0)):
        with pytest.raises(ConfigError):
            LaunchConfig(**bad)


def test_pool_size_cap(monkeypatch):
    monkeypatch.delenv("CC_ARENA_THREADS", raising=False)
    assert LaunchConfig(wd=2, bs=4).pool_size() == 16
    assert LaunchConfig(wd=2, bs=4, threads=3).pool_size() == 3
    monkeypatch.setenv("CC_ARENA_THREADS", "5")
    assert LaunchConfig(wd=2, bs=4).pool_size() == 5
    assert LaunchConfig(wd=0, bs=2).pool_size() == 2


def test_strided_assignment():
    assert assign(list(range(7)), 3) == [[0, 3, 6], [1, 4], [2, 5]]


def test_simt_runs_are_reproducible():
    b = _mc(seed=4)
    runs = [execute_batch(b, "tictoc", LaunchConfig(wd=2, bs=4, seed=4), verify=True, backoff=8)
            for _ in range(2)]
    a, c = runs
    assert a.restarts == c.restarts and a.log.events == c.log.events
    assert a.metrics.as_dict() == c.metrics.as_dict()


@pytest.mark.parametrize("its", [False, True])
def test_simt_warp_modes_complete(its):
    b = _mc()
    for name in ("tpl_nw", "to", "gacco"):
        res = execute_batch(b, name, LaunchConfig(wd=3, bs=2, its_mode=its), verify=True)
        assert res.commits == len(b) and check_serializable(res.log)


def test_strict_lockstep_livelock_and_backoff():
    b = generate(preset("HC", table_rows=256, batch_size=256, seed=1))
    launch = LaunchConfig(wd=2, bs=2, watchdog_rounds=2000)
    with pytest.raises(WatchdogTimeout):
        execute_batch(b, "silo", launch)
    res = execute_batch(b, "silo", launch, backoff=32, verify=True)
    assert res.commits == len(b) and check_serializable(res.log)
    assert res.metrics.stages["abort"] > 0


def test_spin_hazard():
    with pytest.raises(WatchdogTimeout):
        run_spin_hazard(its_mode=False, n_lanes=2)
    assert run_spin_hazard(its_mode=True, n_lanes=2) > 0
    assert run_spin_hazard(its_mode=False, n_lanes=2, release_in_loop=True) > 0
    # a lone lane has nobody to starve
    assert run_spin_hazard(its_mode=False, n_lanes=1) > 0


def _stuck_gacco(monkeypatch):
    orig = GaccO.preprocess

    def preprocess(self, batch):
        n = orig(self, batch)
        self.slot = [s + 1 for s in self.slot]  # every turn is one past reachable
        return n

    monkeypatch.setattr(GaccO, "preprocess", preprocess)


def test_watchdog_simt(monkeypatch):
    _stuck_gacco(monkeypatch)
    with pytest.raises(WatchdogTimeout):
        execute_batch(_mc(), "gacco", LaunchConfig(wd=1, bs=2, watchdog_rounds=500))


def test_watchdog_threaded(monkeypatch):
    _stuck_gacco(monkeypatch)
    with pytest.raises(WatchdogTimeout):
        execute_batch(_mc(), "gacco", LaunchConfig(backend="threaded", wd=1, bs=2, watchdog_s=0.5))


@pytest.mark.parametrize("name", list(SCHEMES))
def test_read_only_threaded_never_aborts(name):
    b = generate(preset("RO", table_rows=256, batch_size=512, theta=0.9))
    res = execute_batch(b, name, LaunchConfig(backend="threaded", wd=2, bs=2))
    assert res.aborts == 0 and res.commits == len(b)


def test_stage_fractions_cover_worker_time():
    for backend in ("simt", "threaded"):
        res = execute_batch(generate(preset("HC", **SMALL)), "tpl_wd", LaunchConfig(backend=backend, wd=1, bs=4))
        fr = res.metrics.fractions()
        assert sum(fr.values()) == pytest.approx(1.0)
        assert fr["useful"] > 0 and min(fr.values()) >= 0
    m = res.metrics
    assert m.abort_rate == m.aborts / m.commits and m.throughput == len(res.restarts) / m.wall_time
