"""Batch execution backends.

``threaded`` runs every worker as an OS thread against shared atomic words.
``simt`` is a deterministic single-threaded simulator: workers are lanes
grouped into warps, and the same scheme generators are stepped one abstract
operation at a time under either strict lockstep or independent thread
scheduling.
"""

from __future__ import annotations

import gc
import os
import random
import sys
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .core import LATCH_FREE, Runtime, Scheme, TxContext, WorkerState, run_transaction
from .errors import ConfigError, WatchdogTimeout
from .metrics import ABORT, RECONVERGE, SPIN, WAIT, MetricsBreakdown
from .schemes import make_scheme
from .verify import EventLog
from .workload import Batch

THREADED = "threaded"
SIMT = "simt"
BACKENDS = (THREADED, SIMT)
THREADS_ENV = "CC_ARENA_THREADS"
# default event-log bound, in multiples of one clean pass over the batch;
# heavily retried runs under tpl_nw reach about 15
LOG_MULTIPLE = 64


@dataclass
class LaunchConfig:
    wd: int = 0
    bs: int = 32
    blocks: int = 1
    backend: str = SIMT
    its_mode: bool = False
    seed: int = 0
    # threaded backend: pool cap (None reads CC_ARENA_THREADS) and the
    # interpreter switch interval used while the batch runs
    threads: Optional[int] = None
    switch_interval: float = 5e-3
    # pause per poll of a wait loop, and after each abort; a real sleep lets
    # the awaited (or conflicting) thread run
    wait_sleep: float = 5e-5
    abort_pause: float = 5e-5
    # no-commit budgets: seconds (threaded) or scheduler rounds (simt)
    watchdog_s: float = 60.0
    watchdog_rounds: int = 20_000

    def __post_init__(self):
        if not 0 <= self.wd <= 5:
            raise ConfigError(f"wd={self.wd} outside [0, 5]")
        if not 1 <= self.bs <= 32:
            raise ConfigError(f"bs={self.bs} outside [1, 32]")
        if self.blocks < 1:
            raise ConfigError("blocks must be >= 1")
        if self.wait_sleep < 0 or self.abort_pause < 0:
            raise ConfigError("wait_sleep and abort_pause must be >= 0")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")

    @property
    def lanes_per_warp(self) -> int:
        return 1 << self.wd

    @property
    def workers(self) -> int:
        return self.blocks * self.bs * self.lanes_per_warp

    def pool_size(self) -> int:
        cap = self.threads
        if cap is None and os.environ.get(THREADS_ENV):
            cap = int(os.environ[THREADS_ENV])
        return self.workers if cap is None else max(1, min(cap, self.workers))


@dataclass
class RunResult:
    scheme: str
    launch: LaunchConfig
    sync_mode: str
    metrics: MetricsBreakdown
    restarts: list[int]
    log: Optional[EventLog]
    final_state: dict
    preprocess: float = 0.0
    n_workers: int = 0

    @property
    def aborts(self) -> int:
        return self.metrics.aborts

    @property
    def commits(self) -> int:
        return self.metrics.commits


def assign(txn_ids: list[int], n_workers: int) -> list[list[int]]:
    """Strided assignment: worker ``w`` runs ids ``w, w+n, w+2n, ...`` in order."""
    return [txn_ids[w::n_workers] for w in range(n_workers)]


# --------------------------------------------------------------------------
# threaded backend


def _drive(gen, clock, rt: Runtime, pause: float = 0.0, abort_pause: float = 0.0) -> int:
    """Step one transaction's generator, charging wall time to stages.

    Waits hand the interpreter to other threads.  So does the retry-loop
    tail after an abort, which keeps a failed worker from spinning through
    attempts while the transaction it conflicts with sits descheduled.
    """
    perf = time.perf_counter
    sleep = time.sleep
    attempt = clock.attempt
    seen_aborts = clock.aborts
    last = perf()
    try:
        while True:
            stage = next(gen)
            now = perf()
            attempt[stage] += now - last
            if stage == WAIT or stage == SPIN or stage == ABORT:
                if rt.stop:
                    raise WatchdogTimeout("worker stopped by watchdog")
                sleep(pause)
                after = perf()
                attempt[stage if stage == ABORT else WAIT] += after - now
                now = after
            elif stage == RECONVERGE:
                if rt.stop:
                    raise WatchdogTimeout("worker stopped by watchdog")
                if clock.aborts != seen_aborts:
                    seen_aborts = clock.aborts
                    sleep(abort_pause)
                    after = perf()
                    clock.stages[ABORT] += after - now
                    now = after
            last = now
    except StopIteration as done:
        return done.value


def _run_threaded(rt: Runtime, scheme: Scheme, batch: Batch, phases: list[list[list[int]]],
                  launch: LaunchConfig, restarts: list[int]) -> float:
    workers = rt.workers
    errors: list[BaseException] = []

    def body(w: int, ids: list[int]) -> None:
        worker = workers[w]
        clock = worker.clock
        start = time.perf_counter()
        try:
            for t in ids:
                ctx = TxContext(batch.txns[t], worker)
                restarts[t] = _drive(run_transaction(ctx, scheme, rt), clock, rt,
                                     launch.wait_sleep, launch.abort_pause)
        except BaseException as exc:  # surfaced by the coordinator
            errors.append(exc)
            rt.stop = True
        finally:
            clock.elapsed += time.perf_counter() - start

    old_interval = sys.getswitchinterval()
    sys.setswitchinterval(launch.switch_interval)
    # a collector pass inside the timed region would land on whichever run
    # happens to cross the threshold
    gc_was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    t0 = time.perf_counter()
    try:
        for assignment in phases:
            threads = [threading.Thread(target=body, args=(w, ids), daemon=True)
                       for w, ids in enumerate(assignment) if ids]
            for th in threads:
                th.start()
            last_commits = -1
            last_change = time.perf_counter()
            while any(th.is_alive() for th in threads):
                threads[0].join(0.05) if threads[0].is_alive() else time.sleep(0.05)
                commits = sum(w.clock.commits for w in workers)
                now = time.perf_counter()
                if commits != last_commits:
                    last_commits, last_change = commits, now
                elif now - last_change > launch.watchdog_s and not rt.stop:
                    rt.stop = True
            for th in threads:
                th.join()
            if errors:
                raise errors[0]
    finally:
        sys.setswitchinterval(old_interval)
        if gc_was_enabled:
            gc.enable()
    return time.perf_counter() - t0


# --------------------------------------------------------------------------
# SIMT simulator


class Lane:
    __slots__ = ("index", "gen", "label", "parked", "done", "clock", "finished_at")

    def __init__(self, index: int, gen, clock):
        self.index = index
        self.gen = gen
        self.label = -1
        self.parked = False
        self.done = False
        self.clock = clock
        self.finished_at = 0


class Warp:
    __slots__ = ("index", "lanes", "rr")

    def __init__(self, index: int, lanes: list[Lane]):
        self.index = index
        self.lanes = lanes
        self.rr = 0


class SimtMachine:
    """Deterministic lockstep scheduler over lane generators.

    Each round visits every live warp once in a seeded random order; a visit
    advances a subset of the warp's lanes by one step.

    Strict lockstep:

    - lanes whose last step was a spin-loop iteration keep the warp to
      themselves (the loop runs until its exit branch is taken);
    - otherwise lanes are grouped by the stage of their last step and the
      groups take turns, one group per visit;
    - a lane that reaches the reconvergence point waits there until every
      live lane of its warp has arrived.

    With ``its_mode`` every live lane advances on every visit.
    """

    def __init__(self, programs: list, lanes_per_warp: int, its_mode: bool = False,
                 seed: int = 0, clocks: Optional[list] = None, watchdog_rounds: int = 20_000,
                 progress: Optional[Callable[[], int]] = None):
        self.its_mode = its_mode
        self.rng = random.Random(seed)
        self.watchdog_rounds = watchdog_rounds
        self.round = 0
        self.lanes: list[Lane] = []
        for i, prog in enumerate(programs):
            clock = clocks[i] if clocks is not None else None
            lane = Lane(i, prog, clock)
            if prog is None:
                lane.done = True
            self.lanes.append(lane)
        self.warps = [Warp(k, self.lanes[s:s + lanes_per_warp])
                      for k, s in enumerate(range(0, len(self.lanes), lanes_per_warp))]
        self._progress = progress
        self.finished = sum(1 for lane in self.lanes if lane.done)

    def progress(self) -> int:
        base = self._progress() if self._progress is not None else 0
        return base + self.finished

    def _advance(self, lane: Lane) -> None:
        try:
            label = next(lane.gen)
            if label == RECONVERGE:
                if self.its_mode:
                    label = next(lane.gen)
                    while label == RECONVERGE:
                        label = next(lane.gen)
                else:
                    lane.parked = True
                    lane.label = RECONVERGE
                    return
            lane.label = label
            if lane.clock is not None:
                lane.clock.attempt[label] += 1
        except StopIteration:
            lane.done = True
            lane.parked = False
            lane.finished_at = self.round + 1
            self.finished += 1

    def simt_step(self, warp: Warp) -> bool:
        """Advance one warp by one step; False when it has no live lane."""
        live = [lane for lane in warp.lanes if not lane.done]
        if not live:
            return False
        advance = self._advance
        if self.its_mode or len(live) == 1:
            for lane in live:
                lane.parked = False
                advance(lane)
            return True
        active = [lane for lane in live if not lane.parked]
        if not active:
            for lane in live:
                lane.parked = False
            active = live
        spinning = [lane for lane in active if lane.label == SPIN]
        if spinning:
            chosen = spinning
        else:
            first = active[0].label
            if all(lane.label == first for lane in active):
                chosen = active
            else:
                labels = sorted({lane.label for lane in active})
                pick = labels[warp.rr % len(labels)]
                warp.rr += 1
                chosen = [lane for lane in active if lane.label == pick]
        for lane in chosen:
            advance(lane)
        return True

    def run(self) -> int:
        """Run until every lane finishes; returns the number of rounds."""
        warps = self.warps
        n = len(warps)
        # a fixed pool of visit orders; each round draws one
        orders = []
        for _ in range(64):
            order = list(range(n))
            self.rng.shuffle(order)
            orders.append(order)
        draw = self.rng.getrandbits
        live = [sum(1 for l in w.lanes if not l.done) for w in warps]
        n_live = sum(1 for c in live if c)
        last = self.progress()
        last_round = self.round
        single = all(len(w.lanes) == 1 for w in warps)
        lanes = self.lanes
        attempts = [l.clock.attempt if l.clock is not None else [0] * 9 for l in lanes]
        step = self.simt_step
        while n_live:
            order = orders[draw(6)]
            if single:
                # one lane per warp: lockstep and independent scheduling coincide
                for k in order:
                    if not live[k]:
                        continue
                    lane = lanes[k]
                    gen = lane.gen
                    try:
                        label = next(gen)
                        while label == RECONVERGE:
                            label = next(gen)
                        lane.label = label
                        attempts[k][label] += 1
                    except StopIteration:
                        lane.done = True
                        lane.finished_at = self.round + 1
                        self.finished += 1
                        live[k] = 0
                        n_live -= 1
            else:
                for k in order:
                    if live[k]:
                        step(warps[k])
                        c = sum(1 for l in warps[k].lanes if not l.done)
                        if c != live[k]:
                            live[k] = c
                            if not c:
                                n_live -= 1
            self.round += 1
            if self.round & 63 == 0 or not n_live:
                p = self.progress()
                if p != last:
                    last, last_round = p, self.round
                elif self.round - last_round > self.watchdog_rounds:
                    raise WatchdogTimeout(
                        f"no progress for {self.round - last_round} rounds")
        return self.round


def simt_step(machine: SimtMachine, warp: Warp) -> bool:
    return machine.simt_step(warp)


def _lane_program(ids: list[int], batch: Batch, scheme: Scheme, rt: Runtime,
                  worker: WorkerState, restarts: list[int]):
    for t in ids:
        ctx = TxContext(batch.txns[t], worker)
        restarts[t] = yield from run_transaction(ctx, scheme, rt)


def _run_simt(rt: Runtime, scheme: Scheme, batch: Batch, phases: list[list[list[int]]],
              launch: LaunchConfig, restarts: list[int]) -> int:
    clocks = [w.clock for w in rt.workers]
    rounds = 0

    def commits() -> int:
        return sum(c.commits for c in clocks)

    for k, assignment in enumerate(phases):
        programs = [
            _lane_program(ids, batch, scheme, rt, rt.workers[w], restarts) if ids else None
            for w, ids in enumerate(assignment)
        ]
        m = SimtMachine(programs, launch.lanes_per_warp, launch.its_mode,
                        seed=(launch.seed * 1_000_003 + k) & 0xFFFFFFFF, clocks=clocks,
                        watchdog_rounds=launch.watchdog_rounds, progress=commits)
        m.run()
        for lane in m.lanes:
            clocks[lane.index].elapsed += lane.finished_at
        rounds += m.round
    return rounds


# --------------------------------------------------------------------------


def execute_batch(batch: Batch, scheme: str = "silo", launch: Optional[LaunchConfig] = None,
                  sync_mode: str = LATCH_FREE, verify: bool = False, log_capacity: Optional[int] = None,
                  backoff: int = 0, scheme_options: Optional[dict] = None) -> RunResult:
    """Run ``batch`` to completion under ``scheme``.

    Every transaction retries until it commits.  With ``verify`` the run
    records an event log for :func:`check_serializable`.
    """
    launch = launch or LaunchConfig()
    threaded = launch.backend == THREADED
    n_workers = launch.pool_size() if threaded else launch.workers
    db = batch.make_database()
    if verify and log_capacity is None:
        log_capacity = LOG_MULTIPLE * (sum(len(t) for t in batch.txns) + len(batch)) + 1024
    log = EventLog(log_capacity) if verify else None
    rt = Runtime(db, batch, concurrent=threaded, sync_mode=sync_mode, log=log,
                 n_workers=n_workers, seed=launch.seed)
    rt.backoff = backoff
    sch = make_scheme(scheme, rt, **(scheme_options or {}))

    t0 = time.perf_counter()
    steps = sch.preprocess(batch)
    pre = time.perf_counter() - t0 if threaded else float(steps)
    phases = [assign(ids, n_workers) for ids in sch.phases(batch)]
    per_worker = [[t for ph in phases for t in ph[w]] for w in range(n_workers)]
    sch.setup_workers(per_worker)

    restarts = [0] * len(batch)
    if threaded:
        wall = _run_threaded(rt, sch, batch, phases, launch, restarts) + pre
        unit = "s"
    else:
        wall = float(_run_simt(rt, sch, batch, phases, launch, restarts)) + pre
        unit = "steps"
    metrics = MetricsBreakdown.merge([w.clock for w in rt.workers], len(batch), wall,
                                     unit=unit, preprocess=pre)
    return RunResult(
        scheme=sch.name,
        launch=launch,
        sync_mode=sync_mode,
        metrics=metrics,
        restarts=restarts,
        log=log,
        final_state=sch.finalize(),
        preprocess=pre,
        n_workers=n_workers,
    )


# --------------------------------------------------------------------------
# the lockstep spin-lock hazard


def spin_hazard_programs(n_lanes: int = 2, release_in_loop: bool = False, rounds: int = 1):
    """Lanes of one warp competing for one spin lock.

    With ``release_in_loop`` False the critical section and release follow
    the acquire loop, the idiom that stalls under strict lockstep: the spin
    loop keeps the warp while the holder waits to reach its release.  With it
    True the whole section sits in the loop body and completes either way.
    """
    from .storage import LocalWords, SpinLock

    lock = SpinLock(LocalWords(1))
    from .metrics import CC, USEFUL

    def critical(owner: int):
        for _ in range(rounds):
            if release_in_loop:
                while True:
                    if lock.try_acquire(0, owner):
                        yield USEFUL
                        lock.release(0, owner)
                        yield CC
                        break
                    # a divergent branch of the same loop body, not a tight spin
                    yield WAIT
            else:
                while not lock.try_acquire(0, owner):
                    yield SPIN
                yield CC
                yield USEFUL
                lock.release(0, owner)
                yield CC

    return lock, [critical(i) for i in range(n_lanes)]


def run_spin_hazard(its_mode: bool, n_lanes: int = 2, release_in_loop: bool = False,
                    watchdog_rounds: int = 1000) -> int:
    """Run the spin-lock scenario in one warp; returns rounds or raises WatchdogTimeout."""
    _, programs = spin_hazard_programs(n_lanes, release_in_loop)
    m = SimtMachine(programs, lanes_per_warp=max(1, n_lanes), its_mode=its_mode,
                    watchdog_rounds=watchdog_rounds)
    return m.run()
