"""Stage-level time accounting and derived run metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

# Stage ids.  Scheme code yields one of these per abstract step; the backend
# charges the elapsed time (or one step) to it.
PREPROCESS, CC, WAIT, INDEX, TS_ALLOC, ABORT, USEFUL = range(7)
# A spin-lock loop iteration; accounted as WAIT.
SPIN = 7
# A reconvergence point at the tail of the retry loop; carries no cost.
RECONVERGE = 8

STAGES = ("preprocess", "cc_manager", "wait", "index", "ts_alloc", "abort", "useful")
N_STAGES = len(STAGES)


class WorkerClock:
    """Per-worker accumulator.

    ``attempt`` collects the running attempt's charges (indexed by yielded
    stage id); :meth:`close_attempt` folds it into ``stages`` once the attempt
    commits or aborts.  An aborted attempt's time goes to the abort stage,
    except for its timestamp allocation, which stays in ``ts_alloc``.
    """

    __slots__ = ("worker_id", "stages", "attempt", "commits", "aborts", "elapsed")

    def __init__(self, worker_id: int = 0):
        self.worker_id = worker_id
        self.stages = [0.0] * N_STAGES
        self.attempt = [0.0] * 9
        self.commits = 0
        self.aborts = 0
        self.elapsed = 0.0

    def close_attempt(self, committed: bool) -> None:
        a = self.attempt
        s = self.stages
        a[WAIT] += a[SPIN]
        s[TS_ALLOC] += a[TS_ALLOC]
        s[PREPROCESS] += a[PREPROCESS]
        if committed:
            s[CC] += a[CC]
            s[WAIT] += a[WAIT]
            s[INDEX] += a[INDEX]
            s[USEFUL] += a[USEFUL]
            s[ABORT] += a[ABORT]
            self.commits += 1
        else:
            s[ABORT] += a[CC] + a[WAIT] + a[INDEX] + a[USEFUL] + a[ABORT]
            self.aborts += 1
        for i in range(9):
            a[i] = 0.0


def accumulate_stage(clock: WorkerClock, stage: int, duration: float) -> None:
    clock.attempt[stage] += duration


@dataclass
class MetricsBreakdown:
    batch_size: int
    stages: dict[str, float] = field(default_factory=lambda: {s: 0.0 for s in STAGES})
    commits: int = 0
    aborts: int = 0
    wall_time: float = 0.0
    # "s" for the threaded backend, "steps" for the simulator
    unit: str = "s"
    worker_elapsed: list[float] = field(default_factory=list)
    worker_stage_sums: list[float] = field(default_factory=list)

    @classmethod
    def merge(cls, clocks: Iterable[WorkerClock], batch_size: int, wall_time: float,
              unit: str = "s", preprocess: float = 0.0) -> "MetricsBreakdown":
        m = cls(batch_size=batch_size, wall_time=wall_time, unit=unit)
        for c in clocks:
            for name, v in zip(STAGES, c.stages):
                m.stages[name] += v
            m.commits += c.commits
            m.aborts += c.aborts
            m.worker_elapsed.append(c.elapsed)
            m.worker_stage_sums.append(sum(c.stages))
        m.stages["preprocess"] += preprocess
        return m

    @property
    def abort_rate(self) -> float:
        """Aborts per committed transaction; exceeds 1 under heavy retry."""
        return self.aborts / self.commits if self.commits else 0.0

    @property
    def throughput(self) -> float:
        return self.batch_size / self.wall_time if self.wall_time > 0 else 0.0

    def fractions(self) -> dict[str, float]:
        total = sum(self.stages.values())
        if total <= 0:
            return {s: 0.0 for s in STAGES} | {"unattributed": 1.0}
        out = {s: v / total for s, v in self.stages.items()}
        # attributed time relative to total worker time; the rest is scheduling slack
        busy = sum(self.worker_elapsed) + self.stages["preprocess"]
        out["unattributed"] = max(0.0, 1.0 - total / busy) if busy > 0 else 0.0
        scale = 1.0 - out["unattributed"]
        for s in STAGES:
            out[s] *= scale
        return out

    def as_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "commits": self.commits,
            "aborts": self.aborts,
            "abort_rate": self.abort_rate,
            "wall_time": self.wall_time,
            "unit": self.unit,
            "throughput": self.throughput,
            "stages": dict(self.stages),
            "fractions": self.fractions(),
        }


def report_metrics(m: MetricsBreakdown) -> dict:
    """Flat report record: throughput, abort rate and normalised stage shares."""
    rec = {
        "commits": m.commits,
        "aborts": m.aborts,
        "abort_rate": m.abort_rate,
        "wall_time": m.wall_time,
        "time_unit": m.unit,
        "throughput": m.throughput,
    }
    for s in STAGES:
        rec[f"t_{s}"] = m.stages[s]
    for s, v in m.fractions().items():
        rec[f"f_{s}"] = v
    return rec
