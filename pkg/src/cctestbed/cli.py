"""Experiment orchestration and the ``cctestbed`` command.

An experiment is a sweep over schemes, a wd x bs launch grid and
repetitions.  Each repetition generates its workload once and reuses it for
every cell.  Results go to one CSV (or JSON) file plus a manifest that
records the resolved configuration.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import click
import yaml

from . import __version__
from .core import LATCH_FREE, LATCHED
from .errors import CCTestbedError, ConfigError
from .executor import BACKENDS, SIMT, LaunchConfig, execute_batch
from .metrics import STAGES, report_metrics
from .schemes import ALL_SCHEMES, resolve_scheme
from .verify import check_serializable, export_log
from .workload import KINDS, PRESETS, YCSB, WorkloadConfig, generate, preset

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_RUN_ERROR = 2
EXIT_CONFIG = 3

CONFIG_COLUMNS = ("scheme", "benchmark", "W", "theta", "rows", "batch", "wd", "bs", "blocks",
                  "workers", "backend", "its_mode", "sync_mode", "seed", "rep")
METRIC_COLUMNS = (("status", "serializable", "commits", "aborts", "abort_rate", "wall_time",
                   "time_unit", "throughput")
                  + tuple(f"t_{s}" for s in STAGES)
                  + tuple(f"f_{s}" for s in STAGES) + ("f_unattributed", "error"))
COLUMNS = CONFIG_COLUMNS + METRIC_COLUMNS

SYNC_NAMES = {"latchfree": LATCH_FREE, "latch_free": LATCH_FREE, "latched": LATCHED}


@dataclass
class ExperimentSpec:
    workload: WorkloadConfig = field(default_factory=lambda: preset("MC"))
    schemes: tuple[str, ...] = ("silo",)
    wd: tuple[int, ...] = (0,)
    bs: tuple[int, ...] = (32,)
    blocks: int = 1
    backend: str = SIMT
    its_mode: bool = False
    repetitions: int = 1
    verify: bool = False
    sync_mode: str = LATCH_FREE
    output: Optional[str] = None
    fmt: str = "csv"
    backoff: int = 0
    threads: Optional[int] = None
    keep_logs: bool = False

    def __post_init__(self):
        self.schemes = tuple(self.schemes)
        self.wd = tuple(self.wd)
        self.bs = tuple(self.bs)
        for s in self.schemes:
            resolve_scheme(s)
        for v in self.wd:
            if not 0 <= v <= 5:
                raise ConfigError(f"wd={v} outside [0, 5]")
        for v in self.bs:
            if not 1 <= v <= 32:
                raise ConfigError(f"bs={v} outside [1, 32]")
        if not self.wd or not self.bs:
            raise ConfigError("empty launch grid")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.backend not in BACKENDS:
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.sync_mode not in (LATCH_FREE, LATCHED):
            raise ConfigError(f"unknown sync mode {self.sync_mode!r}")
        if self.fmt not in ("csv", "json"):
            raise ConfigError(f"unknown report format {self.fmt!r}")

    @property
    def n_cells(self) -> int:
        return len(self.schemes) * len(self.wd) * len(self.bs) * self.repetitions

    def launches(self, seed: int) -> list[LaunchConfig]:
        return [LaunchConfig(wd=w, bs=b, blocks=self.blocks, backend=self.backend,
                             its_mode=self.its_mode, seed=seed, threads=self.threads)
                for w in self.wd for b in self.bs]

    def resolved(self) -> dict:
        d = asdict(self)
        d["workload"] = asdict(self.workload)
        return d


@dataclass
class ExperimentResult:
    rows: list[dict]
    exit_code: int
    files: list[Path] = field(default_factory=list)
    violations: list[str] = field(default_factory=list)


def parse_range(text: str | int | Sequence[int]) -> tuple[int, ...]:
    """``3``, ``0-5`` or ``1,2,4`` (ranges and lists may mix: ``0-2,5``)."""
    if isinstance(text, int):
        return (text,)
    if not isinstance(text, str):
        return tuple(int(v) for v in text)
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        try:
            if sep:
                a, b = int(lo), int(hi)
                if b < a:
                    raise ConfigError(f"empty range {part!r}")
                out.extend(range(a, b + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse {part!r} as an integer range") from None
    return tuple(out)


def parse_schemes(text: str | Sequence[str]) -> tuple[str, ...]:
    names = text.split(",") if isinstance(text, str) else list(text)
    out: list[str] = []
    for n in names:
        n = n.strip().lower()
        if not n:
            continue
        if n == "all":
            out.extend(ALL_SCHEMES)
        else:
            out.append(resolve_scheme(n).name)
    return tuple(dict.fromkeys(out))


def _config_row(spec: ExperimentSpec, wl: WorkloadConfig, scheme: str, launch: LaunchConfig,
                workers: int, rep: int) -> dict:
    return {
        "scheme": scheme,
        "benchmark": wl.name,
        "W": wl.write_frac,
        "theta": wl.theta,
        "rows": wl.table_rows,
        "batch": wl.batch_size,
        "wd": launch.wd,
        "bs": launch.bs,
        "blocks": launch.blocks,
        "workers": workers,
        "backend": launch.backend,
        "its_mode": launch.its_mode,
        "sync_mode": spec.sync_mode,
        "seed": launch.seed,
        "rep": rep,
    }


def run_cell(spec: ExperimentSpec, batch, wl: WorkloadConfig, scheme: str,
             launch: LaunchConfig, rep: int, log_dir: Optional[Path] = None) -> dict:
    """Run one (scheme, launch point, repetition) cell and return its report row."""
    row = _config_row(spec, wl, scheme, launch,
                      launch.pool_size() if launch.backend != SIMT else launch.workers, rep)
    row.update({c: "" for c in METRIC_COLUMNS})
    try:
        res = execute_batch(batch, scheme, launch, sync_mode=spec.sync_mode,
                            verify=spec.verify, backoff=spec.backoff)
    except CCTestbedError as exc:
        row["status"] = type(exc).__name__
        row["error"] = str(exc)
        return row
    row.update(report_metrics(res.metrics))
    row["workers"] = res.n_workers
    row["status"] = "ok"
    leftover = res.final_state
    if leftover.get("held_locks") or leftover.get("pending_versions"):
        row["status"] = "dirty"
        row["error"] = f"run ended with {leftover}"
    if spec.verify:
        verdict = check_serializable(res.log)
        row["serializable"] = bool(verdict)
        if not verdict:
            row["status"] = "violation"
            row["error"] = verdict.describe()
        if log_dir is not None:
            export_log(res.log, log_dir / f"{scheme}_wd{launch.wd}_bs{launch.bs}_rep{rep}.events.jsonl")
    return row


def run_experiment(spec: ExperimentSpec, echo=None) -> ExperimentResult:
    """Run every cell of ``spec``; emits the report when ``spec.output`` is set.

    The exit code is non-zero iff a verification failed or a run hit a fatal
    error; a failing cell never stops the sweep.
    """
    rows: list[dict] = []
    violations: list[str] = []
    errors = 0
    out_dir = Path(spec.output) if spec.output else None
    log_dir = out_dir / "logs" if out_dir is not None and spec.keep_logs and spec.verify else None
    if log_dir is not None:
        log_dir.mkdir(parents=True, exist_ok=True)
    for rep in range(spec.repetitions):
        seed = spec.workload.seed + rep
        wl = replace(spec.workload, seed=seed)
        batch = generate(wl)
        for scheme in spec.schemes:
            for launch in spec.launches(seed):
                row = run_cell(spec, batch, wl, scheme, launch, rep, log_dir)
                rows.append(row)
                if row["status"] == "violation":
                    violations.append(f"{scheme} wd={launch.wd} bs={launch.bs} rep={rep}: {row['error']}")
                elif row["status"] != "ok":
                    errors += 1
                if echo is not None:
                    echo(_summary(row))
    code = EXIT_VIOLATION if violations else EXIT_RUN_ERROR if errors else EXIT_OK
    files = emit_report(rows, spec.fmt, out_dir, manifest=_manifest(spec)) if out_dir is not None else []
    return ExperimentResult(rows=rows, exit_code=code, files=files, violations=violations)


def _summary(row: dict) -> str:
    head = (f"{row['scheme']:<7} wd={row['wd']} bs={row['bs']:<2} rep={row['rep']} "
            f"{row['backend']}/{row['sync_mode']}")
    if row["status"] not in ("ok", "violation"):
        return f"{head}  {row['status']}: {row['error']}"
    tail = (f"commits={row['commits']} aborts={row['aborts']} "
            f"abort_rate={row['abort_rate']:.3f} throughput={row['throughput']:.1f} txn/{row['time_unit']}")
    if row["serializable"] != "":
        tail += f" serializable={row['serializable']}"
    return f"{head}  {tail}"


def _manifest(spec: ExperimentSpec) -> dict:
    return {
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "cells": spec.n_cells,
        "columns": list(COLUMNS),
        "spec": spec.resolved(),
    }


def emit_report(rows: list[dict], fmt: str = "csv", out_dir: str | Path = ".",
                manifest: Optional[dict] = None) -> list[Path]:
    """Write ``results.csv`` or ``results.json`` plus ``manifest.json``.

    CSV columns always appear in :data:`COLUMNS` order.  Raises ``OSError``
    when the directory cannot be written.
    """
    if not rows:
        raise ValueError("no rows to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    if fmt == "csv":
        path = out / "results.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(COLUMNS), extrasaction="ignore", lineterminator="\n")
            w.writeheader()
            for r in rows:
                w.writerow({c: _cell(r.get(c, "")) for c in COLUMNS})
    elif fmt == "json":
        path = out / "results.json"
        path.write_text(json.dumps([{c: r.get(c, "") for c in COLUMNS} for r in rows], indent=1))
    else:
        raise ConfigError(f"unknown report format {fmt!r}")
    files.append(path)
    mpath = out / "manifest.json"
    mpath.write_text(json.dumps(manifest or {"version": __version__}, indent=1, default=str))
    files.append(mpath)
    return files


def _cell(v: Any) -> Any:
    # repr keeps floats exact, so identical runs give identical bytes
    return repr(v) if isinstance(v, float) else v


# --------------------------------------------------------------------------
# configuration


DEFAULTS: dict[str, Any] = {
    "scheme": "silo",
    "preset": None,
    "benchmark": YCSB,
    "theta": None,
    "write_frac": None,
    "rows": None,
    "batch": None,
    "warehouses": 1,
    "wd": "0",
    "bs": "32",
    "blocks": 1,
    "backend": SIMT,
    "its": False,
    "sync": "latchfree",
    "verify": False,
    "seed": 0,
    "reps": 1,
    "out": None,
    "format": "csv",
    "paper_scale": False,
    "backoff": 0,
    "threads": None,
    "keep_logs": False,
}


def load_config(path: str | Path) -> dict:
    """Read a YAML run file whose keys mirror the long flag names."""
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    out = {}
    for k, v in data.items():
        key = str(k).replace("-", "_")
        if key not in DEFAULTS:
            raise ConfigError(f"{path}: unknown key {k!r}")
        out[key] = v
    return out


def build_spec(values: dict) -> ExperimentSpec:
    """Resolve merged option values into an :class:`ExperimentSpec`."""
    v = dict(DEFAULTS)
    v.update({k: x for k, x in values.items() if x is not None})
    overrides: dict[str, Any] = {"seed": int(v["seed"])}
    if v["rows"] is not None:
        overrides["table_rows"] = int(v["rows"])
    if v["batch"] is not None:
        overrides["batch_size"] = int(v["batch"])
    if v["benchmark"] in KINDS and v["benchmark"] != YCSB:
        wl = WorkloadConfig(kind=v["benchmark"], warehouses=int(v["warehouses"]),
                            batch_size=overrides.pop("batch_size", 1 << 16), seed=overrides["seed"])
    elif v["benchmark"] == YCSB:
        if v["theta"] is not None:
            overrides["theta"] = float(v["theta"])
        if v["write_frac"] is not None:
            overrides["write_frac"] = float(v["write_frac"])
        wl = preset(v["preset"] or "MC", paper_scale=bool(v["paper_scale"]), **overrides)
    else:
        raise ConfigError(f"unknown benchmark {v['benchmark']!r}; expected one of {KINDS}")
    sync = SYNC_NAMES.get(str(v["sync"]).lower())
    if sync is None:
        raise ConfigError(f"unknown sync mode {v['sync']!r}")
    return ExperimentSpec(
        workload=wl,
        schemes=parse_schemes(v["scheme"]),
        wd=parse_range(v["wd"]),
        bs=parse_range(v["bs"]),
        blocks=int(v["blocks"]),
        backend=str(v["backend"]),
        its_mode=bool(v["its"]),
        repetitions=int(v["reps"]),
        verify=bool(v["verify"]),
        sync_mode=sync,
        output=v["out"],
        fmt=str(v["format"]),
        backoff=int(v["backoff"]),
        threads=None if v["threads"] is None else int(v["threads"]),
        keep_logs=bool(v["keep_logs"]),
    )


@click.command(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="YAML run file; flags override its values.")
@click.option("--scheme", help="Scheme name, comma list, or 'all'.")
@click.option("--preset", type=click.Choice(sorted(PRESETS), case_sensitive=False),
              help="YCSB preset (default MC).")
@click.option("--benchmark", type=click.Choice(list(KINDS)), help="Workload family.")
@click.option("--theta", type=float, help="Zipf skew in [0, 1).")
@click.option("--write-frac", type=float, help="Write fraction W in [0, 1].")
@click.option("--rows", type=int, help="YCSB table rows.")
@click.option("--batch", type=int, help="Transactions per batch.")
@click.option("--warehouses", type=int, help="TPC-C warehouses.")
@click.option("--wd", help="Warp density: value, range 0-5 or list.")
@click.option("--bs", help="Block size: value, range 1-32 or list.")
@click.option("--blocks", type=int, help="Number of blocks.")
@click.option("--backend", type=click.Choice(list(BACKENDS)), help="Execution backend.")
@click.option("--its/--no-its", default=None, help="Independent thread scheduling (simt).")
@click.option("--sync", type=click.Choice(["latchfree", "latched"]), help="Control-word access mode.")
@click.option("--verify/--no-verify", default=None, help="Record events and check serializability.")
@click.option("--seed", type=int, help="Base seed; repetition r uses seed + r.")
@click.option("--reps", type=int, help="Repetitions per cell.")
@click.option("--out", type=click.Path(file_okay=False), help="Report directory.")
@click.option("--format", "format", type=click.Choice(["csv", "json"]), help="Report format.")
@click.option("--paper-scale/--desk-scale", "paper_scale", default=None,
              help="Use full-size preset tables and batches.")
@click.option("--backoff", type=int, help="Cap on randomised post-abort pause (steps); 0 = off.")
@click.option("--threads", type=int, help="Thread cap for the threaded backend (else CC_ARENA_THREADS).")
@click.option("--keep-logs/--no-keep-logs", default=None, help="Write event logs next to the report.")
@click.option("--quiet", is_flag=True, help="Only print the final summary.")
@click.version_option(__version__)
def main(config_path: Optional[str], quiet: bool, **flags) -> None:
    """Run a concurrency-control experiment and write its report."""
    try:
        values = load_config(config_path) if config_path else {}
        values.update({k: v for k, v in flags.items() if v is not None})
        spec = build_spec(values)
    except (ConfigError, OSError, yaml.YAMLError) as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    result = run_experiment(spec, echo=None if quiet else click.echo)
    for v in result.violations:
        click.echo(f"VIOLATION {v}", err=True)
    for f in result.files:
        click.echo(f"wrote {f}")
    bad = sum(1 for r in result.rows if r["status"] != "ok")
    click.echo(f"{len(result.rows)} cells, {bad} failed")
    sys.exit(result.exit_code)


if __name__ == "__main__":
    main()
