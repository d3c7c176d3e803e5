"""Scheme registry: maps configuration names to scheme classes."""

from __future__ import annotations

from .core import Runtime, Scheme, TxContext, payload_for
from .deterministic import GPUTx, GaccO
from .errors import ConfigError
from .metrics import USEFUL
from .optimistic import Silo, TicToc
from .pessimistic import MultiVersion, TimestampOrdering, TplNoWait, TplWaitDie
from .verify import READ_EV, WRITE_EV


class NoControl(Scheme):
    """Negative control: reads and writes in place with no isolation at all."""

    name = "broken"

    def read_row(self, ctx: TxContext, i: int, tid: int):
        self.db.read(tid)
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, READ_EV, tid)
        yield USEFUL
        return True

    def write_row(self, ctx: TxContext, i: int, tid: int):
        self.db.write(tid, payload_for(ctx.txn.txn_id, ctx.attempt))
        if self.log is not None:
            self.log.record(ctx.txn.txn_id, ctx.attempt, WRITE_EV, tid)
        yield USEFUL
        return True

    def tx_end(self, ctx: TxContext):
        return True
        yield


SCHEMES: dict[str, type[Scheme]] = {
    "tpl_nw": TplNoWait,
    "tpl_wd": TplWaitDie,
    "to": TimestampOrdering,
    "mvcc": MultiVersion,
    "silo": Silo,
    "tictoc": TicToc,
    "gputx": GPUTx,
    "gacco": GaccO,
}
CPU_SCHEMES = ("tpl_nw", "tpl_wd", "to", "mvcc", "silo", "tictoc")
DETERMINISTIC_SCHEMES = ("gputx", "gacco")
ALL_SCHEMES = tuple(SCHEMES)
EXTRA_SCHEMES: dict[str, type[Scheme]] = {"broken": NoControl}


def resolve_scheme(name: str) -> type[Scheme]:
    key = name.lower().replace("-", "_")
    if key in SCHEMES:
        return SCHEMES[key]
    if key in EXTRA_SCHEMES:
        return EXTRA_SCHEMES[key]
    raise ConfigError(f"unknown scheme {name!r}; choose from {', '.join(ALL_SCHEMES)}")


def make_scheme(name: str, rt: Runtime, **options) -> Scheme:
    cls = resolve_scheme(name)
    return cls(rt, **options)
