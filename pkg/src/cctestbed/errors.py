"""Exception types shared across the testbed."""

from __future__ import annotations


class CCTestbedError(Exception):
    pass


class ConfigError(CCTestbedError, ValueError):
    pass


class KeyNotFound(CCTestbedError, KeyError):
    pass


class TimestampOverflow(CCTestbedError):
    """A timestamp no longer fits the control-word field of the active scheme.

    Run-fatal: the run is reported as invalid.
    """


class VersionExhausted(CCTestbedError):
    pass


class WatchdogTimeout(CCTestbedError):
    """No transaction committed within the configured progress budget."""


class LogCapacityExceeded(CCTestbedError):
    pass


class MalformedLog(CCTestbedError):
    pass
