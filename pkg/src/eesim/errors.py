"""Exception types shared across the simulator."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid configuration. Carries the offending field name when known."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class TraceParseError(ValueError):
    """Malformed trace file record."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class TraceValidationError(ValueError):
    """Trace record parsed but violates a request invariant."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class NotProfiledError(RuntimeError):
    """A latency estimate was requested before any sample was recorded."""


class SimInvariantError(RuntimeError):
    """Internal simulator invariant violated; aborts the run."""


class CapacityError(SimInvariantError):
    """KV capacity cannot be met even after evicting everything evictable."""
