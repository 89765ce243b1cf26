"""Request traces for the simulator.

Requests carry exogenous per-token, per-ramp confidence values, so every
exit decision downstream is a deterministic function of the trace. Traces
are either generated synthetically (seeded) or loaded from a JSONL file.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, TraceParseError, TraceValidationError

TRACE_KEYS = {"id", "arrival_ms", "prompt_len", "max_output_len", "sla_rct_ms", "confidences"}


@dataclass(frozen=True)
class Request:
    """One inference job.

    ``confidences[t][r]`` is the exit-ramp confidence for output token ``t``
    at ramp ``r``; one row exists for every potential token up to
    ``max_output_len``.
    """

    id: int
    arrival_ms: float
    prompt_len: int
    max_output_len: int
    sla_rct_ms: float | None
    confidences: tuple[tuple[float, ...], ...]

    def validate(self) -> None:
        if self.prompt_len < 1:
            raise ValueError(f"request {self.id}: prompt_len must be >= 1")
        if self.max_output_len < 1:
            raise ValueError(f"request {self.id}: max_output_len must be >= 1")
        if self.arrival_ms < 0:
            raise ValueError(f"request {self.id}: arrival_ms must be >= 0")
        if self.sla_rct_ms is not None and self.sla_rct_ms <= 0:
            raise ValueError(f"request {self.id}: sla_rct_ms must be positive")
        if len(self.confidences) != self.max_output_len:
            raise ValueError(
                f"request {self.id}: expected {self.max_output_len} confidence rows, "
                f"got {len(self.confidences)}"
            )
        width = len(self.confidences[0]) if self.confidences else 0
        for t, row in enumerate(self.confidences):
            if len(row) != width:
                raise ValueError(f"request {self.id}: ragged confidence row at token {t}")
            for c in row:
                if not (0.0 <= c <= 1.0):
                    raise ValueError(
                        f"request {self.id}: confidence {c} at token {t} outside [0, 1]"
                    )

    @property
    def num_ramps(self) -> int:
        return len(self.confidences[0]) if self.confidences else 0


@dataclass(frozen=True)
class RampConfig:
    """An exit ramp: where it sits and the confidence cutoff it applies."""

    ramp_index: int
    layer_index: int
    threshold: float


def validate_ramps(ramps: list[RampConfig], total_layers: int) -> None:
    if not ramps:
        raise ConfigError("ramps", "at least one ramp is required")
    prev = 0
    for i, ramp in enumerate(ramps):
        if ramp.ramp_index != i:
            raise ConfigError(f"ramps[{i}].ramp_index", f"must be {i}, got {ramp.ramp_index}")
        if not (0 < ramp.layer_index < total_layers):
            raise ConfigError(
                f"ramps[{i}].layer_index",
                f"must be strictly between 0 and {total_layers}, got {ramp.layer_index}",
            )
        if ramp.layer_index <= prev and i > 0:
            raise ConfigError(f"ramps[{i}].layer_index", "ramp layers must be strictly increasing")
        if not (0.0 <= ramp.threshold <= 1.0):
            raise ConfigError(f"ramps[{i}].threshold", f"must be in [0, 1], got {ramp.threshold}")
        prev = ramp.layer_index


@dataclass(frozen=True)
class LengthSpec:
    """Token-length distribution: fixed value, uniform range, or empirical list."""

    kind: str  # "fixed" | "uniform" | "empirical"
    value: int = 0
    low: int = 0
    high: int = 0
    values: tuple[int, ...] = ()

    def validate(self, name: str) -> None:
        if self.kind == "fixed":
            if self.value < 1:
                raise ConfigError(f"{name}.value", f"must be >= 1, got {self.value}")
        elif self.kind == "uniform":
            if self.low < 1 or self.high < self.low:
                raise ConfigError(f"{name}", f"need 1 <= low <= high, got [{self.low}, {self.high}]")
        elif self.kind == "empirical":
            if not self.values or any(v < 1 for v in self.values):
                raise ConfigError(f"{name}.values", "need a non-empty list of lengths >= 1")
        else:
            raise ConfigError(f"{name}.kind", f"unknown kind {self.kind!r}")

    def sample(self, rng: np.random.Generator) -> int:
        if self.kind == "fixed":
            return self.value
        if self.kind == "uniform":
            return int(rng.integers(self.low, self.high + 1))
        return int(self.values[rng.integers(0, len(self.values))])


@dataclass(frozen=True)
class ConfidenceSpec:
    """Per-token ramp-confidence model.

    ``beta`` draws Beta(alpha, beta) per (token, ramp); ``constant`` pins every
    confidence. ``difficulty_sigma`` adds a per-request Normal(0, sigma) shift
    to all of a request's confidences (clamped to [0, 1]), correlating tokens
    within a request so that batch-size effects on grouped policies show up.
    """

    kind: str  # "beta" | "constant"
    value: float = 1.0
    alpha: float = 2.0
    beta: float = 2.0
    difficulty_sigma: float = 0.0

    def validate(self, name: str = "confidence") -> None:
        if self.kind == "constant":
            if not (0.0 <= self.value <= 1.0):
                raise ConfigError(f"{name}.value", f"must be in [0, 1], got {self.value}")
        elif self.kind == "beta":
            if self.alpha <= 0 or self.beta <= 0:
                raise ConfigError(f"{name}", f"alpha and beta must be positive, got ({self.alpha}, {self.beta})")
        else:
            raise ConfigError(f"{name}.kind", f"unknown kind {self.kind!r}")
        if self.difficulty_sigma < 0:
            raise ConfigError(f"{name}.difficulty_sigma", "must be >= 0")


@dataclass(frozen=True)
class ArrivalSpec:
    """Arrival process: closed loop (all requests present at t=0) or open-loop Poisson."""

    kind: str = "closed"  # "closed" | "poisson"
    rate_per_s: float = 0.0

    def validate(self, name: str = "arrival") -> None:
        if self.kind == "closed":
            return
        if self.kind == "poisson":
            if self.rate_per_s <= 0:
                raise ConfigError(f"{name}.rate_per_s", f"must be positive, got {self.rate_per_s}")
            return
        raise ConfigError(f"{name}.kind", f"unknown kind {self.kind!r}")


@dataclass(frozen=True)
class WorkloadConfig:
    num_requests: int
    arrival: ArrivalSpec = field(default_factory=ArrivalSpec)
    prompt_len: LengthSpec = field(default_factory=lambda: LengthSpec("fixed", value=32))
    max_output_len: LengthSpec = field(default_factory=lambda: LengthSpec("fixed", value=32))
    sla_rct_ms: float | None = None
    confidence: ConfidenceSpec = field(default_factory=lambda: ConfidenceSpec("beta"))
    seed: int = 0

    def validate(self) -> None:
        if self.num_requests < 0:
            raise ConfigError("workload.num_requests", "must be >= 0")
        if self.sla_rct_ms is not None and self.sla_rct_ms <= 0:
            raise ConfigError("workload.sla_rct_ms", "must be positive or null")
        self.arrival.validate("workload.arrival")
        self.prompt_len.validate("workload.prompt_len")
        self.max_output_len.validate("workload.max_output_len")
        self.confidence.validate("workload.confidence")


def generate_workload(cfg: WorkloadConfig, ramps: list[RampConfig]) -> list[Request]:
    """Generate ``cfg.num_requests`` requests, sorted by arrival time.

    Fully deterministic for a fixed seed: the same (cfg, ramps) always
    yields an element-wise identical trace.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_ramps = len(ramps)

    arrivals: list[float]
    if cfg.arrival.kind == "closed":
        arrivals = [0.0] * cfg.num_requests
    else:
        gaps = rng.exponential(1000.0 / cfg.arrival.rate_per_s, size=cfg.num_requests)
        arrivals = list(np.cumsum(gaps))

    requests = []
    for i in range(cfg.num_requests):
        prompt_len = cfg.prompt_len.sample(rng)
        out_len = cfg.max_output_len.sample(rng)
        shift = 0.0
        if cfg.confidence.difficulty_sigma > 0:
            shift = float(rng.normal(0.0, cfg.confidence.difficulty_sigma))
        rows = []
        for _ in range(out_len):
            if cfg.confidence.kind == "constant":
                row = [cfg.confidence.value] * n_ramps
            else:
                row = [float(rng.beta(cfg.confidence.alpha, cfg.confidence.beta)) for _ in range(n_ramps)]
            rows.append(tuple(min(1.0, max(0.0, c + shift)) for c in row))
        req = Request(
            id=i,
            arrival_ms=float(arrivals[i]),
            prompt_len=prompt_len,
            max_output_len=out_len,
            sla_rct_ms=cfg.sla_rct_ms,
            confidences=tuple(rows),
        )
        req.validate()
        requests.append(req)

    requests.sort(key=lambda r: (r.arrival_ms, r.id))
    return requests


def save_trace(requests: list[Request], path: str | Path) -> None:
    """Write requests as one JSON object per line (the trace schema)."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in requests:
            fh.write(
                json.dumps(
                    {
                        "id": r.id,
                        "arrival_ms": r.arrival_ms,
                        "prompt_len": r.prompt_len,
                        "max_output_len": r.max_output_len,
                        "sla_rct_ms": r.sla_rct_ms,
                        "confidences": [list(row) for row in r.confidences],
                    },
                    sort_keys=True,
                )
            )
            fh.write("\n")


def load_trace(path: str | Path) -> list[Request]:
    """Load a JSONL trace, enforcing every request invariant on the way in.

    Raises TraceParseError for malformed lines and TraceValidationError for
    records that parse but violate an invariant, both with the line number.
    """
    requests = []
    seen_ids: set[int] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(line_no, f"invalid JSON: {exc.msg}") from exc
            if not isinstance(record, dict):
                raise TraceParseError(line_no, "record must be a JSON object")
            unknown = set(record) - TRACE_KEYS
            if unknown:
                raise TraceParseError(line_no, f"unknown keys: {sorted(unknown)}")
            missing = TRACE_KEYS - set(record)
            if missing:
                raise TraceParseError(line_no, f"missing keys: {sorted(missing)}")
            try:
                req = Request(
                    id=int(record["id"]),
                    arrival_ms=float(record["arrival_ms"]),
                    prompt_len=int(record["prompt_len"]),
                    max_output_len=int(record["max_output_len"]),
                    sla_rct_ms=None if record["sla_rct_ms"] is None else float(record["sla_rct_ms"]),
                    confidences=tuple(tuple(float(c) for c in row) for row in record["confidences"]),
                )
            except (TypeError, ValueError) as exc:
                raise TraceParseError(line_no, f"bad field value: {exc}") from exc
            try:
                req.validate()
            except ValueError as exc:
                raise TraceValidationError(line_no, str(exc)) from exc
            if req.id in seen_ids:
                raise TraceValidationError(line_no, f"duplicate request id {req.id}")
            seen_ids.add(req.id)
            requests.append(req)
    requests.sort(key=lambda r: (r.arrival_ms, r.id))
    return requests
