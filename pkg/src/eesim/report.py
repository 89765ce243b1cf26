"""Run metrics and the event-log replay path.

The engine and the replayer both funnel their raw observations through the
same Tally and the same aggregation code, so a replayed event log rebuilds
the exact report, bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class Tally:
    """Raw observations accumulated during a run (or parsed from its log)."""

    n_requests: int = 0
    emits: list[tuple[int, int, float, bool, float | None]] = field(default_factory=list)
    involuntary_exits: int = 0
    involuntary_stays: int = 0
    iterations_by_kind: dict[str, int] = field(default_factory=dict)
    idle_periods: int = 0
    first_scheduled: dict[int, float] = field(default_factory=dict)
    completed: dict[int, tuple[float, int]] = field(default_factory=dict)
    kv_columns: int = 0
    kv_blocks_allocated: int = 0
    kv_duplicated: int = 0
    kv_fill_allocated: int = 0
    kv_blocks_released: int = 0
    total_layers: int = 0
    end_ms: float = 0.0

    def bump_kind(self, kind: str) -> None:
        self.iterations_by_kind[kind] = self.iterations_by_kind.get(kind, 0) + 1


@dataclass(frozen=True)
class MetricsReport:
    throughput_tokens_per_s: float
    rct_avg_ms: float
    rct_p95_ms: float
    ee_proportion: float
    involuntary_exit_pct: float
    involuntary_stay_pct: float
    confidence_p95: float | None
    mem: dict
    iterations: dict
    totals: dict
    per_request: list[dict]

    def to_dict(self) -> dict:
        return {
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "rct_avg_ms": self.rct_avg_ms,
            "rct_p95_ms": self.rct_p95_ms,
            "ee_proportion": self.ee_proportion,
            "involuntary_exit_pct": self.involuntary_exit_pct,
            "involuntary_stay_pct": self.involuntary_stay_pct,
            "confidence_p95": self.confidence_p95,
            "mem": self.mem,
            "iterations": self.iterations,
            "totals": self.totals,
            "per_request": self.per_request,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    # Headline metrics for sweep CSV rows.
    def headline(self) -> dict:
        return {
            "throughput_tokens_per_s": self.throughput_tokens_per_s,
            "rct_avg_ms": self.rct_avg_ms,
            "rct_p95_ms": self.rct_p95_ms,
            "ee_proportion": self.ee_proportion,
            "involuntary_exit_pct": self.involuntary_exit_pct,
            "involuntary_stay_pct": self.involuntary_stay_pct,
            "confidence_p95": self.confidence_p95,
        }


def build_report(tally: Tally) -> MetricsReport:
    total_tokens = len(tally.emits)
    exited = [e for e in tally.emits if e[3]]
    exit_confs = [e[4] for e in exited if e[4] is not None]
    rcts = [
        tally.completed[rid][0] - tally.first_scheduled[rid]
        for rid in sorted(tally.completed)
        if rid in tally.first_scheduled
    ]

    elapsed_s = tally.end_ms / 1000.0
    throughput = total_tokens / elapsed_s if elapsed_s > 0 else 0.0
    logical = tally.kv_columns * tally.total_layers
    mem = {
        "logical_slots": logical,
        "physical_blocks": tally.kv_blocks_allocated - tally.kv_blocks_released,
        "duplicated_blocks": tally.kv_duplicated,
        "redundancy_fraction": (tally.kv_duplicated / logical) if logical else 0.0,
        "total_blocks_allocated": tally.kv_blocks_allocated,
        "fill_allocated_blocks": tally.kv_fill_allocated,
    }
    iterations = dict(sorted(tally.iterations_by_kind.items()))
    iterations["idle_periods"] = tally.idle_periods
    per_request = [
        {
            "id": rid,
            "first_scheduled_ms": tally.first_scheduled.get(rid),
            "completed_ms": tally.completed[rid][0],
            "rct_ms": (
                tally.completed[rid][0] - tally.first_scheduled[rid]
                if rid in tally.first_scheduled
                else None
            ),
            "output_tokens": tally.completed[rid][1],
        }
        for rid in sorted(tally.completed)
    ]
    return MetricsReport(
        throughput_tokens_per_s=throughput,
        rct_avg_ms=float(np.mean(rcts)) if rcts else 0.0,
        rct_p95_ms=float(np.percentile(rcts, 95.0)) if rcts else 0.0,
        ee_proportion=(len(exited) / total_tokens) if total_tokens else 0.0,
        involuntary_exit_pct=(100.0 * tally.involuntary_exits / total_tokens) if total_tokens else 0.0,
        involuntary_stay_pct=(100.0 * tally.involuntary_stays / total_tokens) if total_tokens else 0.0,
        confidence_p95=(float(np.percentile(exit_confs, 5.0)) if exit_confs else None),
        mem=mem,
        iterations=iterations,
        totals={
            "output_tokens": total_tokens,
            "exited_tokens": len(exited),
            "simulated_ms": tally.end_ms,
            "requests_completed": len(tally.completed),
            "requests": tally.n_requests,
        },
        per_request=per_request,
    )


def replay_events(events: list[dict]) -> MetricsReport:
    """Rebuild the metrics report from an event log alone."""
    tally = Tally()
    for event in events:
        etype = event["type"]
        if etype == "run_started":
            tally.n_requests = event["requests"]
            tally.total_layers = event["total_layers"]
        elif etype == "iteration":
            tally.bump_kind(event["kind"])
            for evaluation in event["policy"]:
                tally.involuntary_exits += len(evaluation["involuntary_exits"])
                tally.involuntary_stays += len(evaluation["involuntary_stays"])
        elif etype == "idle":
            tally.idle_periods += 1
        elif etype == "emit":
            tally.emits.append(
                (
                    event["request"],
                    event["token_index"],
                    event["time_ms"],
                    event["exited"],
                    event.get("confidence"),
                )
            )
        elif etype == "first_scheduled":
            tally.first_scheduled[event["request"]] = event["time_ms"]
        elif etype == "completed":
            tally.completed[event["request"]] = (event["time_ms"], event["tokens"])
        elif etype == "kv":
            tally.kv_columns += event["new_columns"]
            tally.kv_blocks_allocated += event["blocks_allocated"]
        elif etype == "fill":
            tally.kv_blocks_allocated += event["new_blocks"]
            tally.kv_duplicated += event["duplicated"]
            tally.kv_fill_allocated += event["new_blocks"]
        elif etype == "release":
            tally.kv_blocks_released += event["blocks_freed"]
        elif etype == "evicted":
            pass  # the paired release event carries the block accounting
        elif etype == "run_finished":
            tally.end_ms = event["time_ms"]
        elif etype == "buffered":
            pass
        else:
            raise ValueError(f"unknown event type {etype!r}")
    return build_report(tally)


def events_to_jsonl(events: list[dict]) -> str:
    return "".join(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n" for e in events)


def events_from_jsonl(text: str) -> list[dict]:
    return [json.loads(line) for line in text.splitlines() if line.strip()]
