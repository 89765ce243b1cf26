"""Command-line interface: run sweeps, validate configs, calibrate costs."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import (
    apply_overrides,
    build_engine_config,
    build_workload,
    canonical_json,
    expand_sweep,
    load_config_file,
    resolve,
)
from .cost_model import calibrate
from .engine import Engine
from .errors import ConfigError, SimInvariantError
from .report import events_to_jsonl

HEADLINE_COLUMNS = [
    "throughput_tokens_per_s",
    "rct_avg_ms",
    "rct_p95_ms",
    "ee_proportion",
    "involuntary_exit_pct",
    "involuntary_stay_pct",
    "confidence_p95",
]


def _parse_args(argv: list[str] | None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(prog="eesim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
        ("run", "execute the config (all sweep points) and write reports"),
        ("validate", "parse, validate, and print the resolved config"),
        ("calibrate", "solve cost params from the config's calibration targets"),
    ]:
        cmd = sub.add_parser(name, help=helptext)
        cmd.add_argument("--config", required=True, help="path to the YAML run config")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            dest="overrides",
            help="override a config field by dotted path (repeatable)",
        )
        if name == "run":
            cmd.add_argument("--out", default="out", help="output directory (default: out)")
            cmd.add_argument("--jobs", type=int, default=1, help="parallel sweep workers")
            cmd.add_argument("--log-events", action="store_true", help="write per-point event logs")
    return parser.parse_args(argv)


def _load_resolved(args: argparse.Namespace) -> dict:
    raw = load_config_file(args.config)
    raw = apply_overrides(raw, args.overrides)
    return resolve(raw)


def _run_point(payload: tuple[int, dict, dict, bool]) -> tuple[int, dict, str, str | None]:
    index, axes, point, log_events = payload
    engine_cfg = build_engine_config(point, log_events=log_events)
    requests = build_workload(point, engine_cfg.ramps)
    engine = Engine(requests, engine_cfg)
    try:
        result = engine.run()
    except SimInvariantError:
        # Surface whatever events were captured so the abort can be replayed.
        events = events_to_jsonl(engine.events)
        raise _PointAbort(index, axes, events)
    row = {f"sweep.{k}": v for k, v in axes.items()}
    row.update(result.report.headline())
    events = events_to_jsonl(result.events) if result.events is not None else None
    return index, row, result.report.to_json(), events


class _PointAbort(Exception):
    def __init__(self, index: int, axes: dict, events_jsonl: str):
        self.index = index
        self.axes = axes
        self.events_jsonl = events_jsonl
        super().__init__(f"sweep point {index} aborted on a simulation invariant")


def cmd_run(args: argparse.Namespace) -> int:
    try:
        resolved = _load_resolved(args)
        points = expand_sweep(resolved)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(canonical_json(resolved), encoding="utf-8")

    payloads = [
        (i, axes, point, args.log_events) for i, (axes, point) in enumerate(points)
    ]
    results: list[tuple[int, dict, str, str | None]] = []
    try:
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                results = list(pool.map(_run_point, payloads))
        else:
            results = [_run_point(p) for p in payloads]
    except _PointAbort as abort:
        log_path = out_dir / f"events_abort_{abort.index:03d}.jsonl"
        log_path.write_text(abort.events_jsonl, encoding="utf-8")
        print(f"simulation aborted at sweep point {abort.index}; event log: {log_path}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    results.sort(key=lambda r: r[0])
    axis_columns = [f"sweep.{p}" for p in sorted(resolved.get("sweep") or {})]
    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["point"] + axis_columns + HEADLINE_COLUMNS)
        writer.writeheader()
        for index, row, report_json, events in results:
            (out_dir / f"report_{index:03d}.json").write_text(report_json + "\n", encoding="utf-8")
            if events is not None:
                (out_dir / f"events_{index:03d}.jsonl").write_text(events, encoding="utf-8")
            out_row = {"point": index}
            out_row.update({k: ("" if v is None else v) for k, v in row.items()})
            writer.writerow(out_row)
    print(f"{len(results)} run(s) complete; reports in {out_dir}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        resolved = _load_resolved(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    sys.stdout.write(canonical_json(resolved))
    return 0


def cmd_calibrate(args: argparse.Namespace) -> int:
    try:
        resolved = _load_resolved(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    cost = resolved["cost"]
    if "calibration" not in cost:
        print("config error: cost.calibration: calibrate needs calibration targets", file=sys.stderr)
        return 2
    targets = dict(cost["calibration"])
    targets.pop("ee_check_ms", None)
    try:
        result = calibrate(**targets)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    payload = {
        "params": {
            "total_layers": result.params.total_layers,
            "per_layer_a_ms": result.params.per_layer_a_ms,
            "per_layer_b_ms": result.params.per_layer_b_ms,
            "fixed_iteration_overhead_ms": result.params.fixed_iteration_overhead_ms,
            "buffer_in_ms": result.params.buffer_in_ms,
            "buffer_out_ms": result.params.buffer_out_ms,
            "scheduler_sync_ms": result.params.scheduler_sync_ms,
            "extra_postprocess_ms": result.params.extra_postprocess_ms,
            "ee_check_ms": result.params.ee_check_ms,
        },
        "residuals": result.residuals,
    }
    print(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_calibrate(args)


if __name__ == "__main__":
    sys.exit(main())
