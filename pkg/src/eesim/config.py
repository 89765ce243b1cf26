"""Run configuration: YAML schema, defaults, overrides, and sweep expansion.

A config resolves to a fully-defaulted nested dict; ``validate`` prints that
resolved form and ``run`` executes exactly the same bytes, so the two can
never diverge. Sweep axes are dotted paths into the resolved config mapped
to value lists; overrides (``--set path=value``) pin a path, and pinning a
swept path removes its axis.
"""

from __future__ import annotations

import copy
import itertools
import json
from typing import Any

import yaml

from .cost_model import CostParams, calibrate
from .engine import EngineConfig
from .errors import ConfigError
from .kv_ledger import FillMode
from .policy import Policy
from .scheduler import SchedulerConfig
from .workload import (
    ArrivalSpec,
    ConfidenceSpec,
    LengthSpec,
    RampConfig,
    Request,
    WorkloadConfig,
    generate_workload,
    load_trace,
)

_TOP_KEYS = {
    "seed",
    "workload",
    "trace",
    "ramps",
    "policy",
    "scheduler",
    "cost",
    "kv_fill_mode",
    "manual_art",
    "profile",
    "sweep",
}


def load_config_file(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    return raw


def _require(mapping: dict, key: str, field: str) -> Any:
    if key not in mapping:
        raise ConfigError(field, "required field is missing")
    return mapping[key]


def _as_int(value: Any, field: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(field, f"expected an integer, got {value!r}")
    return value


def _as_float(value: Any, field: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(field, f"expected a number, got {value!r}")
    return float(value)


def _as_mapping(value: Any, field: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(field, f"expected a mapping, got {value!r}")
    return value


def _check_keys(mapping: dict, allowed: set[str], field: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(field, f"unknown keys: {sorted(unknown)}")


def _resolve_length(value: Any, field: str) -> dict:
    if isinstance(value, int) and not isinstance(value, bool):
        return {"kind": "fixed", "value": value}
    spec = _as_mapping(value, field)
    _check_keys(spec, {"kind", "value", "low", "high", "values"}, field)
    kind = spec.get("kind", "fixed")
    if kind == "fixed":
        return {"kind": "fixed", "value": _as_int(_require(spec, "value", f"{field}.value"), f"{field}.value")}
    if kind == "uniform":
        return {
            "kind": "uniform",
            "low": _as_int(_require(spec, "low", f"{field}.low"), f"{field}.low"),
            "high": _as_int(_require(spec, "high", f"{field}.high"), f"{field}.high"),
        }
    if kind == "empirical":
        values = _require(spec, "values", f"{field}.values")
        if not isinstance(values, list):
            raise ConfigError(f"{field}.values", "expected a list")
        return {"kind": "empirical", "values": [_as_int(v, f"{field}.values") for v in values]}
    raise ConfigError(f"{field}.kind", f"unknown kind {kind!r}")


def _resolve_confidence(value: Any, field: str) -> dict:
    spec = _as_mapping(value, field)
    _check_keys(spec, {"kind", "value", "alpha", "beta", "difficulty_sigma"}, field)
    kind = spec.get("kind", "beta")
    sigma = _as_float(spec.get("difficulty_sigma", 0.0), f"{field}.difficulty_sigma")
    if kind == "constant":
        return {
            "kind": "constant",
            "value": _as_float(_require(spec, "value", f"{field}.value"), f"{field}.value"),
            "difficulty_sigma": sigma,
        }
    if kind == "beta":
        return {
            "kind": "beta",
            "alpha": _as_float(spec.get("alpha", 2.0), f"{field}.alpha"),
            "beta": _as_float(spec.get("beta", 2.0), f"{field}.beta"),
            "difficulty_sigma": sigma,
        }
    raise ConfigError(f"{field}.kind", f"unknown kind {kind!r}")


def resolve(raw: dict) -> dict:
    """Fill defaults and structurally validate; returns the effective config."""
    _check_keys(raw, _TOP_KEYS, "config")
    seed = _as_int(raw.get("seed", 0), "seed")

    trace = raw.get("trace")
    workload_raw = raw.get("workload")
    if (trace is None) == (workload_raw is None):
        raise ConfigError("workload", "exactly one of 'workload' (inline) or 'trace' (path) is required")
    workload: dict | None = None
    if workload_raw is not None:
        w = _as_mapping(workload_raw, "workload")
        _check_keys(
            w,
            {"num_requests", "arrival", "prompt_len", "max_output_len", "sla_rct_ms", "confidence", "seed"},
            "workload",
        )
        arrival = _as_mapping(w.get("arrival", {"kind": "closed"}), "workload.arrival")
        _check_keys(arrival, {"kind", "rate_per_s"}, "workload.arrival")
        arrival_kind = arrival.get("kind", "closed")
        resolved_arrival: dict = {"kind": arrival_kind}
        if arrival_kind == "poisson":
            resolved_arrival["rate_per_s"] = _as_float(
                _require(arrival, "rate_per_s", "workload.arrival.rate_per_s"),
                "workload.arrival.rate_per_s",
            )
        elif arrival_kind != "closed":
            raise ConfigError("workload.arrival.kind", f"unknown kind {arrival_kind!r}")
        sla = w.get("sla_rct_ms")
        workload = {
            "num_requests": _as_int(_require(w, "num_requests", "workload.num_requests"), "workload.num_requests"),
            "arrival": resolved_arrival,
            "prompt_len": _resolve_length(w.get("prompt_len", 32), "workload.prompt_len"),
            "max_output_len": _resolve_length(w.get("max_output_len", 32), "workload.max_output_len"),
            "sla_rct_ms": None if sla is None else _as_float(sla, "workload.sla_rct_ms"),
            "confidence": _resolve_confidence(w.get("confidence", {"kind": "beta"}), "workload.confidence"),
            "seed": _as_int(w.get("seed", seed), "workload.seed"),
        }
    elif not isinstance(trace, str):
        raise ConfigError("trace", f"expected a path string, got {trace!r}")

    ramps_raw = _require(raw, "ramps", "ramps")
    if not isinstance(ramps_raw, list) or not ramps_raw:
        raise ConfigError("ramps", "expected a non-empty list of ramps")
    ramps = []
    for i, ramp in enumerate(ramps_raw):
        r = _as_mapping(ramp, f"ramps[{i}]")
        _check_keys(r, {"layer_index", "threshold"}, f"ramps[{i}]")
        ramps.append(
            {
                "layer_index": _as_int(_require(r, "layer_index", f"ramps[{i}].layer_index"), f"ramps[{i}].layer_index"),
                "threshold": _as_float(_require(r, "threshold", f"ramps[{i}].threshold"), f"ramps[{i}].threshold"),
            }
        )

    policy = raw.get("policy", "rebatching")
    if not isinstance(policy, str):
        raise ConfigError("policy", f"expected a policy name, got {policy!r}")
    Policy.parse(policy)

    sched_raw = _as_mapping(raw.get("scheduler", {}), "scheduler")
    _check_keys(sched_raw, {"max_batch_size", "alpha", "epsilon", "kv_capacity_blocks"}, "scheduler")
    scheduler = {
        "max_batch_size": _as_int(sched_raw.get("max_batch_size", 8), "scheduler.max_batch_size"),
        "alpha": _as_float(sched_raw.get("alpha", 0.0), "scheduler.alpha"),
        "epsilon": _as_float(sched_raw.get("epsilon", 0.01), "scheduler.epsilon"),
        "kv_capacity_blocks": _as_int(sched_raw.get("kv_capacity_blocks", 10**12), "scheduler.kv_capacity_blocks"),
    }

    cost_raw = _as_mapping(_require(raw, "cost", "cost"), "cost")
    _check_keys(cost_raw, {"params", "calibration"}, "cost")
    if ("params" in cost_raw) == ("calibration" in cost_raw):
        raise ConfigError("cost", "exactly one of 'params' or 'calibration' is required")
    cost: dict = {}
    if "params" in cost_raw:
        p = _as_mapping(cost_raw["params"], "cost.params")
        allowed = {
            "total_layers",
            "per_layer_a_ms",
            "per_layer_b_ms",
            "fixed_iteration_overhead_ms",
            "buffer_in_ms",
            "buffer_out_ms",
            "scheduler_sync_ms",
            "extra_postprocess_ms",
            "ee_check_ms",
        }
        _check_keys(p, allowed, "cost.params")
        cost["params"] = {
            "total_layers": _as_int(_require(p, "total_layers", "cost.params.total_layers"), "cost.params.total_layers"),
            "per_layer_a_ms": _as_float(_require(p, "per_layer_a_ms", "cost.params.per_layer_a_ms"), "cost.params.per_layer_a_ms"),
            "per_layer_b_ms": _as_float(p.get("per_layer_b_ms", 0.0), "cost.params.per_layer_b_ms"),
            "fixed_iteration_overhead_ms": _as_float(p.get("fixed_iteration_overhead_ms", 0.0), "cost.params.fixed_iteration_overhead_ms"),
            "buffer_in_ms": _as_float(p.get("buffer_in_ms", 0.0), "cost.params.buffer_in_ms"),
            "buffer_out_ms": _as_float(p.get("buffer_out_ms", 0.0), "cost.params.buffer_out_ms"),
            "scheduler_sync_ms": _as_float(p.get("scheduler_sync_ms", 0.0), "cost.params.scheduler_sync_ms"),
            "extra_postprocess_ms": _as_float(p.get("extra_postprocess_ms", 0.0), "cost.params.extra_postprocess_ms"),
            "ee_check_ms": _as_float(p.get("ee_check_ms", 0.0), "cost.params.ee_check_ms"),
        }
    else:
        c = _as_mapping(cost_raw["calibration"], "cost.calibration")
        allowed = {"t_f_ms", "t_s_ms", "t_d_ms", "batch_size", "exit_layer", "total_layers", "batch_slope_fraction", "ee_check_ms"}
        _check_keys(c, allowed, "cost.calibration")
        cost["calibration"] = {
            "t_f_ms": _as_float(_require(c, "t_f_ms", "cost.calibration.t_f_ms"), "cost.calibration.t_f_ms"),
            "t_s_ms": _as_float(_require(c, "t_s_ms", "cost.calibration.t_s_ms"), "cost.calibration.t_s_ms"),
            "t_d_ms": _as_float(_require(c, "t_d_ms", "cost.calibration.t_d_ms"), "cost.calibration.t_d_ms"),
            "batch_size": _as_int(_require(c, "batch_size", "cost.calibration.batch_size"), "cost.calibration.batch_size"),
            "exit_layer": _as_int(_require(c, "exit_layer", "cost.calibration.exit_layer"), "cost.calibration.exit_layer"),
            "total_layers": _as_int(_require(c, "total_layers", "cost.calibration.total_layers"), "cost.calibration.total_layers"),
            "batch_slope_fraction": _as_float(c.get("batch_slope_fraction", 0.0), "cost.calibration.batch_slope_fraction"),
            "ee_check_ms": _as_float(c.get("ee_check_ms", 0.0), "cost.calibration.ee_check_ms"),
        }

    fill_mode = raw.get("kv_fill_mode", "virtual")
    if not isinstance(fill_mode, str):
        raise ConfigError("kv_fill_mode", f"expected a string, got {fill_mode!r}")
    try:
        FillMode.parse(fill_mode)
    except ValueError as exc:
        raise ConfigError("kv_fill_mode", str(exc))

    manual_art = raw.get("manual_art")
    if manual_art is not None:
        manual_art = _as_float(manual_art, "manual_art")
        if manual_art < 0:
            raise ConfigError("manual_art", "must be >= 0 or null")

    profile_raw = _as_mapping(raw.get("profile", {}), "profile")
    _check_keys(profile_raw, {"window", "refresh_period"}, "profile")
    profile = {
        "window": _as_int(profile_raw.get("window", 100), "profile.window"),
        "refresh_period": _as_int(profile_raw.get("refresh_period", 100), "profile.refresh_period"),
    }

    sweep_raw = _as_mapping(raw.get("sweep", {}), "sweep")
    sweep: dict = {}
    for path, values in sweep_raw.items():
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep.{path}", "expected a non-empty list of values")
        sweep[path] = values

    resolved = {
        "seed": seed,
        "workload": workload,
        "trace": trace,
        "ramps": ramps,
        "policy": policy,
        "scheduler": scheduler,
        "cost": cost,
        "kv_fill_mode": fill_mode,
        "manual_art": manual_art,
        "profile": profile,
        "sweep": sweep,
    }
    # Every sweep axis must point at an existing field of the resolved config.
    for path in sweep:
        get_path(resolved, path)
    return resolved


# -- dotted paths -------------------------------------------------------------


def _walk(cfg: dict, path: str) -> tuple[Any, Any]:
    """Return (container, final_key) for a dotted path; raises ConfigError."""
    parts = path.split(".")
    node: Any = cfg
    for idx, part in enumerate(parts[:-1]):
        node = _step(node, part, ".".join(parts[: idx + 1]))
    last = parts[-1]
    if isinstance(node, list):
        i = _list_index(node, last, path)
        return node, i
    if isinstance(node, dict):
        if last not in node:
            raise ConfigError(path, "no such config field")
        return node, last
    raise ConfigError(path, "path does not lead to a field")


def _step(node: Any, part: str, so_far: str) -> Any:
    if isinstance(node, list):
        return node[_list_index(node, part, so_far)]
    if isinstance(node, dict):
        if part not in node:
            raise ConfigError(so_far, "no such config field")
        return node[part]
    raise ConfigError(so_far, "path does not lead to a field")


def _list_index(node: list, part: str, path: str) -> int:
    try:
        i = int(part)
    except ValueError:
        raise ConfigError(path, f"expected a list index, got {part!r}")
    if not (0 <= i < len(node)):
        raise ConfigError(path, f"index {i} out of range (list has {len(node)} items)")
    return i


def get_path(cfg: dict, path: str) -> Any:
    container, key = _walk(cfg, path)
    return container[key]


def set_path(cfg: dict, path: str, value: Any) -> None:
    container, key = _walk(cfg, path)
    container[key] = value


def apply_overrides(raw: dict, sets: list[str]) -> dict:
    """Apply ``path=value`` overrides on the raw config before resolution.

    An override of a swept field pins it: the sweep axis is dropped and the
    value applies to every sweep point.
    """
    out = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError("--set", f"expected path=value, got {item!r}")
        path, _, text = item.partition("=")
        path = path.strip()
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError:
            value = text
        sweep = out.get("sweep")
        if isinstance(sweep, dict) and path in sweep:
            del sweep[path]
        try:
            set_path(out, path, value)
        except ConfigError:
            raise ConfigError(path, f"override does not match any config field")
    return out


# -- sweep expansion ------------------------------------------------------------


def expand_sweep(resolved: dict) -> list[tuple[dict, dict]]:
    """Cartesian product of sweep axes; returns (axes, point-config) pairs.

    Point configs are full resolved configs with the axis values applied and
    the sweep section cleared.
    """
    axes = resolved.get("sweep") or {}
    base = copy.deepcopy(resolved)
    base["sweep"] = {}
    if not axes:
        return [({}, base)]
    paths = sorted(axes)
    points = []
    for combo in itertools.product(*(axes[p] for p in paths)):
        point = copy.deepcopy(base)
        assignment = dict(zip(paths, combo))
        for path, value in assignment.items():
            set_path(point, path, value)
        points.append((assignment, point))
    return points


# -- building runnable objects ----------------------------------------------------


def build_cost_params(cost: dict) -> CostParams:
    if "params" in cost:
        return CostParams(**cost["params"])
    c = dict(cost["calibration"])
    ee_check = c.pop("ee_check_ms", 0.0)
    result = calibrate(**c)
    params = result.params
    if ee_check:
        from dataclasses import replace

        params = replace(params, ee_check_ms=ee_check)
    return params


def build_ramps(resolved: dict) -> list[RampConfig]:
    return [
        RampConfig(ramp_index=i, layer_index=r["layer_index"], threshold=r["threshold"])
        for i, r in enumerate(resolved["ramps"])
    ]


def build_workload(resolved: dict, ramps: list[RampConfig]) -> list[Request]:
    if resolved["trace"] is not None:
        return load_trace(resolved["trace"])
    w = resolved["workload"]
    cfg = WorkloadConfig(
        num_requests=w["num_requests"],
        arrival=ArrivalSpec(**w["arrival"]),
        prompt_len=LengthSpec(**w["prompt_len"]),
        max_output_len=LengthSpec(**w["max_output_len"]),
        sla_rct_ms=w["sla_rct_ms"],
        confidence=ConfidenceSpec(**w["confidence"]),
        seed=w["seed"],
    )
    return generate_workload(cfg, ramps)


def build_engine_config(resolved: dict, log_events: bool = False) -> EngineConfig:
    ramps = build_ramps(resolved)
    return EngineConfig(
        ramps=ramps,
        policy=Policy.parse(resolved["policy"]),
        scheduler=SchedulerConfig(**resolved["scheduler"]),
        cost=build_cost_params(resolved["cost"]),
        fill_mode=FillMode.parse(resolved["kv_fill_mode"]),
        manual_art=resolved["manual_art"],
        profile_window=resolved["profile"]["window"],
        profile_refresh=resolved["profile"]["refresh_period"],
        log_events=log_events,
        seed=resolved["seed"],
    )


def canonical_json(resolved: dict) -> str:
    return json.dumps(resolved, sort_keys=True, indent=2) + "\n"
