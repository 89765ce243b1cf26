"""Shared builders for engine-level tests."""

from eesim.cost_model import calibrate
from eesim.workload import RampConfig, Request

# Per-layer time model calibrated to reproduce the published iteration
# latencies of the 40-layer setup (t_f=28.738, t_s=22.989, t_d=11.101 at
# batch size 8, exit layer 25).
FIG_A = dict(t_f_ms=28.738, t_s_ms=22.989, t_d_ms=11.101, batch_size=8, exit_layer=25, total_layers=40)


def fig_a_params(**overrides):
    params = calibrate(**FIG_A).params
    if overrides:
        from dataclasses import replace

        params = replace(params, **overrides)
    return params


def scripted_request(rid, confs, prompt_len=4, arrival=0.0, sla=None):
    """Request with explicit per-token confidences (one ramp per inner tuple)."""
    rows = tuple(tuple(c) if isinstance(c, (tuple, list)) else (c,) for c in confs)
    return Request(
        id=rid,
        arrival_ms=arrival,
        prompt_len=prompt_len,
        max_output_len=len(rows),
        sla_rct_ms=sla,
        confidences=rows,
    )


RAMP_25 = RampConfig(0, 25, 0.8)
