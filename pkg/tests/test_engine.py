from collections import Counter

import pytest
from conftest import RAMP_25, fig_a_params, scripted_request

from eesim.cost_model import simulated_iteration_time
from eesim.engine import run
from eesim.kv_ledger import FillMode
from eesim.policy import Policy
from eesim.report import events_from_jsonl, events_to_jsonl, replay_events
from eesim.scheduler import SchedulerConfig
from eesim.workload import (
    ConfidenceSpec,
    LengthSpec,
    RampConfig,
    WorkloadConfig,
    generate_workload,
)

PARAMS = fig_a_params()
SCHED8 = SchedulerConfig(max_batch_size=8)


def iteration_events(result):
    return [e for e in result.event_log() if e["type"] == "iteration"]


def emit_events(result):
    return [e for e in result.event_log() if e["type"] == "emit"]


def test_single_request_nonee_closed_form():
    req = scripted_request(0, [0.0] * 10)
    result = run([req], [RAMP_25], Policy.NON_EE, SCHED8, PARAMS)
    report = result.report
    assert report.iterations["full"] == 10
    assert report.iterations.get("shallow_split", 0) == 0
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    assert report.totals["simulated_ms"] == pytest.approx(10 * t_f)
    assert report.throughput_tokens_per_s == pytest.approx(10 / (10 * t_f / 1000.0))
    assert report.ee_proportion == 0.0
    assert report.involuntary_exit_pct == 0.0
    assert report.involuntary_stay_pct == 0.0


def test_single_request_always_exits_closed_form():
    ramps = [RampConfig(0, 25, 0.0)]
    req = scripted_request(0, [0.5] * 10)
    result = run([req], ramps, Policy.REBATCHING, SCHED8, PARAMS)
    report = result.report
    # Threshold 0 means every token exits; at batch 1 the exit is unanimous,
    # so each iteration is a plain shallow pass with no split surcharge.
    t_s_plain = simulated_iteration_time(PARAMS, 0, 25, 1, False)
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    assert report.iterations["shallow_exit"] == 10
    assert report.totals["simulated_ms"] == pytest.approx(10 * t_s_plain)
    assert report.ee_proportion == 1.0
    nonee = run([req], ramps, Policy.NON_EE, SCHED8, PARAMS).report
    ratio = report.throughput_tokens_per_s / nonee.throughput_tokens_per_s
    assert ratio == pytest.approx(t_f / t_s_plain)


def test_golden_split_then_flush_event_log():
    """Scripted split with five exiters against the 3.86 threshold."""
    reqs = [scripted_request(i, [0.9, 0.1], prompt_len=2) for i in range(5)]
    reqs += [scripted_request(i, [0.1, 0.1], prompt_len=2) for i in range(5, 8)]
    result = run(reqs, [RAMP_25], Policy.REBATCHING, SCHED8, PARAMS, strict_kv_checks=True)

    iters = iteration_events(result)
    assert [e["kind"] for e in iters] == ["shallow_split", "full", "deep", "full"]

    split = iters[0]
    assert split["batch"] == 8
    assert split["end_layer"] == 25
    assert split["duration_ms"] == pytest.approx(22.989, abs=1e-6)
    gate = split["policy"][0]
    assert gate["art"] == pytest.approx(3.857, abs=0.01)
    assert sorted(gate["wants_exit"]) == [0, 1, 2, 3, 4]
    assert gate["decision"] == "split"
    assert gate["involuntary_exits"] == [] and gate["involuntary_stays"] == []

    buffered = [e for e in result.event_log() if e["type"] == "buffered"]
    assert sorted(e["request"] for e in buffered) == [5, 6, 7]
    assert all(e["resume_layer"] == 25 for e in buffered)

    # Exiters generate their second token in a full fresh pass.
    assert iters[1]["kind"] == "full"
    assert iters[1]["batch"] == 5
    assert iters[1]["duration_ms"] == pytest.approx(28.738, abs=1e-6)

    # Then the buffer flushes: a deep pass of the three left-behind requests.
    deep = iters[2]
    assert deep["batch"] == 3
    assert deep["start_layer"] == 25
    assert deep["end_layer"] == 40
    assert deep["duration_ms"] == pytest.approx(11.101, abs=1e-6)
    assert sorted(deep["members"]) == [5, 6, 7]

    report = result.report
    assert report.involuntary_exit_pct == 0.0
    assert report.involuntary_stay_pct == 0.0
    assert report.ee_proportion == pytest.approx(5 / 16)


def test_event_log_replay_reconstructs_report():
    cfg = WorkloadConfig(
        num_requests=24,
        prompt_len=LengthSpec("fixed", value=4),
        max_output_len=LengthSpec("uniform", low=4, high=12),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=11,
    )
    ramps = [RampConfig(0, 25, 0.5)]
    reqs = generate_workload(cfg, ramps)
    for policy in (Policy.REBATCHING, Policy.GREEDY, Policy.MAJORITY, Policy.LATENCY_ONLY):
        result = run(reqs, ramps, policy, SCHED8, PARAMS, strict_kv_checks=True)
        replayed = replay_events(result.event_log())
        assert replayed.to_json() == result.report.to_json()
        # Round-trip through the serialized JSONL form as well.
        parsed = events_from_jsonl(events_to_jsonl(result.event_log()))
        assert replay_events(parsed).to_json() == result.report.to_json()


def test_same_inputs_identical_logs_and_reports():
    cfg = WorkloadConfig(
        num_requests=16,
        max_output_len=LengthSpec("fixed", value=8),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=3,
    )
    ramps = [RampConfig(0, 25, 0.6)]
    reqs = generate_workload(cfg, ramps)
    a = run(reqs, ramps, Policy.REBATCHING, SCHED8, PARAMS)
    b = run(reqs, ramps, Policy.REBATCHING, SCHED8, PARAMS)
    assert a.report.to_json() == b.report.to_json()
    assert events_to_jsonl(a.event_log()) == events_to_jsonl(b.event_log())


def test_empty_workload_produces_no_activity():
    result = run([], [RAMP_25], Policy.REBATCHING, SCHED8, PARAMS)
    assert iteration_events(result) == []
    assert emit_events(result) == []
    assert result.report.totals["output_tokens"] == 0
    assert result.report.throughput_tokens_per_s == 0.0


def test_event_log_disabled_raises():
    req = scripted_request(0, [0.0])
    result = run([req], [RAMP_25], Policy.NON_EE, SCHED8, PARAMS, log_events=False)
    with pytest.raises(RuntimeError):
        result.event_log()


def test_token_conservation_and_uniqueness():
    cfg = WorkloadConfig(
        num_requests=20,
        max_output_len=LengthSpec("uniform", low=2, high=10),
        confidence=ConfidenceSpec("beta", alpha=1.5, beta=1.5),
        seed=21,
    )
    ramps = [RampConfig(0, 10, 0.5), RampConfig(1, 25, 0.7)]
    reqs = generate_workload(cfg, ramps)
    for policy in (Policy.REBATCHING, Policy.GREEDY, Policy.CONSENSUS, Policy.LATENCY_ONLY):
        result = run(reqs, ramps, policy, SCHED8, PARAMS, strict_kv_checks=True)
        emits = emit_events(result)
        seen = Counter((e["request"], e["token_index"]) for e in emits)
        assert all(count == 1 for count in seen.values()), "token emitted twice"
        expected = {(r.id, k) for r in reqs for k in range(r.max_output_len)}
        assert set(seen) == expected


def test_clock_monotonicity():
    cfg = WorkloadConfig(
        num_requests=12,
        max_output_len=LengthSpec("fixed", value=6),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=5,
    )
    ramps = [RampConfig(0, 25, 0.5)]
    reqs = generate_workload(cfg, ramps)
    result = run(reqs, ramps, Policy.REBATCHING, SCHED8, PARAMS)
    iters = iteration_events(result)
    for prev, cur in zip(iters, iters[1:]):
        assert cur["start_ms"] >= prev["start_ms"] + prev["duration_ms"] - 1e-9
        assert cur["duration_ms"] > 0


def test_involuntary_metrics_match_event_flags():
    cfg = WorkloadConfig(
        num_requests=16,
        max_output_len=LengthSpec("fixed", value=8),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=9,
    )
    ramps = [RampConfig(0, 25, 0.5)]
    reqs = generate_workload(cfg, ramps)
    total_tokens = sum(r.max_output_len for r in reqs)
    for policy in (Policy.CONSENSUS, Policy.GREEDY, Policy.MAJORITY, Policy.REBATCHING):
        result = run(reqs, ramps, policy, SCHED8, PARAMS)
        flags_e = sum(
            len(p["involuntary_exits"]) for e in iteration_events(result) for p in e["policy"]
        )
        flags_s = sum(
            len(p["involuntary_stays"]) for e in iteration_events(result) for p in e["policy"]
        )
        assert result.report.involuntary_exit_pct == pytest.approx(100.0 * flags_e / total_tokens)
        assert result.report.involuntary_stay_pct == pytest.approx(100.0 * flags_s / total_tokens)


def test_latency_only_timing_and_metrics():
    # One exit-ready token in the middle: emitted at the ramp timestamp, but
    # the iteration still spans all layers.
    req = scripted_request(0, [0.1, 0.9, 0.1])
    result = run([req], [RAMP_25], Policy.LATENCY_ONLY, SCHED8, PARAMS)
    report = result.report
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    assert report.ee_proportion == 0.0
    assert report.totals["simulated_ms"] == pytest.approx(3 * t_f)
    emits = emit_events(result)
    assert len(emits) == 3
    ramp_time = simulated_iteration_time(PARAMS, 0, 25, 1, False)
    assert emits[1]["time_ms"] == pytest.approx(1 * t_f + ramp_time)
    assert not emits[1]["exited"]
    # The other tokens arrive at full-iteration boundaries.
    assert emits[0]["time_ms"] == pytest.approx(t_f)
    assert emits[2]["time_ms"] == pytest.approx(3 * t_f)


def test_latency_only_final_token_completes_at_ramp_time():
    req = scripted_request(0, [0.1, 0.9])
    result = run([req], [RAMP_25], Policy.LATENCY_ONLY, SCHED8, PARAMS)
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    ramp_time = simulated_iteration_time(PARAMS, 0, 25, 1, False)
    record = result.report.per_request[0]
    assert record["completed_ms"] == pytest.approx(t_f + ramp_time)
    # The clock still runs through the deep layers.
    assert result.report.totals["simulated_ms"] == pytest.approx(2 * t_f)


def test_rct_measured_from_first_schedule():
    # Second request arrives late and waits; RCT starts at scheduling time.
    a = scripted_request(0, [0.0] * 4, arrival=0.0)
    b = scripted_request(1, [0.0] * 4, arrival=5.0)
    result = run([a, b], [RAMP_25], Policy.NON_EE, SchedulerConfig(max_batch_size=1), PARAMS)
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    records = {r["id"]: r for r in result.report.per_request}
    assert records[0]["first_scheduled_ms"] == 0.0
    assert records[0]["rct_ms"] == pytest.approx(4 * t_f)
    # b waits for a's four iterations, then runs its own four.
    assert records[1]["first_scheduled_ms"] == pytest.approx(4 * t_f)
    assert records[1]["rct_ms"] == pytest.approx(4 * t_f)


def test_poisson_arrival_idle_gaps_counted():
    a = scripted_request(0, [0.0], arrival=0.0)
    b = scripted_request(1, [0.0], arrival=1000.0)
    result = run([a, b], [RAMP_25], Policy.NON_EE, SCHED8, PARAMS)
    t_f = simulated_iteration_time(PARAMS, 0, 40, 1, False)
    assert result.report.iterations["idle_periods"] == 1
    assert result.report.totals["simulated_ms"] == pytest.approx(1000.0 + t_f)
    assert result.report.throughput_tokens_per_s == pytest.approx(2 / ((1000.0 + t_f) / 1000.0))


def test_multi_ramp_deep_resplit_lands_in_deeper_buffer():
    ramps = [RampConfig(0, 10, 0.8), RampConfig(1, 25, 0.8)]
    # Eight requests, single token. Five want out at ramp 0. Of the three
    # that continue, all three clear ramp 1 on the deep pass; three does not
    # beat ART(1) at batch 3, so they are forced through (involuntary stays).
    confs = []
    for i in range(8):
        if i < 5:
            confs.append([(0.9, 0.1)])
        else:
            confs.append([(0.1, 0.9)])
    reqs = [scripted_request(i, confs[i], prompt_len=2) for i in range(8)]
    result = run(reqs, ramps, Policy.REBATCHING, SCHED8, PARAMS, strict_kv_checks=True)
    iters = iteration_events(result)
    kinds = [e["kind"] for e in iters]
    assert kinds[0] == "shallow_split"
    assert iters[0]["end_layer"] == 10
    # Deep plans resume from exactly one ramp layer and never absorb fresh work.
    for e in iters:
        if e["plan"] == "deep":
            assert e["start_layer"] in (10, 25)
    # The flush from buffer 0 re-evaluates ramp 1 on the way down.
    deep = [e for e in iters if e["start_layer"] == 10][0]
    gate = deep["policy"][0]
    assert gate["ramp"] == 1
    assert sorted(gate["wants_exit"]) == [5, 6, 7]
    # ART at ramp 1 with batch 3: c / t_d(1) * 3; t_d(1) is the short tail.
    assert gate["decision"] in ("continue", "split", "exit")
    report = result.report
    assert report.totals["output_tokens"] == 8


def test_eviction_and_recompute_roundtrip():
    # Tight KV budget: all eight fit at admission (8 * (2+1) * 40 = 960
    # blocks), but decode growth pushes usage past the budget right after
    # the split, so the oldest buffered request is evicted, recomputed, and
    # the run still completes with every token emitted exactly once.
    reqs = [scripted_request(i, [0.9, 0.1, 0.1], prompt_len=2) for i in range(5)]
    reqs += [scripted_request(i, [0.1, 0.1, 0.1], prompt_len=2) for i in range(5, 8)]
    sched = SchedulerConfig(max_batch_size=8, kv_capacity_blocks=960)
    result = run(reqs, [RAMP_25], Policy.REBATCHING, sched, PARAMS, strict_kv_checks=True)
    evictions = [e for e in result.event_log() if e["type"] == "evicted"]
    assert evictions, "scenario should trigger at least one eviction"
    assert evictions[0]["request"] == 5  # oldest buffered entry goes first
    kinds = Counter(e["kind"] for e in iteration_events(result))
    assert kinds["recompute"] >= 1
    emits = emit_events(result)
    seen = Counter((e["request"], e["token_index"]) for e in emits)
    assert all(v == 1 for v in seen.values())
    assert result.report.totals["output_tokens"] == 24
    assert result.report.mem["physical_blocks"] == 0


def test_virtual_map_never_allocates_on_fill_across_policies():
    cfg = WorkloadConfig(
        num_requests=12,
        max_output_len=LengthSpec("fixed", value=6),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=17,
    )
    ramps = [RampConfig(0, 25, 0.5)]
    reqs = generate_workload(cfg, ramps)
    for policy in (Policy.GREEDY, Policy.NON_EE, Policy.REBATCHING, Policy.CONSENSUS):
        report = run(
            reqs, ramps, policy, SCHED8, PARAMS, fill_mode=FillMode.VIRTUAL_MAP, log_events=False
        ).report
        assert report.mem["fill_allocated_blocks"] == 0
        assert report.mem["duplicated_blocks"] == 0
        assert report.mem["physical_blocks"] == 0  # everything released


def test_nonee_blocks_equal_tokens_times_layers():
    cfg = WorkloadConfig(
        num_requests=6,
        max_output_len=LengthSpec("uniform", low=2, high=8),
        confidence=ConfidenceSpec("beta", alpha=2.0, beta=2.0),
        seed=31,
    )
    reqs = generate_workload(cfg, [RAMP_25])
    report = run(reqs, [RAMP_25], Policy.NON_EE, SCHED8, PARAMS, log_events=False).report
    total_tokens = sum(r.max_output_len for r in reqs)
    assert report.mem["total_blocks_allocated"] == total_tokens * 40
    assert report.mem["logical_slots"] == total_tokens * 40
    assert report.mem["physical_blocks"] == 0
