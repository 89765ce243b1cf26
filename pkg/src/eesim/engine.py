"""Discrete-event loop driving scheduling, exit decisions, and accounting.

Each iteration: pick a plan (fresh batch or deep flush), evaluate the exit
policy at every ramp the pass reaches, stop the pass at an exit or split,
advance the clock by the simulated iteration time, update the KV ledger, and
feed the latency profile. Requests complete deterministically at their
maximum output length. Every run is fully determined by (trace, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .cost_model import (
    FRESH,
    CostParams,
    LatencyProfile,
    prime_profile_from_params,
    simulated_iteration_time,
)
from .errors import SimInvariantError
from .kv_ledger import FillMode, KVLedger
from .policy import Action, Policy, apply_policy
from .report import MetricsReport, Tally, build_report
from .scheduler import (
    IterationPlan,
    PlanKind,
    RequestState,
    RequestStatus,
    Scheduler,
    SchedulerConfig,
)
from .workload import RampConfig, Request, validate_ramps


@dataclass(frozen=True)
class EngineConfig:
    ramps: list[RampConfig]
    policy: Policy
    scheduler: SchedulerConfig
    cost: CostParams
    fill_mode: FillMode = FillMode.VIRTUAL_MAP
    manual_art: float | None = None
    profile_window: int = 100
    profile_refresh: int = 100
    log_events: bool = True
    strict_kv_checks: bool = False
    max_iterations: int = 10_000_000
    seed: int = 0

    def validate(self) -> None:
        self.cost.validate()
        self.scheduler.validate()
        validate_ramps(self.ramps, self.cost.total_layers)
        if self.manual_art is not None and self.manual_art < 0:
            raise ValueError("manual_art must be >= 0 when set")


@dataclass
class RunResult:
    report: MetricsReport
    events: list[dict] | None

    def event_log(self) -> list[dict]:
        if self.events is None:
            raise RuntimeError("event logging was disabled for this run")
        return self.events


class Engine:
    def __init__(self, requests: list[Request], cfg: EngineConfig):
        cfg.validate()
        n_ramps = len(cfg.ramps)
        for r in requests:
            r.validate()
            if r.num_ramps != n_ramps:
                raise ValueError(
                    f"request {r.id} carries {r.num_ramps} ramp confidences, "
                    f"run is configured with {n_ramps} ramps"
                )
        self.cfg = cfg
        self.states: dict[int, RequestState] = {r.id: RequestState(req=r) for r in requests}
        self.sched = Scheduler(cfg.scheduler, cfg.ramps)
        self.ledger = KVLedger(cfg.cost.total_layers)
        self.profile: LatencyProfile = prime_profile_from_params(
            cfg.cost,
            [r.layer_index for r in cfg.ramps],
            cfg.scheduler.max_batch_size,
            window=cfg.profile_window,
            refresh_period=cfg.profile_refresh,
        )
        self.tally = Tally(n_requests=len(requests), total_layers=cfg.cost.total_layers)
        self.events: list[dict] = []
        self.t = 0.0
        self.iter_no = 0
        self._pending_arrivals = sorted(requests, key=lambda r: (r.arrival_ms, r.id))
        self._arrival_cursor = 0
        # Prompt KV is bulk-counted per request for capacity purposes; the
        # ledger's slot accounting covers decode tokens, where EE redundancy
        # lives. Prompts pass every layer at prefill and are never missing.
        self._prompt_blocks: dict[int, int] = {}

    # -- event plumbing ------------------------------------------------------

    def _event(self, **payload) -> None:
        self.events.append(payload)

    # -- arrivals --------------------------------------------------------------

    def _admit_arrivals(self) -> None:
        while self._arrival_cursor < len(self._pending_arrivals):
            req = self._pending_arrivals[self._arrival_cursor]
            if req.arrival_ms > self.t:
                break
            self.states[req.id].status = RequestStatus.WAITING
            self.sched.add_waiting(req.id)
            self._arrival_cursor += 1

    def _next_arrival_ms(self) -> float | None:
        if self._arrival_cursor >= len(self._pending_arrivals):
            return None
        return self._pending_arrivals[self._arrival_cursor].arrival_ms

    def _admission_cost(self, request_id: int) -> int:
        req = self.states[request_id].req
        return (req.prompt_len + 1) * self.cfg.cost.total_layers

    def _kv_used(self) -> int:
        return self.ledger.live_blocks + sum(self._prompt_blocks.values())

    # -- main loop ----------------------------------------------------------------

    def run(self) -> RunResult:
        self._event(
            type="run_started",
            requests=len(self.states),
            total_layers=self.cfg.cost.total_layers,
            policy=self.cfg.policy.value,
            seed=self.cfg.seed,
        )
        while any(s.status is not RequestStatus.COMPLETED for s in self.states.values()):
            if self.iter_no >= self.cfg.max_iterations:
                raise SimInvariantError(f"exceeded max_iterations={self.cfg.max_iterations}")
            self._admit_arrivals()
            plan = self.sched.next_iteration(
                self.iter_no, self.states, self.profile, self._kv_used(), self._admission_cost
            )
            if plan is None:
                next_arrival = self._next_arrival_ms()
                if next_arrival is None:
                    if self.sched.waiting:
                        head = self.sched.waiting[0]
                        raise CapacityError(
                            f"request {head} needs {self._admission_cost(head)} KV blocks "
                            f"but capacity is {self.cfg.scheduler.kv_capacity_blocks}"
                        )
                    raise SimInvariantError("no schedulable work but requests are incomplete")
                self._event(type="idle", from_ms=self.t, to_ms=next_arrival)
                self.tally.idle_periods += 1
                self.t = next_arrival
                continue
            self._execute(plan)
            self._check_pressure()
            self.sched.assert_conservation(self.states)
        self._event(type="run_finished", time_ms=self.t)
        self.tally.end_ms = self.t
        report = build_report(self.tally)
        return RunResult(report=report, events=self.events if self.cfg.log_events else None)

    # -- iteration execution ----------------------------------------------------------

    def _execute(self, plan: IterationPlan) -> None:
        cfg = self.cfg
        total = cfg.cost.total_layers
        members = [self.states[rid] for rid in plan.request_ids]
        b = len(members)

        for m in members:
            m.status = RequestStatus.IN_FLIGHT
            m.last_scheduled_iter = self.iter_no
            if m.first_scheduled_ms is None:
                m.first_scheduled_ms = self.t
                self.tally.first_scheduled[m.req.id] = self.t
                self._event(type="first_scheduled", request=m.req.id, time_ms=self.t)

        self._recompute_pass([m for m in members if m.recompute_pending])

        start = plan.start_layer
        span_ramps = [r for r in cfg.ramps if r.layer_index > start]
        exit_ramp: RampConfig | None = None
        is_split = False
        realized_end = total
        checks = 0
        policy_events: list[dict] = []
        exiters: list[RequestState] = []
        stayers: list[RequestState] = []
        exit_confs: dict[int, float] = {}
        exit_actions: list[bool] = []
        early_emitted: dict[int, float] = {}  # request id -> emit time at ramp

        if cfg.policy is not Policy.NON_EE:
            for ramp in span_ramps:
                confs = [m.req.confidences[m.generated][ramp.ramp_index] for m in members]
                if cfg.policy is Policy.REBATCHING:
                    art = (
                        cfg.manual_art
                        if cfg.manual_art is not None
                        else self.profile.art(ramp.ramp_index, b)
                    )
                else:
                    art = 0.0
                outcome = apply_policy(cfg.policy, confs, ramp.threshold, art)
                checks += 1
                invol_exits = [
                    m.req.id for m, f in zip(members, outcome.involuntary_exits) if f
                ]
                invol_stays = [
                    m.req.id for m, f in zip(members, outcome.involuntary_stays) if f
                ]
                self.tally.involuntary_exits += len(invol_exits)
                self.tally.involuntary_stays += len(invol_stays)
                if outcome.all_exit:
                    decision = "exit"
                elif outcome.all_continue:
                    decision = "continue"
                else:
                    decision = "split"
                policy_events.append(
                    {
                        "ramp": ramp.ramp_index,
                        "art": art if cfg.policy is Policy.REBATCHING else None,
                        "wants_exit": [
                            m.req.id for m, c in zip(members, confs) if c >= ramp.threshold
                        ],
                        "decision": decision,
                        "involuntary_exits": invol_exits,
                        "involuntary_stays": invol_stays,
                    }
                )
                if decision == "exit":
                    exit_ramp = ramp
                    realized_end = ramp.layer_index
                    exiters = list(members)
                    exit_confs = {m.req.id: c for m, c in zip(members, confs)}
                    exit_actions = [True] * b
                    break
                if decision == "split":
                    exit_ramp = ramp
                    realized_end = ramp.layer_index
                    is_split = True
                    exit_actions = [a is Action.EXIT for a in outcome.actions]
                    exiters = [m for m, e in zip(members, exit_actions) if e]
                    stayers = [m for m, e in zip(members, exit_actions) if not e]
                    exit_confs = {m.req.id: c for m, c, e in zip(members, confs, exit_actions) if e}
                    break
                if cfg.policy is Policy.LATENCY_ONLY and any(outcome.emits_at_ramp):
                    ramp_time = self.t + simulated_iteration_time(
                        cfg.cost, start, ramp.layer_index, b, False
                    )
                    for m, emits in zip(members, outcome.emits_at_ramp):
                        if emits and m.req.id not in early_emitted:
                            early_emitted[m.req.id] = ramp_time

        duration = (
            simulated_iteration_time(cfg.cost, start, realized_end, b, is_split)
            + checks * cfg.cost.ee_check_ms
        )
        t_end = self.t + duration

        self._update_ledger(plan, members, start, realized_end)

        kind = self._iteration_kind(plan, exit_ramp, is_split)
        self._event(
            type="iteration",
            iter=self.iter_no,
            kind=kind,
            plan=plan.kind.value,
            start_layer=start,
            end_layer=realized_end,
            batch=b,
            members=[m.req.id for m in members],
            split=is_split,
            start_ms=self.t,
            duration_ms=duration,
            policy=policy_events,
        )
        self.tally.bump_kind(kind)
        self._record_profile(plan, kind, exit_ramp, duration)

        # Emissions and state transitions happen at the iteration boundary.
        if exit_ramp is not None:
            for m in exiters:
                token_column = m.generated
                self._emit(m, t_end, exited=True, confidence=exit_confs[m.req.id])
                m.pending_fills.append((token_column, exit_ramp.layer_index))
                self._advance(m, t_end)
            if is_split:
                member_ids = [m.req.id for m in members]
                _, entries = self.sched.on_split(member_ids, exit_actions, exit_ramp, self.iter_no)
                for m in stayers:
                    m.status = RequestStatus.BUFFERED
                for entry in entries:
                    self._event(
                        type="buffered",
                        request=entry.request_id,
                        ramp=entry.ramp_index,
                        resume_layer=entry.resume_layer,
                        iter=self.iter_no,
                    )
        else:
            for m in members:
                if m.req.id in early_emitted:
                    self._emit(m, early_emitted[m.req.id], exited=False)
                    self._advance(m, early_emitted[m.req.id])
                else:
                    self._emit(m, t_end, exited=False)
                    self._advance(m, t_end)

        self.t = t_end
        self.iter_no += 1

    def _recompute_pass(self, recompute: list[RequestState]) -> None:
        """Evicted requests pay a full re-pass over their current length
        before rejoining normal processing; no tokens are emitted.
        """
        if not recompute:
            return
        total = self.cfg.cost.total_layers
        duration = simulated_iteration_time(self.cfg.cost, 0, total, len(recompute), False)
        columns = 0
        blocks = 0
        for m in recompute:
            self._prompt_blocks[m.req.id] = m.req.prompt_len * total
            for tok in range(m.generated):
                blocks += self.ledger.record_compute(m.req.id, tok, (0, total))
                columns += 1
            m.recompute_pending = False
            m.needs_prefill = False
            m.pending_fills = []
        self.tally.kv_columns += columns
        self.tally.kv_blocks_allocated += blocks
        self._event(type="kv", iter=self.iter_no, new_columns=columns, blocks_allocated=blocks)
        self._event(
            type="iteration",
            iter=self.iter_no,
            kind="recompute",
            plan="fresh",
            start_layer=0,
            end_layer=total,
            batch=len(recompute),
            members=[m.req.id for m in recompute],
            split=False,
            start_ms=self.t,
            duration_ms=duration,
            policy=[],
        )
        self.tally.bump_kind("recompute")
        self.t += duration

    def _update_ledger(
        self,
        plan: IterationPlan,
        members: list[RequestState],
        start: int,
        realized_end: int,
    ) -> None:
        total = self.cfg.cost.total_layers
        # Lazy state-copying: fill skipped layers the moment a pass is about
        # to run past them, so attention never sees a missing slot.
        for m in members:
            due = [(tok, xl) for tok, xl in m.pending_fills if xl < realized_end]
            if due:
                m.pending_fills = [(tok, xl) for tok, xl in m.pending_fills if xl >= realized_end]
                for tok, exit_layer in due:
                    new_blocks = self.ledger.fill_missing(m.req.id, tok, exit_layer, self.cfg.fill_mode)
                    duplicated = new_blocks if self.cfg.fill_mode is FillMode.PHYSICAL_COPY else 0
                    self.tally.kv_blocks_allocated += new_blocks
                    self.tally.kv_duplicated += duplicated
                    self.tally.kv_fill_allocated += new_blocks
                    self._event(
                        type="fill",
                        request=m.req.id,
                        token=tok,
                        exit_layer=exit_layer,
                        mode=self.cfg.fill_mode.value,
                        new_blocks=new_blocks,
                        duplicated=duplicated,
                    )
        columns = 0
        blocks = 0
        for m in members:
            if m.needs_prefill:
                self._prompt_blocks[m.req.id] = m.req.prompt_len * total
                m.needs_prefill = False
            blocks += self.ledger.record_compute(m.req.id, m.generated, (start, realized_end))
            if start == 0:
                columns += 1
        self.tally.kv_columns += columns
        self.tally.kv_blocks_allocated += blocks
        self._event(type="kv", iter=self.iter_no, new_columns=columns, blocks_allocated=blocks)
        if self.cfg.strict_kv_checks:
            for m in members:
                self.ledger.check_ready_below(m.req.id, realized_end, m.generated)

    def _iteration_kind(
        self, plan: IterationPlan, exit_ramp: RampConfig | None, is_split: bool
    ) -> str:
        if is_split:
            return "shallow_split"
        if exit_ramp is not None:
            return "shallow_exit"
        return "full" if plan.kind is PlanKind.FRESH else "deep"

    def _record_profile(
        self, plan: IterationPlan, kind: str, exit_ramp: RampConfig | None, duration: float
    ) -> None:
        # Unanimous-exit shallow passes carry no rebatching surcharge, so
        # they stay out of the t_s estimate that defines the overhead.
        if kind == "shallow_split":
            start = FRESH if plan.kind is PlanKind.FRESH else plan.resume_ramp
            assert exit_ramp is not None
            self.profile.record_shallow(start, exit_ramp.ramp_index, duration)
        elif kind == "deep":
            assert plan.resume_ramp is not None
            self.profile.record_deep(plan.resume_ramp, duration)
        elif kind == "full":
            self.profile.record_full(duration)

    def _emit(self, m: RequestState, time_ms: float, exited: bool, confidence: float | None = None) -> None:
        position = m.generated
        self.tally.emits.append((m.req.id, position, time_ms, exited, confidence))
        event: dict = {
            "type": "emit",
            "request": m.req.id,
            "token_index": position,
            "time_ms": time_ms,
            "exited": exited,
        }
        if confidence is not None:
            event["confidence"] = confidence
        self._event(**event)

    def _advance(self, m: RequestState, time_ms: float) -> None:
        m.generated += 1
        m.last_token_ms = time_ms
        if m.generated == m.req.max_output_len:
            m.status = RequestStatus.COMPLETED
            m.completed_ms = time_ms
            freed = self.ledger.release(m.req.id)
            self._prompt_blocks.pop(m.req.id, None)
            self.tally.kv_blocks_released += freed
            self.tally.completed[m.req.id] = (time_ms, m.generated)
            self._event(type="release", request=m.req.id, blocks_freed=freed)
            self._event(type="completed", request=m.req.id, time_ms=time_ms, tokens=m.generated)
        else:
            m.status = RequestStatus.READY
            self.sched.mark_ready(m.req.id)

    # -- memory pressure ------------------------------------------------------

    def _check_pressure(self) -> None:
        if self._kv_used() <= self.cfg.scheduler.kv_capacity_blocks:
            return

        def free_blocks(request_id: int) -> int:
            m = self.states[request_id]
            freed = self.ledger.release(request_id)
            prompt_freed = self._prompt_blocks.pop(request_id, 0)
            self.tally.kv_blocks_released += freed
            m.status = RequestStatus.WAITING
            m.needs_prefill = True
            m.recompute_pending = True
            m.pending_fills = []
            self._event(type="release", request=request_id, blocks_freed=freed)
            self._event(
                type="evicted",
                request=request_id,
                iter=self.iter_no,
                blocks_freed=freed + prompt_freed,
            )
            return freed + prompt_freed

        self.sched.evict_on_pressure(self._kv_used(), self.states, free_blocks)


def run(
    requests: list[Request],
    ramps: list[RampConfig],
    policy: Policy,
    scheduler_cfg: SchedulerConfig,
    cost_params: CostParams,
    seed: int = 0,
    **kwargs,
) -> RunResult:
    """Convenience wrapper: build an engine and simulate to completion."""
    cfg = EngineConfig(
        ramps=ramps,
        policy=policy,
        scheduler=scheduler_cfg,
        cost=cost_params,
        seed=seed,
        **kwargs,
    )
    return Engine(requests, cfg).run()
