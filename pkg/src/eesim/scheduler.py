"""Continuous batching with a logical left-behind buffer.

Requests that decline to exit at a split are parked, id-only, in a per-ramp
buffer. The buffer manager preempts fresh scheduling whenever a flush
condition holds: plain size (buffer at least as large as the next fresh
batch) or the SLA-weighted variant that inflates a buffer's effective size
as deadlines approach. Deep plans resume a single ramp's group; fresh plans
never contain buffered requests.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .cost_model import LatencyProfile
from .errors import CapacityError, ConfigError, SimInvariantError
from .workload import RampConfig, Request


class RequestStatus(enum.Enum):
    UNARRIVED = "unarrived"
    WAITING = "waiting"
    READY = "ready"
    BUFFERED = "buffered"
    IN_FLIGHT = "in_flight"
    COMPLETED = "completed"


@dataclass
class RequestState:
    """Mutable runtime state of one request inside a simulation."""

    req: Request
    status: RequestStatus = RequestStatus.UNARRIVED
    generated: int = 0
    first_scheduled_ms: float | None = None
    completed_ms: float | None = None
    last_token_ms: float = 0.0
    last_scheduled_iter: int = -1
    needs_prefill: bool = True
    recompute_pending: bool = False  # evicted: next schedule pays a full re-pass
    pending_fills: list[tuple[int, int]] = field(default_factory=list)  # (token_idx, exit_layer)

    @property
    def remaining_tokens(self) -> int:
        return self.req.max_output_len - self.generated


@dataclass(frozen=True)
class BufferEntry:
    request_id: int
    resume_layer: int
    ramp_index: int
    enter_iteration: int

    def age(self, now_iteration: int) -> int:
        return now_iteration - self.enter_iteration


class PlanKind(enum.Enum):
    FRESH = "fresh"
    DEEP = "deep"


@dataclass(frozen=True)
class IterationPlan:
    kind: PlanKind
    request_ids: tuple[int, ...]
    start_layer: int
    resume_ramp: int | None = None  # set for deep plans

    @property
    def batch_size(self) -> int:
        return len(self.request_ids)


@dataclass(frozen=True)
class SchedulerConfig:
    max_batch_size: int = 8
    alpha: float = 0.0  # SLA pressure weight; 0 disables deadline-driven flushing
    epsilon: float = 0.01  # guard against a zero or negative slack denominator
    kv_capacity_blocks: int = 10**12

    def validate(self) -> None:
        if self.max_batch_size < 1:
            raise ConfigError("scheduler.max_batch_size", "must be >= 1")
        if self.alpha < 0:
            raise ConfigError("scheduler.alpha", "must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("scheduler.epsilon", "must be > 0")
        if self.kv_capacity_blocks < 1:
            raise ConfigError("scheduler.kv_capacity_blocks", "must be >= 1")


def should_flush(
    entries: list[BufferEntry],
    b_scheduler: int,
    cfg: SchedulerConfig,
    profile: LatencyProfile,
    now_iteration: int,
    states: dict[int, RequestState],
) -> bool:
    """Flush decision for one buffer group.

    Evaluates, per entry, b_buffer * (1 + alpha / max(r_sla - r_expected,
    epsilon)) >= b_scheduler, where r_expected = age + remaining tokens and
    r_sla is the SLA completion budget converted to iterations via the
    profiled standard iteration time. The most urgent entry binds: one
    satisfying entry flushes the group. With alpha = 0 this is exactly
    b_buffer >= b_scheduler.
    """
    if not entries:
        return False
    b_buffer = len(entries)
    if cfg.alpha == 0.0:
        return b_buffer >= b_scheduler
    t_f = profile.t_f()
    for entry in entries:
        state = states[entry.request_id]
        r_expected = entry.age(now_iteration) + state.remaining_tokens
        sla = state.req.sla_rct_ms
        r_sla = math.inf if sla is None else sla / t_f
        slack = max(r_sla - r_expected, cfg.epsilon)
        pressure = cfg.alpha / slack  # 0 when r_sla is infinite
        if b_buffer * (1.0 + pressure) >= b_scheduler:
            return True
    return False


class Scheduler:
    """Owns the waiting queue, the ready set, and the per-ramp buffers."""

    def __init__(self, cfg: SchedulerConfig, ramps: list[RampConfig]):
        cfg.validate()
        self.cfg = cfg
        self.ramps = ramps
        self.waiting: deque[int] = deque()
        self.ready: list[int] = []
        self.buffers: dict[int, list[BufferEntry]] = {}

    # -- queue maintenance ---------------------------------------------------

    def add_waiting(self, request_id: int) -> None:
        self.waiting.append(request_id)

    def mark_ready(self, request_id: int) -> None:
        if request_id not in self.ready:
            self.ready.append(request_id)

    def buffered_ids(self) -> set[int]:
        return {e.request_id for group in self.buffers.values() for e in group}

    def buffer_size(self) -> int:
        return sum(len(g) for g in self.buffers.values())

    # -- split handling --------------------------------------------------------

    def on_split(
        self,
        member_ids: list[int],
        actions_exit: list[bool],
        ramp: RampConfig,
        now_iteration: int,
    ) -> tuple[list[int], list[BufferEntry]]:
        """Apply a split outcome: exiters become schedulable immediately,
        stayers enter the ramp's buffer. Only ids move; no state is copied.
        """
        if all(actions_exit) or not any(actions_exit):
            raise SimInvariantError("on_split called without an actual split")
        already = self.buffered_ids()
        exited: list[int] = []
        entries: list[BufferEntry] = []
        for request_id, exits in zip(member_ids, actions_exit):
            if exits:
                exited.append(request_id)
                continue
            if request_id in already:
                raise SimInvariantError(f"request {request_id} is already buffered")
            entries.append(
                BufferEntry(
                    request_id=request_id,
                    resume_layer=ramp.layer_index,
                    ramp_index=ramp.ramp_index,
                    enter_iteration=now_iteration,
                )
            )
        self.buffers.setdefault(ramp.ramp_index, []).extend(entries)
        return exited, entries

    # -- planning --------------------------------------------------------------

    def next_fresh_batch_size(self) -> int:
        return min(self.cfg.max_batch_size, len(self.ready) + len(self.waiting))

    def next_iteration(
        self,
        now_iteration: int,
        states: dict[int, RequestState],
        profile: LatencyProfile,
        kv_used: int,
        admission_cost: Callable[[int], int],
    ) -> IterationPlan | None:
        """Pick the next batch: a deep flush if any buffer group demands it,
        otherwise a fresh batch via continuous batching. None means idle.
        """
        b_sched = self.next_fresh_batch_size()

        # Buffer manager preempts the scheduler. Oldest group first.
        group_order = sorted(
            (ramp_idx for ramp_idx, group in self.buffers.items() if group),
            key=lambda ramp_idx: (self.buffers[ramp_idx][0].enter_iteration, ramp_idx),
        )
        for ramp_idx in group_order:
            group = self.buffers[ramp_idx]
            if should_flush(group, b_sched, self.cfg, profile, now_iteration, states):
                take = group[: self.cfg.max_batch_size]
                self.buffers[ramp_idx] = group[len(take) :]
                return IterationPlan(
                    kind=PlanKind.DEEP,
                    request_ids=tuple(e.request_id for e in take),
                    start_layer=take[0].resume_layer,
                    resume_ramp=ramp_idx,
                )

        # Continuous batching: running-ready first (FIFO by last token time),
        # then admit from the waiting queue while batch and KV budget allow.
        members = sorted(self.ready, key=lambda rid: (states[rid].last_token_ms, rid))
        members = members[: self.cfg.max_batch_size]
        projected = kv_used
        while self.waiting and len(members) < self.cfg.max_batch_size:
            candidate = self.waiting[0]
            need = admission_cost(candidate)
            if projected + need > self.cfg.kv_capacity_blocks:
                break
            self.waiting.popleft()
            members.append(candidate)
            projected += need
        if not members:
            return None
        for rid in members:
            if rid in self.ready:
                self.ready.remove(rid)
        return IterationPlan(kind=PlanKind.FRESH, request_ids=tuple(members), start_layer=0)

    # -- eviction ----------------------------------------------------------------

    def evict_on_pressure(
        self,
        kv_used: int,
        states: dict[int, RequestState],
        free_blocks: Callable[[int], int],
    ) -> list[int]:
        """Evict until usage fits the budget; returns evicted ids in order.

        Buffered requests go first (oldest entry first), then running
        requests, most recently scheduled first. Evicted requests rejoin the
        waiting queue flagged for recompute. Raises CapacityError when
        everything evictable is gone and usage still exceeds the budget.
        """
        evicted: list[int] = []
        while kv_used > self.cfg.kv_capacity_blocks:
            victim = self._next_victim(states)
            if victim is None:
                raise CapacityError(
                    f"KV usage {kv_used} exceeds capacity {self.cfg.kv_capacity_blocks} "
                    "with nothing left to evict"
                )
            kv_used -= free_blocks(victim)
            self.waiting.append(victim)
            evicted.append(victim)
        return evicted

    def _next_victim(self, states: dict[int, RequestState]) -> int | None:
        oldest: BufferEntry | None = None
        for group in self.buffers.values():
            for entry in group:
                if oldest is None or (entry.enter_iteration, entry.request_id) < (
                    oldest.enter_iteration,
                    oldest.request_id,
                ):
                    oldest = entry
        if oldest is not None:
            ramp_group = self.buffers[oldest.ramp_index]
            ramp_group.remove(oldest)
            return oldest.request_id
        if self.ready:
            victim = max(
                self.ready,
                key=lambda rid: (states[rid].last_scheduled_iter, states[rid].last_token_ms, rid),
            )
            self.ready.remove(victim)
            return victim
        return None

    # -- invariants -----------------------------------------------------------------

    def assert_conservation(self, states: dict[int, RequestState]) -> None:
        """Every request sits in exactly one place and statuses agree."""
        waiting = set(self.waiting)
        ready = set(self.ready)
        buffered = self.buffered_ids()
        if len(self.waiting) != len(waiting):
            raise SimInvariantError("duplicate ids in waiting queue")
        if len(self.ready) != len(ready):
            raise SimInvariantError("duplicate ids in ready set")
        overlap = (waiting & ready) | (waiting & buffered) | (ready & buffered)
        if overlap:
            raise SimInvariantError(f"requests in multiple queues: {sorted(overlap)}")
        for rid, state in states.items():
            expected = {
                RequestStatus.WAITING: waiting,
                RequestStatus.READY: ready,
                RequestStatus.BUFFERED: buffered,
            }
            for status, pool in expected.items():
                if (state.status is status) != (rid in pool):
                    raise SimInvariantError(
                        f"request {rid} status {state.status.value} inconsistent with queues"
                    )
            if state.status is RequestStatus.COMPLETED and rid in (waiting | ready | buffered):
                raise SimInvariantError(f"completed request {rid} still queued")
