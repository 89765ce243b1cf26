"""Exit policies: turn a batch's confidences into per-slot exit decisions.

Each policy first computes the individual (per-request) decisions against
the ramp threshold, then resolves them into batch actions. Slots whose
action contradicts their individual decision are flagged as involuntary
exits (forced out) or involuntary stays (forced to continue).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from statistics import median

from .errors import ConfigError


class Policy(enum.Enum):
    CONSENSUS = "consensus"
    MAJORITY = "majority"
    GREEDY = "greedy"
    LATENCY_ONLY = "latencyonly"
    REBATCHING = "rebatching"
    NON_EE = "nonee"

    @classmethod
    def parse(cls, name: str) -> "Policy":
        try:
            return cls(name.strip().lower().replace("_", "").replace("-", ""))
        except ValueError:
            valid = ", ".join(p.value for p in cls)
            raise ConfigError("policy", f"unknown policy {name!r}; expected one of: {valid}")


class Action(enum.Enum):
    EXIT = "exit"
    CONTINUE = "continue"


@dataclass(frozen=True)
class EEMask:
    """Per-slot individual decisions; True means the slot wants to exit."""

    bits: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def count(self) -> int:
        return sum(self.bits)


@dataclass(frozen=True)
class PolicyOutcome:
    """Batch actions plus involuntary-exit/stay attribution.

    ``emits_at_ramp`` marks slots that produce their token at the ramp
    itself: every Exit slot, plus LatencyOnly slots whose individual
    decision was to exit (they emit early but stay in the batch).
    """

    policy_name: str
    actions: tuple[Action, ...]
    involuntary_exits: tuple[bool, ...]
    involuntary_stays: tuple[bool, ...]
    emits_at_ramp: tuple[bool, ...]

    @property
    def all_continue(self) -> bool:
        return all(a is Action.CONTINUE for a in self.actions)

    @property
    def all_exit(self) -> bool:
        return all(a is Action.EXIT for a in self.actions)

    def check(self, bits: tuple[bool, ...]) -> None:
        """Assert the attribution invariants against the individual bits."""
        for i, action in enumerate(self.actions):
            if self.involuntary_exits[i]:
                assert action is Action.EXIT and not bits[i]
            if self.involuntary_stays[i]:
                assert action is Action.CONTINUE and bits[i]
            assert not (self.involuntary_exits[i] and self.involuntary_stays[i])


def individual_decisions(confidences: list[float], threshold: float) -> EEMask:
    """Per-slot decision: exit iff confidence >= threshold.

    The comparison is deliberately ">=" so a confidence exactly at the
    threshold exits; ties are measure-zero for continuous confidence models
    but the convention matters for reproducible traces.
    """
    if not confidences:
        raise ValueError("batch must be non-empty")
    return EEMask(bits=tuple(c >= threshold for c in confidences))


def _outcome(policy: Policy, bits: tuple[bool, ...], exit_all: bool) -> PolicyOutcome:
    """Grouped outcome: everyone exits or everyone stays."""
    n = len(bits)
    if exit_all:
        actions = (Action.EXIT,) * n
        invol_exits = tuple(not b for b in bits)
        invol_stays = (False,) * n
    else:
        actions = (Action.CONTINUE,) * n
        invol_exits = (False,) * n
        invol_stays = bits
    return PolicyOutcome(
        policy_name=policy.value,
        actions=actions,
        involuntary_exits=invol_exits,
        involuntary_stays=invol_stays,
        emits_at_ramp=tuple(a is Action.EXIT for a in actions),
    )


def apply_policy(
    policy: Policy,
    confidences: list[float],
    threshold: float,
    art: float = 0.0,
) -> PolicyOutcome:
    """Resolve a batch's exit decisions under the given policy.

    ``art`` is the rebatching threshold: the Rebatching policy honors the
    individual decisions only when the exiting count strictly exceeds it,
    otherwise the whole batch is forced to continue. All other policies
    ignore it.
    """
    mask = individual_decisions(confidences, threshold)
    bits = mask.bits
    n = len(bits)

    if policy is Policy.NON_EE:
        # EE machinery disabled: nobody is "forced", so no involuntary flags.
        return PolicyOutcome(
            policy_name=policy.value,
            actions=(Action.CONTINUE,) * n,
            involuntary_exits=(False,) * n,
            involuntary_stays=(False,) * n,
            emits_at_ramp=(False,) * n,
        )

    if policy is Policy.CONSENSUS:
        return _outcome(policy, bits, exit_all=all(bits))

    if policy is Policy.GREEDY:
        return _outcome(policy, bits, exit_all=any(bits))

    if policy is Policy.MAJORITY:
        yes = sum(bits)
        if 2 * yes > n:
            exit_all = True
        elif 2 * yes == n:
            # Exact tie: compare the batch's median confidence (mean of the
            # two central values for even batches) against the threshold.
            exit_all = median(confidences) >= threshold
        else:
            exit_all = False
        return _outcome(policy, bits, exit_all=exit_all)

    if policy is Policy.LATENCY_ONLY:
        # Exit-ready slots emit their token at the ramp but everyone still
        # runs the deep layers; the early token is final for its position.
        return PolicyOutcome(
            policy_name=policy.value,
            actions=(Action.CONTINUE,) * n,
            involuntary_exits=(False,) * n,
            involuntary_stays=(False,) * n,
            emits_at_ramp=bits,
        )

    if policy is Policy.REBATCHING:
        if mask.count > art:
            actions = tuple(Action.EXIT if b else Action.CONTINUE for b in bits)
            return PolicyOutcome(
                policy_name=policy.value,
                actions=actions,
                involuntary_exits=(False,) * n,
                involuntary_stays=(False,) * n,
                emits_at_ramp=tuple(b for b in bits),
            )
        # Not profitable: forgo the EE opportunity, everyone continues.
        return _outcome(policy, bits, exit_all=False)

    raise ConfigError("policy", f"unknown policy {policy!r}")
