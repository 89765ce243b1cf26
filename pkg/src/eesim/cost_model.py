"""Iteration-time model, rolling latency profile, and the rebatching threshold.

The parametric time function stands in for profiled hardware: per-layer time
is affine in batch size, and split/resume surcharges model the buffer and
scheduler costs of rebatching. The profile keeps rolling means of observed
iteration times (full, shallow, deep) and derives from them the rebatching
overhead, the savings, and the adaptive rebatching threshold the scheduler
gates splits on.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

from .errors import ConfigError, NotProfiledError

# Profile keys. Shallow starts are a ramp index or FRESH (a new batch at
# layer 0); shallow iterations are recorded only when they actually split,
# since that is the path whose surcharges define the rebatching overhead.
FRESH = -1


@dataclass(frozen=True)
class CostParams:
    """Coefficients of the simulated iteration-time function."""

    total_layers: int
    per_layer_a_ms: float  # per-layer time at batch size 0
    per_layer_b_ms: float = 0.0  # per-layer slope in batch size
    fixed_iteration_overhead_ms: float = 0.0
    buffer_in_ms: float = 0.0
    buffer_out_ms: float = 0.0
    scheduler_sync_ms: float = 0.0
    extra_postprocess_ms: float = 0.0
    ee_check_ms: float = 0.0  # charged per ramp evaluated in an iteration

    def validate(self) -> None:
        if self.total_layers < 1:
            raise ConfigError("cost.total_layers", "must be >= 1")
        if self.per_layer_a_ms <= 0 and self.per_layer_b_ms <= 0:
            raise ConfigError("cost.per_layer_a_ms", "per-layer time must be strictly positive")
        for name in (
            "per_layer_a_ms",
            "per_layer_b_ms",
            "fixed_iteration_overhead_ms",
            "buffer_in_ms",
            "buffer_out_ms",
            "scheduler_sync_ms",
            "extra_postprocess_ms",
            "ee_check_ms",
        ):
            if getattr(self, name) < 0:
                raise ConfigError(f"cost.{name}", "must be >= 0")


def simulated_iteration_time(
    params: CostParams,
    start_layer: int,
    end_layer: int,
    batch_size: int,
    is_split: bool,
) -> float:
    """Milliseconds for one iteration over [start_layer, end_layer).

    Splitting pays the buffer-in and extra post-processing surcharge;
    resuming from a buffer (start_layer > 0) pays buffer-out plus
    scheduler sync.
    """
    if not (0 <= start_layer < end_layer <= params.total_layers):
        raise ValueError(
            f"empty or out-of-range layer span [{start_layer}, {end_layer}) "
            f"for {params.total_layers} layers"
        )
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    per_layer = params.per_layer_a_ms + params.per_layer_b_ms * batch_size
    ms = params.fixed_iteration_overhead_ms + (end_layer - start_layer) * per_layer
    if is_split:
        ms += params.buffer_in_ms + params.extra_postprocess_ms
    if start_layer > 0:
        ms += params.buffer_out_ms + params.scheduler_sync_ms
    return ms


@dataclass(frozen=True)
class CalibrationResult:
    params: CostParams
    residuals: dict[str, float]


def calibrate(
    t_f_ms: float,
    t_s_ms: float,
    t_d_ms: float,
    batch_size: int,
    exit_layer: int,
    total_layers: int,
    batch_slope_fraction: float = 0.0,
) -> CalibrationResult:
    """Solve cost params so the simulated (t_f, t_s, t_d) hit the targets.

    t_f is a full pass, t_s a split shallow pass ending at exit_layer, t_d a
    deep pass resuming there, all at ``batch_size``. The per-layer unit time
    comes from t_f; the shallow and deep surcharges absorb whatever the
    targets demand beyond the layer-proportional share (split evenly inside
    each surcharge pair, which no observable quantity distinguishes).
    ``batch_slope_fraction`` moves that fraction of the per-layer unit into
    the batch-size slope. Negative surcharges are clamped to zero and show
    up in the residuals.
    """
    if not (0 < exit_layer < total_layers):
        raise ConfigError("calibration.exit_layer", f"must be inside (0, {total_layers})")
    if min(t_f_ms, t_s_ms, t_d_ms) <= 0:
        raise ConfigError("calibration", "latency targets must be positive")
    if batch_size < 1:
        raise ConfigError("calibration.batch_size", "must be >= 1")
    if not (0.0 <= batch_slope_fraction <= 1.0):
        raise ConfigError("calibration.batch_slope_fraction", "must be in [0, 1]")

    unit = t_f_ms / total_layers
    slope = unit * batch_slope_fraction / batch_size
    a = unit - slope * batch_size
    shallow_extra = max(0.0, t_s_ms - exit_layer * unit)
    deep_extra = max(0.0, t_d_ms - (total_layers - exit_layer) * unit)
    params = CostParams(
        total_layers=total_layers,
        per_layer_a_ms=a,
        per_layer_b_ms=slope,
        fixed_iteration_overhead_ms=0.0,
        buffer_in_ms=shallow_extra / 2.0,
        extra_postprocess_ms=shallow_extra / 2.0,
        buffer_out_ms=deep_extra / 2.0,
        scheduler_sync_ms=deep_extra / 2.0,
    )
    params.validate()
    residuals = {
        "t_f_ms": simulated_iteration_time(params, 0, total_layers, batch_size, False) - t_f_ms,
        "t_s_ms": simulated_iteration_time(params, 0, exit_layer, batch_size, True) - t_s_ms,
        "t_d_ms": simulated_iteration_time(params, exit_layer, total_layers, batch_size, False) - t_d_ms,
    }
    return CalibrationResult(params=params, residuals=residuals)


@dataclass(frozen=True)
class ProfileSnapshot:
    """Published estimates; recomputed together so Eq-style identities hold."""

    t_f: float | None
    t_s: dict[tuple[int, int], float]  # (start, exit_ramp) -> ms; start FRESH or ramp idx
    t_d: dict[int, float]  # resume ramp idx -> ms
    c: float | None  # raw overhead; may be negative with noisy samples


class LatencyProfile:
    """Rolling latency estimates feeding the rebatching threshold.

    Samples accumulate per iteration kind in fixed windows; the published
    snapshot (means plus the overhead c) is recomputed only every
    ``refresh_period`` recorded iterations, so estimates are intentionally
    stale in between.
    """

    def __init__(self, window: int = 100, refresh_period: int = 100):
        if window < 1 or refresh_period < 1:
            raise ConfigError("profile", "window and refresh_period must be >= 1")
        self.window = window
        self.refresh_period = refresh_period
        self._samples: dict[tuple, deque[float]] = {}
        self._recorded = 0
        self._snapshot = ProfileSnapshot(t_f=None, t_s={}, t_d={}, c=None)

    # -- recording ---------------------------------------------------------

    def record_full(self, observed_ms: float) -> None:
        self._record(("full",), observed_ms)

    def record_shallow(self, start: int, exit_ramp: int, observed_ms: float) -> None:
        """Record a split shallow iteration from ``start`` exiting at ``exit_ramp``."""
        self._record(("shallow", start, exit_ramp), observed_ms)

    def record_deep(self, start_ramp: int, observed_ms: float) -> None:
        self._record(("deep", start_ramp), observed_ms)

    def _record(self, key: tuple, observed_ms: float) -> None:
        if observed_ms <= 0:
            raise ValueError(f"observed_ms must be positive, got {observed_ms}")
        self._samples.setdefault(key, deque(maxlen=self.window)).append(observed_ms)
        self._recorded += 1
        if self._recorded % self.refresh_period == 0:
            self.refresh()

    def prime(self, t_f: float, t_s: dict[tuple[int, int], float], t_d: dict[int, float]) -> None:
        """Seed the snapshot with analytic estimates (cold-start warmup)."""
        for key, ms in [(("full",), t_f)] + [
            (("shallow",) + k, v) for k, v in t_s.items()
        ] + [(("deep", k), v) for k, v in t_d.items()]:
            if ms <= 0:
                raise ValueError(f"primed estimate for {key} must be positive")
            self._samples.setdefault(key, deque(maxlen=self.window)).append(ms)
        self.refresh()

    def refresh(self) -> None:
        """Recompute all rolling means and the overhead as one snapshot."""
        t_f = self._mean(("full",))
        t_s: dict[tuple[int, int], float] = {}
        t_d: dict[int, float] = {}
        for key in self._samples:
            if key[0] == "shallow":
                t_s[(key[1], key[2])] = self._mean(key)
            elif key[0] == "deep":
                t_d[key[1]] = self._mean(key)
        c = None
        if t_f is not None and t_s and t_d:
            default = self._default_path(t_s, t_d)
            if default is not None:
                start, ramp = default
                c = t_s[(start, ramp)] + t_d[ramp] - t_f
        self._snapshot = ProfileSnapshot(t_f=t_f, t_s=t_s, t_d=t_d, c=c)

    @staticmethod
    def _default_path(
        t_s: dict[tuple[int, int], float], t_d: dict[int, float]
    ) -> tuple[int, int] | None:
        # Default overhead path: a fresh batch splitting at the deepest ramp
        # for which both the shallow and the deep estimate exist.
        candidates = [
            (start, ramp) for (start, ramp) in t_s if start == FRESH and ramp in t_d
        ]
        if not candidates:
            return None
        return max(candidates, key=lambda k: k[1])

    def _mean(self, key: tuple) -> float | None:
        samples = self._samples.get(key)
        if not samples:
            return None
        return sum(samples) / len(samples)

    # -- published estimates -----------------------------------------------

    @property
    def snapshot(self) -> ProfileSnapshot:
        return self._snapshot

    def t_f(self) -> float:
        if self._snapshot.t_f is None:
            raise NotProfiledError("no full-iteration samples recorded yet")
        return self._snapshot.t_f

    def t_d(self, ramp_index: int) -> float:
        try:
            return self._snapshot.t_d[ramp_index]
        except KeyError:
            raise NotProfiledError(f"no deep-iteration samples for ramp {ramp_index}")

    def overhead(self) -> float:
        """Rebatching overhead c = t_s + t_d - t_f on the default path.

        Raw value: may be negative when estimates are noisy; the threshold
        computation clamps it at zero.
        """
        if self._snapshot.c is None:
            raise NotProfiledError("overhead needs full, shallow, and deep estimates")
        return self._snapshot.c

    def savings(self) -> float:
        """Per-exit savings t_f - t_s, cross-checked against t_d - c."""
        snap = self._snapshot
        if snap.c is None or snap.t_f is None:
            raise NotProfiledError("savings needs full, shallow, and deep estimates")
        start, ramp = self._default_path(snap.t_s, snap.t_d)  # type: ignore[misc]
        value = snap.t_f - snap.t_s[(start, ramp)]
        alt = snap.t_d[ramp] - snap.c
        assert abs(value - alt) < 1e-9, f"savings identity violated: {value} vs {alt}"
        return value

    def art(self, ramp_index: int, batch_size: int) -> float:
        """Adaptive rebatching threshold: max(0, c) / t_d[ramp] * batch_size.

        A split is profitable only when the exiting count strictly exceeds
        this value. The overhead is shared across ramps; only the remaining
        deep time varies per ramp.
        """
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        c = self.overhead()
        t_d = self.t_d(ramp_index)
        return max(0.0, c) / t_d * batch_size


def prime_profile_from_params(
    params: CostParams,
    ramp_layers: list[int],
    batch_size: int,
    window: int = 100,
    refresh_period: int = 100,
) -> LatencyProfile:
    """Build a profile pre-seeded with analytic estimates at ``batch_size``.

    Covers full passes, split shallow passes from fresh and from each buffer
    to every deeper ramp, and deep resumes from each buffer, so thresholds
    and flush conversions are defined from the first iteration.
    """
    total = params.total_layers
    t_f = simulated_iteration_time(params, 0, total, batch_size, False)
    t_s: dict[tuple[int, int], float] = {}
    t_d: dict[int, float] = {}
    starts: list[tuple[int, int]] = [(FRESH, 0)] + [(i, layer) for i, layer in enumerate(ramp_layers)]
    for start_idx, start_layer in starts:
        for j, exit_layer in enumerate(ramp_layers):
            if exit_layer > start_layer:
                t_s[(start_idx, j)] = simulated_iteration_time(
                    params, start_layer, exit_layer, batch_size, True
                )
        if start_idx != FRESH:
            t_d[start_idx] = simulated_iteration_time(params, start_layer, total, batch_size, False)
    profile = LatencyProfile(window=window, refresh_period=refresh_period)
    profile.prime(t_f, t_s, t_d)
    return profile


def overhead_from_estimates(t_s: float, t_d: float, t_f: float) -> float:
    """Raw rebatching overhead from explicit estimates: t_s + t_d - t_f."""
    return t_s + t_d - t_f


def art_from_estimates(c: float, t_d: float, batch_size: int) -> float:
    """Rebatching threshold from explicit estimates: max(0, c) / t_d * b."""
    if t_d <= 0:
        raise ValueError(f"t_d must be positive, got {t_d}")
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    return max(0.0, c) / t_d * batch_size


__all__ = [
    "FRESH",
    "CostParams",
    "CalibrationResult",
    "LatencyProfile",
    "ProfileSnapshot",
    "art_from_estimates",
    "calibrate",
    "overhead_from_estimates",
    "prime_profile_from_params",
    "simulated_iteration_time",
]
