"""KV-cache accounting at (request, token, layer) granularity.

Each token owns a logical column of one slot per layer. Computing a layer
allocates a fresh physical block; an early-exited token's skipped layers are
filled later either by physically duplicating blocks (PhysicalCopy) or by
mapping the skipped slots read-only onto the exit layer's block (VirtualMap),
which allocates nothing. Block granularity is one (token, layer) slot so the
redundancy arithmetic is exact.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import SimInvariantError


class FillMode(enum.Enum):
    PHYSICAL_COPY = "physical"
    VIRTUAL_MAP = "virtual"

    @classmethod
    def parse(cls, name: str) -> "FillMode":
        key = name.strip().lower()
        for mode in cls:
            if key in (mode.value, mode.name.lower()):
                return mode
        raise ValueError(f"unknown KV fill mode {name!r}")


class SlotState(enum.Enum):
    MISSING = "missing"
    COMPUTED = "computed"
    MAPPED = "mapped"


@dataclass(frozen=True)
class MemStats:
    """Cumulative accounting plus the current live block count.

    ``logical_slots`` counts slots at token granularity: every tracked token
    column logically owns ``total_layers`` slots whether or not they were
    materialized. ``physical_blocks`` is the live count (drops on release);
    ``total_blocks_allocated`` and ``duplicated_blocks`` are cumulative.
    """

    logical_slots: int
    physical_blocks: int
    duplicated_blocks: int
    redundancy_fraction: float
    total_blocks_allocated: int
    fill_allocated_blocks: int

    def to_dict(self) -> dict:
        return {
            "logical_slots": self.logical_slots,
            "physical_blocks": self.physical_blocks,
            "duplicated_blocks": self.duplicated_blocks,
            "redundancy_fraction": self.redundancy_fraction,
            "total_blocks_allocated": self.total_blocks_allocated,
            "fill_allocated_blocks": self.fill_allocated_blocks,
        }


class _Column:
    """Per-token layer slots: (state, block_id) per layer."""

    __slots__ = ("states", "blocks")

    def __init__(self, total_layers: int):
        self.states = [SlotState.MISSING] * total_layers
        self.blocks: list[int | None] = [None] * total_layers


class KVLedger:
    def __init__(self, total_layers: int):
        if total_layers < 1:
            raise ValueError("total_layers must be >= 1")
        self.total_layers = total_layers
        self._columns: dict[tuple[int, int], _Column] = {}
        self._refcounts: dict[int, int] = {}
        self._next_block = 0
        self._columns_tracked = 0  # cumulative, survives release
        self._total_allocated = 0
        self._duplicated = 0
        self._fill_allocated = 0
        self.fill_noop_warnings = 0

    # -- operations ----------------------------------------------------------

    def record_compute(self, request_id: int, token_idx: int, layer_range: tuple[int, int]) -> int:
        """Mark [start, end) computed for the token, one fresh block per layer.

        Returns the number of blocks allocated. Writing over a non-missing
        slot is a double-write and aborts.
        """
        start, end = layer_range
        if not (0 <= start < end <= self.total_layers):
            raise ValueError(f"bad layer range [{start}, {end})")
        key = (request_id, token_idx)
        col = self._columns.get(key)
        if col is None:
            col = _Column(self.total_layers)
            self._columns[key] = col
            self._columns_tracked += 1
        for layer in range(start, end):
            if col.states[layer] is not SlotState.MISSING:
                raise SimInvariantError(
                    f"double write: request {request_id} token {token_idx} layer {layer} "
                    f"already {col.states[layer].value}"
                )
        for layer in range(start, end):
            block = self._next_block
            self._next_block += 1
            self._refcounts[block] = 1
            col.states[layer] = SlotState.COMPUTED
            col.blocks[layer] = block
        self._total_allocated += end - start
        return end - start

    def fill_missing(self, request_id: int, token_idx: int, exit_layer: int, mode: FillMode) -> int:
        """Fill the skipped layers [exit_layer, total) of an exited token.

        PhysicalCopy allocates one new block per skipped layer; VirtualMap
        points every skipped slot at the last computed layer's block and
        allocates nothing. Returns the number of blocks allocated. Filling
        when nothing is missing is a no-op counted in fill_noop_warnings.
        """
        if not (0 < exit_layer <= self.total_layers):
            raise ValueError(f"bad exit_layer {exit_layer}")
        key = (request_id, token_idx)
        col = self._columns.get(key)
        if col is None:
            raise SimInvariantError(f"fill for unknown token: request {request_id} token {token_idx}")
        missing = [l for l in range(exit_layer, self.total_layers) if col.states[l] is SlotState.MISSING]
        if not missing:
            self.fill_noop_warnings += 1
            return 0
        if col.states[exit_layer - 1] is not SlotState.COMPUTED:
            raise SimInvariantError(
                f"fill source missing: request {request_id} token {token_idx} "
                f"has no computed slot at layer {exit_layer - 1}"
            )
        if mode is FillMode.PHYSICAL_COPY:
            for layer in missing:
                block = self._next_block
                self._next_block += 1
                self._refcounts[block] = 1
                col.states[layer] = SlotState.COMPUTED
                col.blocks[layer] = block
            self._total_allocated += len(missing)
            self._duplicated += len(missing)
            self._fill_allocated += len(missing)
            return len(missing)
        source = col.blocks[exit_layer - 1]
        assert source is not None
        for layer in missing:
            col.states[layer] = SlotState.MAPPED
            col.blocks[layer] = source
            self._refcounts[source] += 1
        return 0

    def release(self, request_id: int) -> int:
        """Free every slot of the request; returns the number of blocks freed."""
        keys = [k for k in self._columns if k[0] == request_id]
        if not keys:
            raise KeyError(f"unknown or already released request {request_id}")
        freed = 0
        for key in keys:
            col = self._columns.pop(key)
            for layer in range(self.total_layers):
                block = col.blocks[layer]
                if block is None:
                    continue
                self._refcounts[block] -= 1
                if self._refcounts[block] == 0:
                    del self._refcounts[block]
                    freed += 1
        return freed

    # -- queries -------------------------------------------------------------

    def slot_state(self, request_id: int, token_idx: int, layer: int) -> SlotState:
        col = self._columns.get((request_id, token_idx))
        if col is None:
            return SlotState.MISSING
        return col.states[layer]

    def slot_block(self, request_id: int, token_idx: int, layer: int) -> int | None:
        col = self._columns.get((request_id, token_idx))
        return None if col is None else col.blocks[layer]

    def has_request(self, request_id: int) -> bool:
        return any(k[0] == request_id for k in self._columns)

    @property
    def live_blocks(self) -> int:
        return len(self._refcounts)

    def refcount_total(self) -> int:
        return sum(self._refcounts.values())

    def populated_slots(self) -> int:
        """Current non-missing slots (for refcount conservation checks)."""
        return sum(
            1
            for col in self._columns.values()
            for state in col.states
            if state is not SlotState.MISSING
        )

    def check_ready_below(self, request_id: int, upto_layer: int, n_tokens: int) -> None:
        """Assert the first n_tokens of the request have no missing slot below upto_layer."""
        for token in range(n_tokens):
            col = self._columns.get((request_id, token))
            if col is None:
                raise SimInvariantError(f"request {request_id} token {token} has no KV column")
            for layer in range(upto_layer):
                if col.states[layer] is SlotState.MISSING:
                    raise SimInvariantError(
                        f"missing KV hazard: request {request_id} token {token} layer {layer}"
                    )

    def stats(self) -> MemStats:
        logical = self._columns_tracked * self.total_layers
        return MemStats(
            logical_slots=logical,
            physical_blocks=self.live_blocks,
            duplicated_blocks=self._duplicated,
            redundancy_fraction=(self._duplicated / logical) if logical else 0.0,
            total_blocks_allocated=self._total_allocated,
            fill_allocated_blocks=self._fill_allocated,
        )
