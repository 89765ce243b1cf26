import random

import pytest

from eesim.errors import SimInvariantError
from eesim.kv_ledger import FillMode, KVLedger, SlotState


def test_compute_full_column():
    ledger = KVLedger(40)
    assert ledger.record_compute(0, 0, (0, 40)) == 40
    stats = ledger.stats()
    assert stats.logical_slots == 40
    assert stats.physical_blocks == 40
    assert stats.total_blocks_allocated == 40
    assert stats.duplicated_blocks == 0


def test_overlapping_compute_rejected():
    ledger = KVLedger(40)
    ledger.record_compute(0, 0, (0, 25))
    with pytest.raises(SimInvariantError):
        ledger.record_compute(0, 0, (20, 30))
    # Disjoint continuation is fine.
    ledger.record_compute(0, 0, (25, 40))


def test_virtual_map_fill():
    ledger = KVLedger(40)
    ledger.record_compute(0, 0, (0, 25))
    new_blocks = ledger.fill_missing(0, 0, 25, FillMode.VIRTUAL_MAP)
    assert new_blocks == 0
    assert ledger.stats().physical_blocks == 25
    assert ledger.stats().fill_allocated_blocks == 0
    source = ledger.slot_block(0, 0, 24)
    for layer in range(25, 40):
        assert ledger.slot_state(0, 0, layer) is SlotState.MAPPED
        assert ledger.slot_block(0, 0, layer) == source


def test_physical_copy_fill():
    ledger = KVLedger(40)
    ledger.record_compute(0, 0, (0, 25))
    new_blocks = ledger.fill_missing(0, 0, 25, FillMode.PHYSICAL_COPY)
    assert new_blocks == 15
    stats = ledger.stats()
    assert stats.physical_blocks == 40
    assert stats.duplicated_blocks == 15
    assert stats.fill_allocated_blocks == 15
    for layer in range(25, 40):
        assert ledger.slot_state(0, 0, layer) is SlotState.COMPUTED


def test_fill_when_nothing_missing_is_warned_noop():
    ledger = KVLedger(40)
    ledger.record_compute(0, 0, (0, 40))
    assert ledger.fill_missing(0, 0, 25, FillMode.VIRTUAL_MAP) == 0
    assert ledger.fill_noop_warnings == 1


def test_release_returns_blocks_and_rejects_double_release():
    ledger = KVLedger(40)
    ledger.record_compute(0, 0, (0, 25))
    ledger.fill_missing(0, 0, 25, FillMode.VIRTUAL_MAP)
    ledger.record_compute(0, 1, (0, 40))
    assert ledger.release(0) == 65
    assert ledger.live_blocks == 0
    with pytest.raises(KeyError):
        ledger.release(0)
    with pytest.raises(KeyError):
        ledger.release(77)


def test_refcount_conservation_under_random_operations():
    rng = random.Random(3)
    ledger = KVLedger(16)
    live = set()
    token_count = {}
    for step in range(400):
        op = rng.random()
        if op < 0.5 or not live:
            rid = rng.randint(0, 20)
            if rid not in live:
                live.add(rid)
                token_count[rid] = 0
            tok = token_count[rid]
            token_count[rid] += 1
            exit_layer = rng.randint(1, 16)
            ledger.record_compute(rid, tok, (0, exit_layer))
            if exit_layer < 16 and rng.random() < 0.7:
                mode = FillMode.VIRTUAL_MAP if rng.random() < 0.5 else FillMode.PHYSICAL_COPY
                ledger.fill_missing(rid, tok, exit_layer, mode)
        else:
            rid = rng.choice(sorted(live))
            ledger.release(rid)
            live.discard(rid)
        assert ledger.refcount_total() == ledger.populated_slots()
    for rid in sorted(live):
        ledger.release(rid)
    assert ledger.live_blocks == 0
    assert ledger.refcount_total() == 0


def test_redundancy_closed_form():
    # 8 tokens, half exit at layer 25 of 40 and are later physically filled.
    ledger = KVLedger(40)
    for tok in range(8):
        if tok % 2 == 0:
            ledger.record_compute(0, tok, (0, 25))
            ledger.fill_missing(0, tok, 25, FillMode.PHYSICAL_COPY)
        else:
            ledger.record_compute(0, tok, (0, 40))
    stats = ledger.stats()
    assert stats.logical_slots == 8 * 40
    assert stats.duplicated_blocks == 4 * 15
    assert stats.redundancy_fraction == pytest.approx(0.5 * 15 / 40)
    assert stats.redundancy_fraction == pytest.approx(0.1875)


def test_mapped_slots_read_from_exit_layer_block():
    ledger = KVLedger(8)
    ledger.record_compute(1, 0, (0, 4))
    ledger.fill_missing(1, 0, 4, FillMode.VIRTUAL_MAP)
    ledger.check_ready_below(1, 8, 1)  # no missing slot anywhere
    with pytest.raises(SimInvariantError):
        ledger.record_compute(1, 0, (4, 8))  # mapped slots are read-only


def test_readiness_check_detects_missing():
    ledger = KVLedger(8)
    ledger.record_compute(0, 0, (0, 4))
    ledger.check_ready_below(0, 4, 1)
    with pytest.raises(SimInvariantError):
        ledger.check_ready_below(0, 8, 1)
