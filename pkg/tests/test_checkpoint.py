import random

import numpy as np
import pytest

from bankftl.checkpoint import (Checkpointer, restore_state, serialize_state,
                                window_blocks)
from bankftl.errors import CheckpointError
from bankftl.ftl_state import UNMAPPED, FtlState
from bankftl.oob import (LPN_NONE, SPARE_BYTES, TYPE_CHECKPOINT, TYPE_DATA,
                         decode_spare, encode_spare)
from bankftl.sched import Scheduler
from bankftl.sim_flash import PageAddress, SimFlashDevice

from conftest import TINY, sector_payload, synth_block, tiny_engine

SPP = TINY.sectors_per_page


def fresh_pair(device=None):
    device = device or SimFlashDevice(TINY)
    sched = Scheduler(0)
    state = FtlState(TINY, 8, 0.875, sorted(device.bad_block_set()))
    return sched, device, state, Checkpointer(sched, device, state, k=4)


def tables_equal(a, b):
    return (np.array_equal(a.map & np.uint32(0x7FFFFFFF),
                           b.map & np.uint32(0x7FFFFFFF))
            and np.array_equal(a.free_bits, b.free_bits)
            and np.array_equal(a.valid_bits, b.valid_bits)
            and np.array_equal(a.valid_count, b.valid_count)
            and all(x.free_blocks == y.free_blocks and x.valid_pages == y.valid_pages
                    for x, y in zip(a.banks, b.banks)))


def test_spare_codec_roundtrip():
    page = b"\x3c" * TINY.page_size
    spare = encode_spare(TYPE_DATA, 77, 123456789, page)
    assert len(spare) == SPARE_BYTES <= TINY.spare_per_page
    assert decode_spare(spare, page) == (TYPE_DATA, 77, 123456789)
    assert decode_spare(spare) == (TYPE_DATA, 77, 123456789)   # crc skipped
    assert decode_spare(spare, b"\x00" * TINY.page_size) is None  # torn
    assert decode_spare(b"\xff" * SPARE_BYTES) is None            # erased
    ck = encode_spare(TYPE_CHECKPOINT, LPN_NONE, 5, page)
    assert decode_spare(ck, page)[0] == TYPE_CHECKPOINT


def test_window_block_indices():
    assert window_blocks(TINY, 2) == [0, 1, 14, 15]
    assert window_blocks(TINY, 100) == list(range(8)) + list(range(8, 16))


def test_serialize_restore_identity_random():
    rng = random.Random(21)
    for _ in range(10):
        _, device, state, _ = fresh_pair()
        for lpn in rng.sample(range(state.num_lpns), 40):
            state.map[lpn] = rng.randrange(TINY.total_pages)
        state.free_bits[:] = rng.random() < 0.5
        for _ in range(30):
            state.valid_bits[rng.randrange(TINY.total_blocks),
                             rng.randrange(TINY.pages_per_block)] = True
        state.valid_count[:] = state.valid_bits.sum(axis=1)
        for bank, info in enumerate(state.banks):
            info.free_blocks = int(state.free_bits[bank].sum())
            info.current_block = rng.choice([None, 3])
            info.next_page = rng.randrange(TINY.pages_per_block)
        state.sequence_floor(rng.randrange(1, 10_000))
        blob = serialize_state(state)
        _, _, other, _ = fresh_pair()
        restore_state(other, blob)
        assert tables_equal(state, other)
        assert other.sequence >= state.sequence
        assert other.banks[0].current_block == state.banks[0].current_block
        assert other.banks[0].next_page == state.banks[0].next_page


def test_restore_rejects_corruption():
    _, _, state, _ = fresh_pair()
    blob = bytearray(serialize_state(state))
    blob[20] ^= 0xFF
    with pytest.raises(CheckpointError):
        restore_state(state, bytes(blob))


def test_save_load_roundtrip_with_windowed_probes():
    eng = tiny_engine()
    data = {}
    for lpn in (0, 5, 9):
        for s in range(SPP):
            payload = sector_payload((lpn, s), TINY.read_unit)
            eng.write_sector(lpn * SPP + s, payload)
            data[lpn * SPP + s] = payload
    eng.flush()
    saved_map = eng.state.map.copy()
    head = eng.run(eng.ckpt.save())
    assert head[1] in window_blocks(TINY, 4)
    assert head[2] == 0            # no relocation needed on a fresh card

    device = eng.device
    eng.shutdown(clean=False)      # leave the flash image as-is
    sched, device, state, loader = fresh_pair(device)
    before = device.device_stats().read_ops
    assert sched.join(sched.spawn(loader.load(), "load"))
    reads = device.device_stats().read_ops - before
    assert loader.window_probes <= 2 * 4 * TINY.num_banks
    assert reads <= 2 * 4 * TINY.num_banks + loader.chain_reads
    # the consumed head no longer re-loads
    assert np.array_equal(state.map[saved_map != UNMAPPED],
                          saved_map[saved_map != UNMAPPED])
    sched2, device, state2, loader2 = fresh_pair(device)
    assert not sched2.join(sched2.spawn(loader2.load(), "load2"))


def test_blank_device_load_not_found():
    sched, _, _, loader = fresh_pair()
    assert sched.join(sched.spawn(loader.load(), "load")) is False


def test_two_heads_highest_sequence_wins():
    eng = tiny_engine()
    eng.write_sector(0, b"\x01" * TINY.read_unit)
    eng.flush()
    eng.run(eng.ckpt.save())                       # older chain
    eng.write_sector(SPP, b"\x02" * TINY.read_unit)   # lpn 1, sector 0
    eng.flush()
    map_after_second = eng.state.map.copy()
    eng.run(eng.ckpt.save())                       # newer chain
    device = eng.device
    eng.shutdown(clean=False)
    sched, device, state, loader = fresh_pair(device)
    assert sched.join(sched.spawn(loader.load(), "load"))
    assert state.map_lookup(1) == int(map_after_second[1])
    assert state.map_lookup(1) != UNMAPPED


def test_head_relocation_when_windows_full():
    eng = tiny_engine()
    # occupy every window block of every bank with one valid page each
    for bank in range(TINY.num_banks):
        for block in window_blocks(TINY, 4):
            lpn_base = bank * 100 + block
            synth_block(eng, bank, block, [lpn_base], fill_pages=1)
    head = eng.run(eng.ckpt.save())
    assert head[2] == 1            # exactly one relocation performed
    assert head[1] in window_blocks(TINY, 4)
    eng.state.audit()
    device = eng.device
    eng.shutdown(clean=False)
    sched, device, state, loader = fresh_pair(device)
    assert sched.join(sched.spawn(loader.load(), "load"))
    for bank in range(TINY.num_banks):
        for block in window_blocks(TINY, 4):
            lpn = bank * 100 + block
            ppn = state.map_lookup(lpn)
            assert ppn != UNMAPPED   # relocated data still mapped


def test_recovery_scan_matches_checkpoint_load():
    eng = tiny_engine()
    rng = random.Random(4)
    for step in range(300):
        lsn = rng.randrange(60 * SPP)
        eng.write_sector(lsn, sector_payload(step, TINY.read_unit))
    eng.flush()
    eng.run(eng.ckpt.save())
    device = eng.device
    eng.shutdown(clean=False)

    sched_a, _, state_a, scanner = fresh_pair(device)
    sched_a.join(sched_a.spawn(scanner.recovery_scan(), "scan"))
    sched_b, _, state_b, loader = fresh_pair(device)
    assert sched_b.join(sched_b.spawn(loader.load(), "load"))

    assert np.array_equal(state_a.map, state_b.map)
    assert np.array_equal(state_a.valid_bits, state_b.valid_bits)
    assert np.array_equal(state_a.valid_count, state_b.valid_count)
    # free bitmaps agree except the consumed chain head, erased by load
    diff = np.argwhere(state_a.free_bits != state_b.free_bits)
    assert len(diff) <= 1
    for bank, block in diff:
        assert not state_a.free_bits[bank, block]   # scan saw it written
        assert state_b.free_bits[bank, block]       # load freed the head


def test_recovery_last_writer_wins_and_torn_pages():
    device = SimFlashDevice(TINY)
    page = sector_payload("old", TINY.page_size)
    device.write_page(PageAddress(0, 0, 0), page,
                      encode_spare(TYPE_DATA, 3, 10, page))
    newer = sector_payload("new", TINY.page_size)
    device.write_page(PageAddress(1, 0, 0), newer,
                      encode_spare(TYPE_DATA, 3, 11, newer))
    lost = sector_payload("torn", TINY.page_size)
    device.write_page(PageAddress(1, 0, 1), lost,
                      encode_spare(TYPE_DATA, 4, 12, lost))
    device.corrupt_spare(PageAddress(1, 0, 1))
    sched, _, state, scanner = fresh_pair(device)
    sched.join(sched.spawn(scanner.recovery_scan(), "scan"))
    assert state.map_lookup(3) == TINY.ppn(1, 0, 0)   # highest sequence wins
    assert state.map_lookup(4) == UNMAPPED            # torn page skipped
    assert not state.free_bits[0, 0] and not state.free_bits[1, 0]
    assert state.free_bits[0, 1]


def test_recovery_blank_device_all_free():
    sched, device, state, scanner = fresh_pair()
    found = sched.join(sched.spawn(scanner.recovery_scan(), "scan"))
    assert found == 0
    assert int(state.free_bits.sum()) == TINY.total_blocks
    assert int((state.map & np.uint32(0x7FFFFFFF) != UNMAPPED).sum()) == 0


def test_roundtrip_identity_property_loop():
    rng = random.Random(88)
    for case in range(100):
        _, device, state, _ = fresh_pair()
        n = rng.randrange(0, 60)
        for lpn in rng.sample(range(state.num_lpns), n):
            state.map[lpn] = rng.randrange(TINY.total_pages)
        state.valid_count[:] = 0
        blob = serialize_state(state)
        _, _, clone, _ = fresh_pair()
        restore_state(clone, blob)
        assert tables_equal(state, clone)
