"""Multi-queue IO front end with buffered write and read paths.

Requests are dispatched to per-queue FIFO deques, each drained by one worker
actor, so many flash operations are in flight although each worker issues its
device ops synchronously. Writes land in page-sized cache buffers (empty /
partially dirty / fully dirty); evicting a non-empty buffer swaps its contents
into a detached page which is merged with flash if partial, programmed to the
next page of some bank's current-writing block, and only then mapped.

Lock discipline: buffer contents mutate only under the slot lock; the buffer
lookup table is read without locks and confirmed under the slot lock; a
per-LPN claim bit serializes buffer allocation for one LPN; page allocation
plus device submit happen under the bank lock so a block's pages are
programmed strictly in order. No lock is ever held across a virtual wait.

Device backpressure is inherent in the synchronous path (queue occupancy is
charged as wait time), so no retry/backoff loop is needed here; the raw DMA
surface keeps its explicit backpressure error for direct users.
"""

import threading
from collections import deque
from dataclasses import dataclass

from . import oob
from .errors import (AddressError, ConfigurationError, EngineStateError,
                     ExhaustionError)
from .ftl_state import UNMAPPED


@dataclass
class EngineParams:
    num_queues: int = 64
    num_buffers: int = 256
    buffer_size: int = 0          # 0 = flash page size; must match it otherwise
    idle_flush_seconds: float = 60.0
    dispatch: str = "lpn"         # "lpn" | "round_robin"
    cpu_us: int = 10              # per-request worker cost (copy + lookup)
    daemon_tick_us: int = 1_000_000
    gc_wait_us: int = 500         # writer poll interval when space is exhausted
    exhaust_timeout_us: int = 30_000_000
    gc_reserve_blocks: int = 1    # per-bank blocks only GC copies may consume

    @classmethod
    def from_text(cls, text):
        params = cls()
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not hasattr(params, key):
                raise ConfigurationError(f"unknown engine config key {key!r}")
            current = getattr(params, key)
            if isinstance(current, str):
                setattr(params, key, value)
            elif isinstance(current, float):
                setattr(params, key, float(value))
            else:
                setattr(params, key, int(value))
        return params


class IoRequest:
    __slots__ = ("kind", "lsn", "data", "submit_us", "done", "result", "error")

    def __init__(self, kind, lsn, data=b""):
        self.kind = kind
        self.lsn = lsn
        self.data = data
        self.submit_us = None
        self.done = None
        self.result = None
        self.error = None


class BufferSlot:
    __slots__ = ("index", "lock", "lpn", "data", "dirty", "last_access")

    def __init__(self, index, size):
        self.index = index
        self.lock = threading.Lock()
        self.lpn = None
        self.data = bytearray(size)
        self.dirty = 0
        self.last_access = 0


class IoEngine:
    def __init__(self, sched, device, state, params=None):
        self.sched = sched
        self.device = device
        self.state = state
        self.params = params or EngineParams()
        g = device.geometry
        if self.params.buffer_size == 0:
            self.params.buffer_size = g.page_size
        if self.params.buffer_size != g.page_size:
            raise ConfigurationError("buffer_size must equal the flash page size")
        if g.sectors_per_page < 2:
            raise ConfigurationError("engine needs at least 2 sectors per page")
        self.spp = g.sectors_per_page
        self.sector_size = g.read_unit
        self.full_mask = (1 << self.spp) - 1
        self.num_sectors = state.num_lpns * self.spp
        self.slots = [BufferSlot(i, g.page_size)
                      for i in range(self.params.num_buffers)]
        self.empty_q = deque(range(self.params.num_buffers))
        self.full_q = deque()
        self.queues = [deque() for _ in range(self.params.num_queues)]
        self._wake = [None] * self.params.num_queues
        self._rr = 0
        self._bank_cursor = 0
        self.gc = None                    # wired by the facade
        self.cores = None                 # host CorePool, wired by the facade
        self.policy_kind = "PLLGC"
        self.running = False
        self.active_workers = 0
        self.last_work_us = [-10**15] * self.params.num_queues
        self._busy = [False] * self.params.num_queues
        self.counters = {
            "user_sectors_written": 0,
            "user_sectors_read": 0,
            "cache_hits": 0,
            "cache_misses": 0,
            "read_hits": 0,
            "read_misses": 0,
            "merges": 0,
            "evictions": 0,
            "daemon_flushes": 0,
            "user_pages_flushed": 0,
            "space_waits": 0,
        }
        self.error_log = []

    # ---- dispatch ---------------------------------------------------------

    def _dispatch(self, req):
        if self.params.dispatch == "round_robin":
            self._rr = (self._rr + 1) % self.params.num_queues
            return self._rr
        return (req.lsn // self.spp) % self.params.num_queues

    def recent_active(self, window_us, now_us):
        """Workers mid-request or that finished one within the window; this
        is the 'awake kthreads' signal the adaptive collector throttles on."""
        floor = now_us - window_us
        return sum(1 for qi, t in enumerate(self.last_work_us)
                   if self._busy[qi] or t >= floor)

    def submit(self, req):
        if not self.running:
            raise EngineStateError("engine is not serving")
        if not (0 <= req.lsn < self.num_sectors):
            raise AddressError(f"sector {req.lsn} outside exported capacity")
        req.submit_us = self.sched.now
        req.done = self.sched.event()
        qi = self._dispatch(req)
        self.queues[qi].append(req)
        wake = self._wake[qi]
        if wake is not None:
            self._wake[qi] = None
            wake.fire()
        return req

    # ---- workers ------------------------------------------------------------

    def worker_loop(self, qi):
        queue = self.queues[qi]
        while True:
            if not queue:
                if not self.running:
                    return
                self.active_workers -= 1
                ev = self.sched.event()
                self._wake[qi] = ev
                yield ev
                self.active_workers += 1
                continue
            req = queue.popleft()
            self._busy[qi] = True
            yield self.cores.charge(self.params.cpu_us) if self.cores else self.params.cpu_us
            self.last_work_us[qi] = self.sched.now
            try:
                if req.kind == "write":
                    yield from self._write_sector(req.lsn, req.data)
                    req.result = True
                elif req.kind == "read":
                    req.result = yield from self._read_sector(req.lsn)
                elif req.kind == "flush":
                    yield from self.flush_all()
                    req.result = True
                else:
                    raise AddressError(f"unknown request kind {req.kind!r}")
            except Exception as exc:      # surfaced on the request handle
                req.error = exc
                self.error_log.append((self.sched.now, req.kind, req.lsn, repr(exc)))
            self.last_work_us[qi] = self.sched.now
            self._busy[qi] = False
            req.done.fire(req)

    # ---- write path -----------------------------------------------------------

    def _write_into_slot(self, slot, off, data):
        base = off * self.sector_size
        slot.data[base:base + self.sector_size] = data
        was_full = slot.dirty == self.full_mask
        slot.dirty |= 1 << off
        slot.last_access = self.sched.now
        if slot.dirty == self.full_mask and not was_full:
            self.full_q.append(slot.index)

    def _write_sector(self, lsn, data):
        if len(data) != self.sector_size:
            raise AddressError("write payload must be one sector")
        lpn, off = divmod(lsn, self.spp)
        state = self.state
        detached = None
        while True:
            slot_idx = state.buf_find(lpn)
            if slot_idx is not None:
                slot = self.slots[slot_idx]
                with slot.lock:
                    if state.buf_lookup[slot_idx] == lpn:   # confirm under lock
                        self._write_into_slot(slot, off, data)
                        self.counters["cache_hits"] += 1
                        self.counters["user_sectors_written"] += 1
                        return
                # lookup was stale; fall through to allocation
            if not state.try_claim_alloc(lpn):
                # someone else is installing a buffer for this lpn
                yield 1
                continue
            try:
                if state.buf_find(lpn) is not None:
                    continue                      # retry the hit path
                picked = self._select_buffer()
                if picked is None:
                    yield 1                       # every slot mid-transition
                    continue
                slot, origin = picked
                with slot.lock:
                    if not self._selection_valid(slot, origin):
                        continue
                    if slot.lpn is not None:
                        # swap contents into a detached page and flush below
                        detached = (slot.lpn, slot.data, slot.dirty)
                        slot.data = bytearray(self.params.buffer_size)
                        self.counters["evictions"] += 1
                    state.buf_set(slot.index, lpn)
                    slot.lpn = lpn
                    slot.dirty = 0
                    self._write_into_slot(slot, off, data)
                self.counters["cache_misses"] += 1
                self.counters["user_sectors_written"] += 1
                break
            finally:
                state.release_alloc(lpn)
        if detached is not None:
            yield from self._flush_page(*detached)

    def _selection_valid(self, slot, origin):
        if origin == "empty":
            return slot.lpn is None
        if origin == "full":
            return slot.lpn is not None and slot.dirty == self.full_mask
        return slot.lpn is not None and slot.dirty != self.full_mask

    def _select_buffer(self):
        """Preference order empty > full > LRU partial (stale queue entries
        are re-validated under the slot lock by the caller)."""
        try:
            return self.slots[self.empty_q.popleft()], "empty"
        except IndexError:
            pass
        try:
            return self.slots[self.full_q.popleft()], "full"
        except IndexError:
            pass
        best = None
        for slot in self.slots:
            if slot.lpn is None or slot.dirty == self.full_mask:
                continue
            if best is None or slot.last_access < best.last_access:
                best = slot
        if best is not None:
            return best, "partial"
        return None

    # ---- flush / merge ----------------------------------------------------------

    def _read_mapped_page(self, lpn, offset=0, length=None):
        """Read the flash copy of lpn, re-validating the map after the read:
        GC may move the page (and later erase the old block) between lookup
        and read, so a changed entry means the bytes must be fetched again."""
        for _ in range(16):
            ppn = self.state.map_lookup(lpn)
            if ppn == UNMAPPED:
                return None
            addr = self.device.geometry.split_ppn(ppn)
            data, _, desc = self.device.read_page(
                addr, offset, length, submit_us=self.sched.now)
            yield desc.complete_us - self.sched.now
            if self.state.map_lookup(lpn) == ppn:
                return data
        raise ExhaustionError(f"lpn {lpn} kept moving during read")

    def _program_lpn_page(self, lpn, buf, dirty_mask):
        """Merge-if-partial and program; mapping is the caller's step."""
        if dirty_mask != self.full_mask:
            flash = yield from self._read_mapped_page(lpn)
            self.counters["merges"] += 1
            for s in range(self.spp):
                if dirty_mask & (1 << s):
                    continue
                base = s * self.sector_size
                if flash is None:
                    buf[base:base + self.sector_size] = b"\x00" * self.sector_size
                else:
                    buf[base:base + self.sector_size] = flash[base:base + self.sector_size]
        page = bytes(buf)
        seq = self.state.next_sequence()
        spare = oob.encode_spare(oob.TYPE_DATA, lpn, seq, page)
        ppn = yield from self._program_page(page, spare)
        return ppn

    def _map_flushed(self, lpn, ppn):
        old = self.state.map_update_locked(lpn, ppn)
        self.state.mark_valid(ppn)
        if old != UNMAPPED:
            self.state.mark_invalid(old)
        self.counters["user_pages_flushed"] += 1

    def _flush_page(self, lpn, buf, dirty_mask):
        ppn = yield from self._program_lpn_page(lpn, buf, dirty_mask)
        self._map_flushed(lpn, ppn)

    def _bank_has_space(self, bank):
        """Room for a user write, mirroring alloc_page_in_bank's reserve
        rules: an open current block (not GC's last staging space), or free
        blocks over the GC reserve. The reserve guarantees collection can
        always stage its copies, so a full card cannot deadlock reclaim."""
        info = self.state.banks[bank]
        reserve = self.params.gc_reserve_blocks
        if info.current_block is not None:
            return reserve == 0 or info.free_blocks > 0
        return info.free_blocks > reserve

    def pick_bank(self, exclude=()):
        """Rotate over banks with room, skipping GC-flagged ones when any
        alternative exists; with every candidate flagged, pick at random."""
        g = self.device.geometry
        banks = self.state.banks
        candidates = []
        for i in range(g.num_banks):
            bank = (self._bank_cursor + i) % g.num_banks
            if bank in exclude or not self._bank_has_space(bank):
                continue
            candidates.append(bank)
        if not candidates:
            return None
        for bank in candidates:
            info = banks[bank]
            if not (info.gc_active or info.exclusive_gc):
                self._bank_cursor = (bank + 1) % g.num_banks
                return bank
        bank = self.sched.rng.choice(candidates)
        self._bank_cursor = (bank + 1) % g.num_banks
        return bank

    def get_physical_page(self, exclude=()):
        """Allocate the next page of some bank's current block (public
        surface; the engine's own flushes use _program_page, which couples
        this with the device submit under the bank lock)."""
        bank = yield from self._pick_bank_gc(exclude)
        ppn = self.state.alloc_page_in_bank(bank, self.params.gc_reserve_blocks)
        if ppn is None:
            raise ExhaustionError(f"bank {bank} exhausted")
        return self.device.geometry.split_ppn(ppn), bank

    def _pick_bank_gc(self, exclude=()):
        """Bank choice plus the NPGC hook: under NPGC, a breached bank is
        collected inline before the write proceeds."""
        deadline = self.sched.now + self.params.exhaust_timeout_us
        while True:
            bank = self.pick_bank(exclude)
            if bank is not None:
                if (self.policy_kind == "NPGC" and self.gc is not None
                        and self.gc.current_level(bank) is not None):
                    yield from self.gc.npgc_before_write(bank)
                return bank
            # nothing has room: NPGC collects in place, parallel GC is waited on
            if self.policy_kind == "NPGC" and self.gc is not None:
                for b in range(self.device.geometry.num_banks):
                    yield from self.gc.npgc_before_write(b)
                if any(self._bank_has_space(b)
                       for b in range(self.device.geometry.num_banks)):
                    continue
                raise ExhaustionError("no free block in any bank after NPGC")
            if self.sched.now >= deadline:
                raise ExhaustionError("no free block appeared before timeout")
            self.counters["space_waits"] += 1
            yield self.params.gc_wait_us

    def _program_page(self, data, spare, exclude=()):
        g = self.device.geometry
        while True:
            bank = yield from self._pick_bank_gc(exclude)
            info = self.state.banks[bank]
            with info.lock:
                ppn = self.state.alloc_page_in_bank(
                    bank, self.params.gc_reserve_blocks)
                if ppn is not None:
                    info.writers_active += 1
                    desc = self.device.write_page(
                        g.split_ppn(ppn), data, spare, submit_us=self.sched.now)
            if ppn is None:
                yield 1                          # racer drained the bank
                continue
            yield desc.complete_us - self.sched.now
            info.writers_active -= 1
            return ppn

    # ---- read path -----------------------------------------------------------

    def _read_sector(self, lsn):
        lpn, off = divmod(lsn, self.spp)
        self.counters["user_sectors_read"] += 1
        slot_idx = self.state.buf_find(lpn)
        if slot_idx is not None:
            slot = self.slots[slot_idx]
            with slot.lock:
                if self.state.buf_lookup[slot_idx] == lpn and slot.dirty & (1 << off):
                    base = off * self.sector_size
                    slot.last_access = self.sched.now
                    self.counters["read_hits"] += 1
                    return bytes(slot.data[base:base + self.sector_size])
        self.counters["read_misses"] += 1
        data = yield from self._read_mapped_page(
            lpn, off * self.sector_size, self.sector_size)
        if data is None:
            return b"\x00" * self.sector_size   # never-written sector
        return data

    # ---- daemon / barriers ---------------------------------------------------

    def _flush_slot_copy(self, slot):
        """Flush a snapshot; the map advances and the slot empties only if
        the slot did not change while the snapshot was being programmed.
        A changed slot means newer acknowledged sectors exist: the stale
        programmed page is simply never mapped (GC reclaims it) and the
        newer contents flush on a later pass."""
        with slot.lock:
            lpn, dirty, stamp = slot.lpn, slot.dirty, slot.last_access
            if lpn is None or dirty == 0:
                return False
            snapshot = bytearray(slot.data)
        ppn = yield from self._program_lpn_page(lpn, snapshot, dirty)
        with slot.lock:
            if (slot.lpn, slot.dirty, slot.last_access) != (lpn, dirty, stamp):
                return False
            self._map_flushed(lpn, ppn)
            self.state.buf_set(slot.index, None)
            slot.lpn = None
            slot.dirty = 0
            self.empty_q.append(slot.index)
        return True

    def flush_daemon_tick(self, now_us):
        """One sweep: flush every buffer idle past the threshold."""
        idle_us = int(self.params.idle_flush_seconds * 1_000_000)
        flushed = 0
        for slot in self.slots:
            if slot.lpn is None or slot.dirty == 0:
                continue
            if now_us - slot.last_access < idle_us:
                continue
            try:
                did = yield from self._flush_slot_copy(slot)
            except ExhaustionError as exc:
                self.error_log.append((self.sched.now, "daemon", slot.index, repr(exc)))
                continue                         # retried next tick
            if did:
                flushed += 1
                self.counters["daemon_flushes"] += 1
        return flushed

    def flush_daemon_loop(self):
        while self.running:
            yield self.params.daemon_tick_us
            if not self.running:
                return
            yield from self.flush_daemon_tick(self.sched.now)

    def flush_all(self):
        """Barrier: every write acknowledged before the call is durable after."""
        failed = []
        for slot in self.slots:
            try:
                yield from self._flush_slot_copy(slot)
            except ExhaustionError:
                failed.append(slot.lpn)
        if failed:
            raise ExhaustionError(f"unflushed lpns after barrier: {failed}")

    # ---- lifecycle -------------------------------------------------------------

    def start_workers(self):
        self.running = True
        self.active_workers = self.params.num_queues
        return [self.sched.spawn(self.worker_loop(qi), f"io-worker-{qi}")
                for qi in range(self.params.num_queues)]

    def stop(self):
        self.running = False
        for qi, wake in enumerate(self._wake):
            if wake is not None:
                self._wake[qi] = None
                wake.fire()
