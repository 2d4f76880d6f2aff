"""Greedy bank-local garbage collection.

Victims are occupied blocks whose valid-page count sits at or below the
threshold of the bank's escalation level; level 0 reclaims only fully-invalid
blocks (erase, no copies), higher levels allow progressively more copying.
Valid pages are always copied to another block inside the same bank, keeping
their sequence numbers (a copy is the same logical version), and remapped
with a compare-and-swap so a racing user rewrite wins and the stale copy is
simply left invalid.

Three invocation policies: NPGC runs collection inline in the write path when
the chosen bank is short on free blocks; PLLGC runs co-running collector
actors that claim idle banks; the adaptive variant adds a master collector
that throttles how many collectors are awake based on how many IO workers are
busy, and bars writers from the single most-starved bank (exclusiveGC).
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GcLevel:
    free_threshold: int    # level active when bank free blocks <= this
    valid_threshold: int   # victims must have <= this many valid pages


def default_levels(geometry):
    bpb, ppb = geometry.blocks_per_bank, geometry.pages_per_block
    return [
        GcLevel(max(1, bpb // 4), 0),
        GcLevel(max(1, bpb // 8), ppb // 4),
        GcLevel(max(1, bpb // 16), ppb // 2),
    ]


def default_adaptive_map(num_io_workers, max_gc_threads):
    """Quartile bands of active IO workers -> permitted GC threads: an idle
    system runs every collector, full IO load allows only the master."""
    q = max(1, num_io_workers // 4)
    bands = []
    for k in range(4):
        lo = k * q + (1 if k else 0)
        hi = (k + 1) * q if k < 3 else max(num_io_workers, 4 * q)
        bands.append((lo, hi, max(1, max_gc_threads >> k)))
    return bands


@dataclass
class GcStats:
    blocks_collected: int = 0
    valid_pages_copied: int = 0
    wasted_copies: int = 0
    erases_performed: int = 0
    busy_us: int = 0
    rounds: int = 0

    def snapshot(self):
        return GcStats(**self.__dict__)

    def delta(self, before):
        return GcStats(**{k: getattr(self, k) - getattr(before, k)
                          for k in self.__dict__})


@dataclass
class GcPolicy:
    kind: str = "PLLGC"            # NPGC | PLLGC | PLLGC_ADAPTIVE
    max_gc_threads: int = 1
    adaptive_map: list = None      # [(lo_io, hi_io, permitted)], any order
    idle_poll_us: int = 500
    master_tick_us: int = 200
    activity_window_us: int = 1000
    copy_cpu_us: int = 20          # host CPU per page copied (driver path)
    round_cpu_us: int = 5          # host CPU per erase issue / bookkeeping
    scan_cpu_us: int = 40          # host CPU per victim scan of one bank
    panic_free_blocks: int = None  # default: half the deepest level threshold
    panic_hysteresis: int = 2
    max_npgc_rounds: int = 0       # 0 = until the bank exits its thresholds

    def permitted_for(self, active_io):
        for lo, hi, permitted in self.adaptive_map:
            if lo <= active_io <= hi:
                return max(1, permitted)
        return 1


class GcController:
    def __init__(self, sched, device, state, policy, levels=None):
        self.sched = sched
        self.device = device
        self.state = state
        self.policy = policy
        self.levels = levels or default_levels(device.geometry)
        if policy.panic_free_blocks is None:
            policy.panic_free_blocks = max(1, self.levels[-1].free_threshold // 2)
        self.stats = GcStats()
        self.log = []                 # (ts_us, event, bank, block)
        self.running = False
        self.cores = None             # host CorePool, wired by the facade
        self.io_activity = lambda: 0  # wired to engine.active_workers
        self.permitted = policy.max_gc_threads
        self._paused = {}             # tid -> wake event
        self._actors = []
        self.active_threads = 0
        self.max_observed_active = 0

    def _note(self, event, bank, block=-1):
        self.log.append((self.sched.now, event, bank, block))

    def export_log(self, path):
        with open(path, "w") as fh:
            fh.write("timestamp_us,event,bank,block\n")
            for row in self.log:
                fh.write(",".join(str(v) for v in row) + "\n")

    # ---- level / victim selection -------------------------------------------

    def current_level(self, bank):
        free = self.state.banks[bank].free_blocks
        level = None
        for i, lvl in enumerate(self.levels):
            if free <= lvl.free_threshold:
                level = i
        return level

    def select_victim(self, bank, level):
        g = self.device.geometry
        lo = bank * g.blocks_per_bank
        counts = self.state.valid_count[lo:lo + g.blocks_per_bank]
        occupied = ~self.state.free_bits[bank] & ~self.state.bad_bits[bank]
        current = self.state.banks[bank].current_block
        if current is not None:
            occupied = occupied.copy()
            occupied[current] = False
        limit = self.levels[level].valid_threshold
        candidates = np.flatnonzero(occupied & (counts <= limit))
        if candidates.size == 0:
            return None
        best = candidates[np.argmin(counts[candidates])]
        return int(best)

    # ---- collection ------------------------------------------------------------

    def _claim_bank(self, bank):
        info = self.state.banks[bank]
        with info.lock:
            if info.gc_active:
                return False
            info.gc_active = True
            return True

    def _release_bank(self, bank):
        info = self.state.banks[bank]
        with info.lock:
            info.gc_active = False

    def collect_block(self, bank, block):
        """Copy the victim's valid pages into the same bank, then erase it.
        Returns the stats delta; aborts (no erase) if the bank runs out of
        room for copies, leaving already-moved pages consistent."""
        from .oob import TYPE_DATA, decode_spare, encode_spare

        g = self.device.geometry
        state = self.state
        before = self.stats.snapshot()
        t0 = self.sched.now
        gblock = bank * g.blocks_per_bank + block
        info = state.banks[bank]
        self._note("victim-selected", bank, block)
        if self.cores:
            yield self.cores.charge(self.policy.round_cpu_us)
        with info.lock:
            staging = info.free_blocks * g.pages_per_block
            if info.current_block is not None:
                staging += g.pages_per_block - info.next_page
        if int(state.valid_count[gblock]) > staging:
            # not enough same-bank room to stage the copies; bail before
            # wasting writes (the caller tries another bank; the recovery
            # repair keeps serving banks out of this state)
            self._note("abort-no-room", bank, block)
            self.stats.busy_us += self.sched.now - t0
            return self.stats.delta(before)
        aborted = False
        for page in range(self.device.written_prefix(bank, block)):
            if not state.valid_bits[gblock, page]:
                continue
            victim_ppn = g.ppn(bank, block, page)
            addr = g.split_ppn(victim_ppn)
            data, spare, desc = self.device.read_page(
                addr, want_spare=True, submit_us=self.sched.now)
            yield desc.complete_us - self.sched.now
            meta = decode_spare(spare, data)
            if meta is None:
                continue               # torn page, nothing to preserve
            lpn = meta[1]
            # the copy keeps the source page's sequence number: it is the
            # same logical version, and a fresh stamp would let a wasted
            # copy (lost CAS) outrank newer user data during recovery
            new_spare = encode_spare(TYPE_DATA, lpn, meta[2], data)
            with info.lock:
                new_ppn = state.alloc_page_in_bank(bank)
                if new_ppn is not None:
                    wdesc = self.device.write_page(
                        g.split_ppn(new_ppn), data, new_spare,
                        submit_us=self.sched.now)
            if new_ppn is None:
                self._note("abort-no-room", bank, block)
                aborted = True
                break
            yield wdesc.complete_us - self.sched.now
            if self.cores:
                yield self.cores.charge(self.policy.copy_cpu_us)
            self._note("copy", bank, block)
            if state.map_update_if(lpn, victim_ppn, new_ppn):
                state.mark_valid(new_ppn)
                state.mark_invalid(victim_ppn)
                self.stats.valid_pages_copied += 1
            else:
                # user rewrote the lpn mid-copy; the fresh page stays invalid
                self.stats.wasted_copies += 1
        if not aborted and int(state.valid_count[gblock]) == 0:
            if self.cores:
                yield self.cores.charge(self.policy.round_cpu_us)
            desc = self.device.erase_block(bank, block, submit_us=self.sched.now)
            yield desc.complete_us - self.sched.now
            state.release_block(bank, block)
            self.stats.erases_performed += 1
            self.stats.blocks_collected += 1
            self._note("erase", bank, block)
        self.stats.busy_us += self.sched.now - t0
        return self.stats.delta(before)

    # ---- NPGC (inline, write path) ----------------------------------------------

    def npgc_before_write(self, bank):
        """Collect the bank until it exits its highest breached threshold (or
        no victim qualifies) before the caller's write proceeds."""
        if self.current_level(bank) is None:
            return
        if not self._claim_bank(bank):
            # another writer is already collecting this bank; wait it out
            while self.state.banks[bank].gc_active:
                yield self.policy.idle_poll_us
            return
        try:
            rounds = 0
            cap = self.policy.max_npgc_rounds or self.device.geometry.blocks_per_bank
            while rounds < cap:
                level = self.current_level(bank)
                if level is None:
                    break
                if self.cores:
                    yield self.cores.charge(self.policy.scan_cpu_us)
                victim = self.select_victim(bank, level)
                if victim is None:
                    break
                delta = yield from self.collect_block(bank, victim)
                if not (delta.blocks_collected or delta.valid_pages_copied
                        or delta.wasted_copies):
                    break              # no staging room in this bank
                rounds += 1
            self.stats.rounds += 1 if rounds else 0
        finally:
            self._release_bank(bank)

    # ---- parallel co-running collectors -------------------------------------------

    def _eligible_banks(self):
        """Banks breaching a threshold, most starved first."""
        banks = []
        for bank, info in enumerate(self.state.banks):
            if self.current_level(bank) is not None:
                banks.append((info.free_blocks, bank))
        banks.sort()
        return [b for _, b in banks]

    def gc_worker_round(self, tid):
        """One collection round: claim an eligible bank (avoiding banks being
        written when possible), collect one victim, release. Returns the
        stats delta or None when nothing was eligible."""
        candidates = self._eligible_banks()
        if not candidates:
            return None
        quiet = [b for b in candidates if self.state.banks[b].writers_active == 0]
        ordered = quiet + [b for b in candidates if b not in quiet]
        for bank in ordered:
            if not self._claim_bank(bank):
                continue
            try:
                level = self.current_level(bank)
                if level is None:
                    continue
                if self.cores:
                    yield self.cores.charge(self.policy.scan_cpu_us)
                victim = self.select_victim(bank, level)
                if victim is None:
                    continue
                delta = yield from self.collect_block(bank, victim)
                if (delta.blocks_collected or delta.valid_pages_copied
                        or delta.wasted_copies):
                    self.stats.rounds += 1
                    return delta
                # bank has no staging room; move on to the next candidate
            finally:
                self._release_bank(bank)
        return None

    def worker_loop(self, tid):
        self.active_threads += 1
        while self.running:
            if self.policy.kind == "PLLGC_ADAPTIVE" and tid >= self.permitted:
                # non-master over the throttle puts itself to sleep
                ev = self.sched.event()
                self._paused[tid] = ev
                self.active_threads -= 1
                yield ev
                if not self.running:
                    return
                self.active_threads += 1
                continue
            did = yield from self.gc_worker_round(tid)
            self.max_observed_active = max(self.max_observed_active,
                                           self.active_threads)
            if did is None:
                yield self.policy.idle_poll_us
            else:
                yield 1   # re-check throttle between rounds
        self.active_threads -= 1

    # ---- adaptive master ---------------------------------------------------------

    def master_tick(self):
        """Throttle collector count by IO activity and flag the single most
        starved bank exclusiveGC until it recovers past the hysteresis."""
        active_io = self.io_activity()
        previous = self.permitted
        self.permitted = self.policy.permitted_for(active_io)
        if self.permitted != previous:
            self._note("throttle-change", self.permitted, active_io)
        for tid in sorted(list(self._paused)):
            if tid < self.permitted:
                ev = self._paused.pop(tid)
                ev.fire()
        panic = self.policy.panic_free_blocks
        clear_at = panic + self.policy.panic_hysteresis
        worst, worst_free = None, None
        for bank, info in enumerate(self.state.banks):
            if info.exclusive_gc and info.free_blocks >= clear_at:
                info.exclusive_gc = False
                self._note("exclusive-clear", bank)
            if worst_free is None or info.free_blocks < worst_free:
                worst, worst_free = bank, info.free_blocks
        if worst is not None and worst_free <= panic:
            if not self.state.banks[worst].exclusive_gc:
                self.state.banks[worst].exclusive_gc = True
                self._note("exclusive-set", worst)
        return self.permitted

    def master_loop(self):
        """The master is collector 0: it throttles, then collects like any
        other worker so at full IO load exactly one collector keeps running."""
        self.active_threads += 1
        while self.running:
            self.master_tick()
            did = yield from self.gc_worker_round(0)
            self.max_observed_active = max(self.max_observed_active,
                                           self.active_threads)
            yield self.policy.idle_poll_us if did is None else self.policy.master_tick_us
        self.active_threads -= 1

    # ---- lifecycle -------------------------------------------------------------------

    def start(self):
        self.running = True
        self.active_threads = 0
        if self.policy.kind == "NPGC":
            return []
        if self.policy.kind == "PLLGC_ADAPTIVE":
            if self.policy.adaptive_map is None:
                raise ValueError("adaptive policy needs an adaptive_map")
            self._actors = [self.sched.spawn(self.master_loop(), "gc-master")]
            for tid in range(1, self.policy.max_gc_threads):
                self._actors.append(
                    self.sched.spawn(self.worker_loop(tid), f"gc-worker-{tid}"))
        else:
            self.permitted = self.policy.max_gc_threads
            self._actors = [self.sched.spawn(self.worker_loop(tid), f"gc-worker-{tid}")
                            for tid in range(self.policy.max_gc_threads)]
        return self._actors

    def stop(self):
        self.running = False
        for tid in list(self._paused):
            self._paused.pop(tid).fire()

    def quiesced(self):
        return all(a.done for a in self._actors)
