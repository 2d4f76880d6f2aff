"""Benchmark harness: workload generation, artificial aging, desk-scale
presets for the policy and scaling experiments, latency tracing, reports.

Client threads are actors that stream sector writes through the engine,
waiting for acknowledgements at the configured sync granularity and sleeping
per the think-time rules. One latency sample covers one flash-page-sized
logical write, measured from the first sector's submission to the last
sector's acknowledgement.

Aging injection synthesizes a long-used device by mutating the tables and
flash directly: it plans per-bank free-block counts and per-block
valid-page counts from clipped normal distributions, writes consistent page
data and spare metadata (stale pages carry lower sequence numbers than the
live copy of the same LPN), fills the tables directly, then rebases the
device clocks so the synthesis costs no simulated time.
"""

import json
import os
import random
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .engine import Engine, EngineConfig
from .errors import ConfigurationError, EngineStateError
from .ftl_state import UNMAPPED
from .gc_engine import GcPolicy
from .io_engine import EngineParams, IoRequest
from .oob import TYPE_DATA, encode_spare
from .sim_flash import PageAddress

MS = 1000
SEC = 1000 * MS


@dataclass
class WorkloadSpec:
    num_client_threads: int = 1
    region_lpns: int = 1024        # total working set, partitioned per client
    rounds: int = 1                # passes over the region (overwrite x N)
    pattern: str = "sequential"    # sequential | random
    io_size: int = 0               # bytes per submission; 0 = one sector
    sync_every: int = 0            # bytes between waits; 0 = every submission
    think_small_us: int = 0        # sleep after each page written
    think_large_us: int = 0        # sleep after each chunk written
    chunk_pages: int = 8
    start_jitter_us: int = 0
    seed: int = 0

    def bytes_per_thread(self, page_size):
        per = self.region_lpns // max(1, self.num_client_threads)
        return per * self.rounds * page_size


@dataclass
class AgingSpec:
    free_mean: float = 12.0        # free blocks per bank, clipped normal
    free_spread: float = 3.0
    free_min: int = 2
    valid_mean: float = 32.0       # valid pages per occupied block
    valid_spread: float = 14.0
    valid_min: int = 0
    valid_max: int = 0             # 0 = pages_per_block - 1
    seed: int = 1


@dataclass
class RunReport:
    policy: str = ""
    preset: str = ""
    seed: int = 0
    elapsed_us: int = 0
    samples: list = field(default_factory=list)   # [id, bytes, latency_us, thread]
    per_thread_avg_us: dict = field(default_factory=dict)
    blocks_collected: int = 0
    write_amplification: float = 0.0
    user_bytes: int = 0
    over_threshold: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    errors: int = 0

    def count_over(self, boundary_us):
        return sum(1 for s in self.samples if s[2] > boundary_us)

    def normalized_thread_latencies(self):
        if not self.per_thread_avg_us:
            return {}
        floor = min(self.per_thread_avg_us.values())
        return {t: v / floor for t, v in self.per_thread_avg_us.items()}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            raw = json.load(fh)
        raw["per_thread_avg_us"] = {int(k): v
                                    for k, v in raw["per_thread_avg_us"].items()}
        return cls(**raw)


# ---- client actors -----------------------------------------------------------


def _client_pages(spec, tid):
    """Deterministic page-index stream for one client within its region."""
    per = spec.region_lpns // max(1, spec.num_client_threads)
    base = tid * per
    rng = random.Random((spec.seed << 16) ^ (tid * 0x9E3779B1))
    if spec.pattern == "random":
        for _ in range(per * spec.rounds):
            yield base + rng.randrange(per)
    else:
        for _ in range(spec.rounds):
            for i in range(per):
                yield base + i


def _client_actor(eng, spec, tid, samples, thread_sums, errors):
    g = eng.device.geometry
    spp = g.sectors_per_page
    sector = g.read_unit
    io_size = spec.io_size or sector
    if io_size % sector or g.page_size % io_size:
        raise ConfigurationError("io_size must divide the page and be sectors")
    sync_every = spec.sync_every or io_size
    payload = b"\xa5" * sector
    rng = random.Random((spec.seed << 20) ^ tid)
    if spec.start_jitter_us:
        yield rng.randrange(spec.start_jitter_us)
    pages_done = 0
    unsynced = 0
    pending = []
    for page_index in _client_pages(spec, tid):
        t0 = eng.sched.now
        for s in range(spp):
            req = IoRequest("write", page_index * spp + s, payload)
            eng.io.submit(req)
            pending.append(req)
            unsynced += sector
            if unsynced >= sync_every:
                for p in pending:
                    if not p.done.fired:
                        yield p.done
                    if p.error is not None:
                        errors.append((tid, p.lsn, repr(p.error)))
                pending.clear()
                unsynced = 0
        for p in pending:
            if not p.done.fired:
                yield p.done
            if p.error is not None:
                errors.append((tid, p.lsn, repr(p.error)))
        pending.clear()
        latency = eng.sched.now - t0
        samples.append([len(samples), g.page_size, latency, tid])
        thread_sums[tid][0] += latency
        thread_sums[tid][1] += 1
        pages_done += 1
        if spec.think_small_us:
            yield spec.think_small_us
        if spec.think_large_us and pages_done % spec.chunk_pages == 0:
            yield spec.think_large_us


def run(spec, config, policy=None):
    """Drive a workload through a fresh engine; clean shutdown afterwards."""
    if policy is not None:
        config.policy = policy
    eng = Engine.start(config)
    try:
        report = drive(eng, spec)
    finally:
        if eng.live:
            eng.shutdown(clean=True)
    return report


def drive(eng, spec, preset=""):
    """Run the workload on a live engine and snapshot a report at the moment
    the last client acknowledgement lands (GC keeps running afterwards)."""
    if spec.region_lpns > eng.state.num_lpns:
        raise ConfigurationError("workload region exceeds exported capacity")
    samples = []
    errors = []
    thread_sums = {tid: [0, 0] for tid in range(spec.num_client_threads)}
    t_start = eng.sched.now
    actors = [eng.sched.spawn(
        _client_actor(eng, spec, tid, samples, thread_sums, errors),
        f"client-{tid}")
        for tid in range(spec.num_client_threads)]
    for a in actors:
        eng.pump(a.done_event)
    elapsed = eng.sched.now - t_start
    stats = eng.stats()
    report = RunReport(
        policy=eng.config.policy.kind,
        preset=preset,
        seed=spec.seed,
        elapsed_us=elapsed,
        samples=samples,
        per_thread_avg_us={tid: (s / n) for tid, (s, n) in thread_sums.items() if n},
        blocks_collected=stats["gc"]["blocks_collected"],
        write_amplification=stats["write_amplification"] or 0.0,
        user_bytes=stats["io"]["user_sectors_written"] * eng.device.geometry.read_unit,
        over_threshold={"2000": sum(1 for s in samples if s[2] > 2000)},
        counters={"io": stats["io"], "device": stats["device"],
                  "gc": stats["gc"]},
        errors=len(errors),
    )
    return report


# ---- artificial aging -----------------------------------------------------------


def _aged_payload(lpn, seq, page_size):
    head = struct.pack("<IQ", lpn, seq)
    return head + b"\x00" * (page_size - len(head))


def inject_aging(eng, aging):
    """Synthesize a long-used device (quiesced, empty engine required)."""
    if not eng.live:
        raise EngineStateError("engine must be started before aging")
    state, device, g = eng.state, eng.device, eng.device.geometry
    if int((state.map & np.uint32(0x7FFFFFFF) != UNMAPPED).sum()):
        raise EngineStateError("aging needs an empty mapping")
    rng = np.random.default_rng(aging.seed)
    ppb = g.pages_per_block
    valid_max = aging.valid_max or ppb - 1
    plans = []          # (bank, block, sorted valid page positions)
    total_valid = 0
    for bank in range(g.num_banks):
        usable = [b for b in range(g.blocks_per_bank)
                  if not state.bad_bits[bank, b]]
        free_n = int(np.clip(round(rng.normal(aging.free_mean, aging.free_spread)),
                             aging.free_min, len(usable)))
        occupied = rng.permutation(len(usable))[:len(usable) - free_n]
        for i in sorted(int(x) for x in occupied):
            block = usable[i]
            v = int(np.clip(round(rng.normal(aging.valid_mean, aging.valid_spread)),
                            aging.valid_min, valid_max))
            positions = sorted(int(p) for p in rng.permutation(ppb)[:v])
            plans.append((bank, block, positions))
            total_valid += v
    if total_valid > state.num_lpns:
        raise ConfigurationError("aging spec maps more lpns than exported")
    lpn_order = rng.permutation(state.num_lpns)[:total_valid]
    # stale pages reference live lpns with strictly lower sequence numbers
    n_stale = sum(ppb - len(p) for _, _, p in plans)
    seq_stale = 0
    seq_live = n_stale
    lpn_cursor = 0
    live_lpns = [int(x) for x in lpn_order]
    for bank, block, positions in plans:
        pos_set = set(positions)
        for page in range(ppb):
            if page in pos_set:
                lpn = live_lpns[lpn_cursor]
                lpn_cursor += 1
                seq_live += 1
                seq = seq_live
                live = True
            else:
                lpn = live_lpns[int(rng.integers(len(live_lpns)))] if live_lpns else 0
                seq_stale += 1
                seq = seq_stale
                live = False
            data = _aged_payload(lpn, seq, g.page_size)
            spare = encode_spare(TYPE_DATA, lpn, seq, data)
            device.write_page(PageAddress(bank, block, page), data, spare,
                              submit_us=eng.sched.now)
            ppn = g.ppn(bank, block, page)
            if live:
                state.map[lpn] = np.uint32(ppn)
        gblock = bank * g.blocks_per_bank + block
        state.free_bits[bank, block] = False
        state.valid_bits[gblock, positions] = True
        state.valid_count[gblock] = len(positions)
    for bank in range(g.num_banks):
        info = state.banks[bank]
        info.free_blocks = int(state.free_bits[bank].sum())
        lo = bank * g.blocks_per_bank
        info.valid_pages = int(state.valid_count[lo:lo + g.blocks_per_bank].sum())
    state.mark_valid_total = int(state.valid_count.sum())
    state.mark_invalid_total = 0
    state.sequence_floor(n_stale + total_valid + 1)
    device.reset_clocks(eng.sched.now)
    eng.reset_baseline()
    state.audit()
    return {"mapped": total_valid, "occupied_blocks": len(plans)}


def aged_read_check(eng, sample=64):
    """Every synthesized mapped lpn must read back its aged payload."""
    g = eng.device.geometry
    state = eng.state
    values = state.map & np.uint32(0x7FFFFFFF)
    mapped = np.flatnonzero(values != UNMAPPED)
    if mapped.size == 0:
        return 0
    step = max(1, mapped.size // sample)
    checked = 0
    for lpn in (int(x) for x in mapped[::step]):
        data, spare, _ = eng.device.read_page(g.split_ppn(int(values[lpn])),
                                              want_spare=True)
        got_lpn, got_seq = struct.unpack_from("<IQ", data)
        if got_lpn != lpn:
            raise AssertionError(f"aged lpn {lpn} reads back {got_lpn}")
        checked += 1
    return checked


# ---- presets -----------------------------------------------------------------


@dataclass
class PresetBundle:
    name: str
    profile: str
    workload: WorkloadSpec
    io: EngineParams
    aging: AgingSpec
    policy: GcPolicy
    alt_policy: GcPolicy = None    # comparison partner, when the experiment is a pair
    levels: list = None            # GC level table override
    notes: str = ""


def preset(name, seed=0):
    """Desk-scaled bundles for the built-in experiments."""
    if name == "npgc-vs-pllgc":
        return PresetBundle(
            name=name, profile="desk8",
            workload=WorkloadSpec(num_client_threads=1, region_lpns=2048,
                                  rounds=16, pattern="sequential", seed=seed),
            io=EngineParams(num_queues=64),
            aging=AgingSpec(free_mean=12, free_spread=3, free_min=4,
                            valid_mean=32, valid_spread=14, valid_max=60,
                            seed=seed + 7),
            policy=GcPolicy(kind="PLLGC", max_gc_threads=1),
            alt_policy=GcPolicy(kind="NPGC"),
            notes="aged single-writer overwrite x16; max 1 GC thread",
        )
    if name == "adaptive-vs-pllgc":
        # deeply aged card whose victims sit at the deepest level: every
        # collection is a long same-bank claim that nets only part of a
        # block, so collector appetite is chronic and the thread throttle
        # is what keeps collectors out of the writers' way
        from .gc_engine import GcLevel
        return PresetBundle(
            name=name, profile="desk8",
            workload=WorkloadSpec(num_client_threads=128, region_lpns=8192,
                                  rounds=2, pattern="random",
                                  think_small_us=2 * MS, think_large_us=600 * MS,
                                  chunk_pages=16, start_jitter_us=20 * MS,
                                  seed=seed),
            io=EngineParams(num_queues=64),
            aging=AgingSpec(free_mean=8, free_spread=1.5, free_min=5,
                            valid_mean=36, valid_spread=8, valid_max=58,
                            seed=seed + 11),
            policy=GcPolicy(kind="PLLGC_ADAPTIVE", max_gc_threads=8,
                            activity_window_us=5000),
            alt_policy=GcPolicy(kind="PLLGC", max_gc_threads=8,
                                activity_window_us=5000),
            levels=[GcLevel(16, 0), GcLevel(12, 16), GcLevel(8, 32)],
            notes="128 think-time clients on 8 banks; 8 GC threads max",
        )
    if name == "queue-scaling":
        # random page order decorrelates the per-client streams across the
        # dispatch hash (aligned sequential regions stride it in lockstep)
        return PresetBundle(
            name=name, profile="desk64",
            workload=WorkloadSpec(num_client_threads=64, region_lpns=16384,
                                  rounds=1, pattern="random", seed=seed),
            io=EngineParams(num_queues=64),
            aging=None,
            policy=GcPolicy(kind="PLLGC", max_gc_threads=1),
            notes="sweep num_queues over 1..64 on a fresh 64-bank card",
        )
    if name == "init-scan":
        return PresetBundle(
            name=name, profile="desk8",
            workload=WorkloadSpec(num_client_threads=8, region_lpns=14336,
                                  rounds=1, pattern="sequential", seed=seed),
            io=EngineParams(num_queues=64),
            aging=None,
            policy=GcPolicy(kind="PLLGC", max_gc_threads=1),
            notes="half-fill, clean shutdown, compare chain load vs page scan",
        )
    raise ConfigurationError(f"unknown preset {name!r}")


def _config_for(bundle, seed, policy, queues=None):
    io = EngineParams(**{**bundle.io.__dict__})
    if queues is not None:
        io.num_queues = queues
    pol = GcPolicy(**{**policy.__dict__})
    return EngineConfig(profile=bundle.profile, io=io, policy=pol,
                        levels=bundle.levels, seed=seed)


def run_preset(name, seed=0, policy=None, queues=None):
    """Run one preset once under one policy; returns the report."""
    bundle = preset(name, seed)
    pol = policy or bundle.policy
    config = _config_for(bundle, seed, pol, queues)
    eng = Engine.start(config)
    try:
        if bundle.aging is not None:
            inject_aging(eng, bundle.aging)
        spec = WorkloadSpec(**{**bundle.workload.__dict__})
        spec.seed = seed
        report = drive(eng, spec, preset=name)
    finally:
        if eng.live:
            eng.shutdown(clean=True)
    return report


def run_queue_scaling(seed=0, queue_counts=(1, 2, 4, 8, 16, 32, 64)):
    """Throughput sweep; returns [(num_queues, MB_per_s_of_simulated_time)]."""
    bundle = preset("queue-scaling", seed)
    out = []
    for q in queue_counts:
        report = run_preset("queue-scaling", seed=seed, queues=q)
        mb = report.user_bytes / (1024 * 1024)
        secs = report.elapsed_us / 1_000_000
        out.append((q, mb / secs if secs else 0.0))
    return out


def run_init_scan(seed=0):
    """Half-fill a card, save cleanly, then compare the read cost of the
    chained checkpoint load against a full page-level scan."""
    bundle = preset("init-scan", seed)
    config = _config_for(bundle, seed, bundle.policy)
    image = None
    eng = Engine.start(config)
    spec = WorkloadSpec(**{**bundle.workload.__dict__})
    spec.seed = seed
    drive(eng, spec, preset="init-scan")
    eng.shutdown(clean=True)
    device = eng.device

    # reload through the checkpoint chain, counting device reads
    from .checkpoint import Checkpointer
    from .ftl_state import FtlState
    from .sched import Scheduler

    def fresh_state():
        return FtlState(device.geometry, config.io.num_buffers,
                        config.export_ratio, sorted(device.bad_block_set()))

    before = device.device_stats().read_ops
    sched = Scheduler(seed)
    loader = Checkpointer(sched, device, fresh_state(), config.checkpoint_k)
    ok = sched.join(sched.spawn(loader.load(), "load"))
    load_reads = device.device_stats().read_ops - before
    if not ok:
        raise EngineStateError("checkpoint load failed on a clean image")

    before = device.device_stats().read_ops
    sched2 = Scheduler(seed)
    scanner = Checkpointer(sched2, device, fresh_state(), config.checkpoint_k)
    sched2.join(sched2.spawn(scanner.recovery_scan(), "scan"))
    scan_reads = device.device_stats().read_ops - before
    return {
        "load_reads": load_reads,
        "window_probes": loader.window_probes,
        "chain_reads": loader.chain_reads,
        "scan_reads": scan_reads,
        "ratio": scan_reads / load_reads if load_reads else 0.0,
        "num_banks": device.geometry.num_banks,
        "k": config.checkpoint_k,
    }


# ---- report emission ------------------------------------------------------------


def emit_report(report, outdir):
    """latency CSV, per-thread normalized-average CSV, summary text, JSON."""
    os.makedirs(outdir, exist_ok=True)
    paths = {}
    p = os.path.join(outdir, "latency.csv")
    with open(p, "w") as fh:
        fh.write("request_id,bytes,latency_us,thread\n")
        for row in report.samples:
            fh.write(",".join(str(v) for v in row) + "\n")
    paths["latency"] = p
    p = os.path.join(outdir, "thread_latency.csv")
    norm = report.normalized_thread_latencies()
    with open(p, "w") as fh:
        fh.write("thread,avg_latency_us,normalized\n")
        for tid in sorted(norm):
            fh.write(f"{tid},{report.per_thread_avg_us[tid]:.3f},{norm[tid]:.6f}\n")
    paths["threads"] = p
    p = os.path.join(outdir, "summary.txt")
    with open(p, "w") as fh:
        fh.write(f"preset: {report.preset}\n")
        fh.write(f"policy: {report.policy}\n")
        fh.write(f"seed: {report.seed}\n")
        fh.write(f"elapsed_s: {report.elapsed_us / 1_000_000:.3f}\n")
        fh.write(f"user_bytes: {report.user_bytes}\n")
        fh.write(f"blocks_garbage_collected: {report.blocks_collected}\n")
        fh.write(f"write_amplification: {report.write_amplification:.4f}\n")
        for bound, count in report.over_threshold.items():
            fh.write(f"samples_over_{bound}us: {count}\n")
        fh.write(f"request_errors: {report.errors}\n")
    paths["summary"] = p
    p = os.path.join(outdir, "report.json")
    report.to_json(p)
    paths["json"] = p
    return paths
