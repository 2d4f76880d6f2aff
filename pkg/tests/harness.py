"""Randomized differential driver: the engine under test versus a dict-backed
shadow block device, with quiescent audits, flush-daemon ticks, GC pressure
across every escalation level, and clean/dirty shutdown cycles."""

import random

from bankftl.engine import Engine, EngineConfig
from bankftl.gc_engine import GcLevel, GcPolicy
from bankftl.io_engine import EngineParams
from bankftl.sim_flash import PROFILES

from conftest import sector_payload


def _engine(profile, image, seed, policy_kind, queues=8, buffers=16):
    # the stress regime runs the card hot; the deepest level accepts any
    # non-full victim so capped-greedy selection cannot wedge on evenly
    # spread dirt (cf. aggressive-level selection in log-structured flash)
    ppb = PROFILES[profile].pages_per_block
    bpb = PROFILES[profile].blocks_per_bank
    levels = [GcLevel(max(1, bpb // 4), 0),
              GcLevel(max(1, bpb // 8), ppb // 4),
              GcLevel(max(1, bpb // 16), ppb - 1)]
    cfg = EngineConfig(
        profile=profile,
        io=EngineParams(num_queues=queues, num_buffers=buffers),
        policy=GcPolicy(kind=policy_kind,
                        max_gc_threads=1 if policy_kind != "PLLGC_ADAPTIVE" else 2),
        seed=seed, image_path=image, export_ratio=0.8, levels=levels)
    return Engine.start(cfg)


def run_integrity(ops, seed, image_path, profile="tiny", progress=None):
    rng = random.Random(seed)
    policy_cycle = ["PLLGC", "NPGC", "PLLGC_ADAPTIVE"]
    eng = _engine(profile, image_path, seed, policy_cycle[0])
    sector = eng.device.geometry.read_unit
    spp = eng.device.geometry.sectors_per_page
    region = min(eng.io.num_sectors, eng.state.num_lpns * spp)

    latest = {}            # lsn -> bytes, last acknowledged write
    history = {}           # lsn -> set of every acknowledged version
    mismatches = []
    audits = 0
    levels_seen = set()
    restarts = {"clean": 0, "dirty": 0}
    version = 0

    def note_levels():
        for bank in range(eng.device.geometry.num_banks):
            lvl = eng.gc.current_level(bank)
            if lvl is not None:
                levels_seen.add(lvl)

    def check_read(lsn):
        got = eng.read_sector(lsn)
        want = latest.get(lsn, b"\x00" * sector)
        if got != want:
            mismatches.append(("read", lsn, got[:8], want[:8]))

    step = 0
    while step < ops:
        step += 1
        if progress and step % progress == 0:
            print(f"  integrity step {step}/{ops} "
                  f"(audits={audits}, restarts={restarts})")
        roll = rng.random()
        if roll < 0.58:
            lsn = rng.randrange(region)
            version += 1
            data = sector_payload((seed, lsn, version), sector)
            eng.write_sector(lsn, data)
            latest[lsn] = data
            history.setdefault(lsn, set()).add(data)
        elif roll < 0.86:
            lsn = rng.randrange(region)
            check_read(lsn)
        elif roll < 0.90:
            eng.flush()
            note_levels()
            eng.audit()
            audits += 1
        elif roll < 0.94:
            # idle-flush daemon sweep over everything currently buffered
            eng.run(eng.io.flush_daemon_tick(
                eng.sched.now + int(eng.io.params.idle_flush_seconds * 2e6)))
        elif roll < 0.97 and step > ops // 10:
            # clean power cycle: everything acknowledged must survive
            note_levels()
            eng.shutdown(clean=True)
            restarts["clean"] += 1
            eng = _engine(profile, image_path, seed + step,
                          policy_cycle[step % len(policy_cycle)])
            eng.audit()
            audits += 1
            for lsn in rng.sample(sorted(latest), min(40, len(latest))):
                check_read(lsn)
        elif step > ops // 10:
            # crash: unflushed sectors may roll back to an older version
            dirty = set(eng.dirty_sectors())
            note_levels()
            eng.shutdown(clean=False)
            restarts["dirty"] += 1
            eng = _engine(profile, image_path, seed + step,
                          policy_cycle[step % len(policy_cycle)])
            eng.audit()
            audits += 1
            sample = rng.sample(sorted(latest), min(60, len(latest)))
            for lsn in sample:
                got = eng.read_sector(lsn)
                if lsn not in dirty:
                    if got != latest[lsn]:
                        mismatches.append(("crash-stable", lsn, got[:8],
                                           latest[lsn][:8]))
                else:
                    ok = (got == b"\x00" * sector
                          or got in history.get(lsn, set()))
                    if not ok:
                        mismatches.append(("crash-rollback", lsn, got[:8], None))
                    latest[lsn] = got       # the rolled-back value is current
                    history.setdefault(lsn, set()).add(got)
            # sectors outside the sample: a dirty one may have rolled back,
            # so refresh the oracle from the device for them
            for lsn in list(latest):
                if lsn in dirty and lsn not in sample:
                    got = eng.read_sector(lsn)
                    if got != b"\x00" * sector and got not in history.get(lsn, set()):
                        mismatches.append(("crash-unknown", lsn, got[:8], None))
                    latest[lsn] = got
                    history.setdefault(lsn, set()).add(got)
    eng.flush()
    eng.audit()
    audits += 1
    for lsn in sorted(latest)[:300]:
        check_read(lsn)
    stats = eng.stats()
    gc_blocks = eng.gc.stats.blocks_collected
    eng.shutdown(clean=True)
    return {
        "mismatches": mismatches,
        "audits": audits,
        "levels_seen": levels_seen,
        "restarts": restarts,
        "gc_blocks": gc_blocks,
        "ops": ops,
    }
