#!/usr/bin/env python3
"""GC scheduling policies on an artificially aged card, at mini scale.

NPGC collects inline in the write path, so write latencies absorb every
erase; PLLGC runs a co-running collector on idle banks and the spikes
disappear. Full-scale versions: `bankftl run --preset npgc-vs-pllgc` (and
the adaptive preset for the thread-count throttle).
"""

from bankftl import (AgingSpec, Engine, EngineConfig, EngineParams, GcPolicy,
                     WorkloadSpec)
from bankftl.bench import drive, inject_aging

AGING = AgingSpec(free_mean=12, free_spread=3, free_min=4,
                  valid_mean=32, valid_spread=14, valid_max=60, seed=7)
WORKLOAD = WorkloadSpec(num_client_threads=1, region_lpns=512, rounds=4,
                        pattern="sequential", seed=3)

for kind in ("NPGC", "PLLGC"):
    cfg = EngineConfig(profile="desk8", io=EngineParams(num_queues=64),
                       policy=GcPolicy(kind=kind, max_gc_threads=1), seed=3)
    eng = Engine.start(cfg)
    inject_aging(eng, AGING)
    report = drive(eng, WORKLOAD)
    eng.shutdown(clean=True)
    lats = sorted(s[2] for s in report.samples)
    p50 = lats[len(lats) // 2]
    p99 = lats[int(len(lats) * 0.99)]
    print(f"{kind:6s}: elapsed {report.elapsed_us / 1e6:6.3f}s  "
          f"blocks collected {report.blocks_collected:4d}  "
          f"page-write latency p50 {p50:>6d}us p99 {p99:>7d}us  "
          f">2ms samples {report.count_over(2000):4d}  "
          f"WA {report.write_amplification:.3f}")

print("\nThe inline policy pays every erase in the write path; the parallel"
      "\ncollector reclaims the same number of blocks on other banks instead.")
