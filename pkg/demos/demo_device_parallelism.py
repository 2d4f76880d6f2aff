#!/usr/bin/env python3
"""Raw card parallelism: bank-level overlap, shared queues, shared channels.

Writes to banks on different interfaces overlap almost perfectly; banks on
one interface share a write queue and a channel bus; reads to two banks that
share one read queue serialize harder than reads to banks that do not.
"""

from bankftl import DmaRequest, PageAddress, make_device

dev = make_device("desk8")
g = dev.geometry
page = b"\xab" * g.page_size
print(f"desk8 card: {g.num_interfaces} interfaces x {g.banks_per_interface} banks, "
      f"{g.blocks_per_bank} blocks of {g.pages_per_block} x {g.page_size}B pages")
print(f"queues: {len(dev.write_queues)} write, {len(dev.erase_queues)} erase, "
      f"{len(dev.read_queues)} read (one per two banks)\n")

# one write alone
d = dev.write_page(PageAddress(0, 0, 0), page, submit_us=0)
print(f"single page write: {d.service_latency} us")

# two writes on different interfaces: near-perfect overlap
dev = make_device("desk8")
ids = [dev.submit_dma(DmaRequest("write", PageAddress(bank, 0, 0), data=page),
                      submit_us=0)
       for bank in (0, 2)]   # banks 0 and 2 sit on different interfaces
done = dev.poll_completions()
print(f"two banks, two interfaces: finished at "
      f"{max(c.complete_us for c in done)} us (completions may arrive out of "
      f"order: {[c.request_id for c in done]})")

# two writes to the same bank: executions serialize
dev = make_device("desk8")
for p in (0, 1):
    dev.submit_dma(DmaRequest("write", PageAddress(0, 0, p), data=page), submit_us=0)
done = dev.poll_completions()
print(f"same bank:                 finished at {max(c.complete_us for c in done)} us")

# reads: banks 0,1 share a read queue; banks 0,2 do not
unit = b"\x00" * g.read_unit
for pair in ((0, 1), (0, 2)):
    dev = make_device("desk8")
    for bank in pair:
        dev.write_page(PageAddress(bank, 0, 0), page, submit_us=0)
    dev.reset_clocks(0)
    for bank in pair:
        dev.submit_dma(DmaRequest("read", PageAddress(bank, 0, 0),
                                  length=g.read_unit), submit_us=0)
    done = dev.poll_completions()
    share = "share a queue" if pair == (0, 1) else "own queues"
    print(f"reads on banks {pair} ({share}): finished at "
          f"{max(c.complete_us for c in done)} us")

# backpressure: a queue holds 256 requests
dev = make_device("desk8")
submitted = 0
try:
    for block in range(g.blocks_per_bank):
        for p in range(g.pages_per_block):
            dev.submit_dma(DmaRequest("write", PageAddress(0, block, p), data=page),
                           submit_us=0)
            submitted += 1
except Exception as exc:
    print(f"\nbackpressure after {submitted} queued requests: {exc}")
