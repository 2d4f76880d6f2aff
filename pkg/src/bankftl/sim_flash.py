"""Simulated multi-bank NAND flash card.

Models the raw card the FTL drives: interfaces (channels) of banks, blocks of
sequentially-programmable pages with spare bytes, per-interface DMA write and
erase queues plus one read queue per two consecutive banks, and a configurable
latency model. Service time is charged on virtual clocks: each request first
occupies its DMA queue for a transfer slice, then its bank for an execution
slice, so requests on different banks overlap while requests sharing a queue
or a bank serialize. Completions across queues can therefore land out of
submission order.

State mutates at request acceptance; timestamps are accounting. Erase resets a
block to all-ones and pages must be programmed strictly in order, never twice.
"""

import pickle
import threading
import zlib
from dataclasses import dataclass, field, replace

from .errors import (AddressError, BackpressureError, BadBlockError,
                     ConfigurationError, OverwriteViolation,
                     SequencingViolation)
from .oob import SPARE_BYTES

QUEUE_CAPACITY = 256
COMPLETION_CAPACITY = 1024


@dataclass(frozen=True)
class FlashGeometry:
    num_interfaces: int
    banks_per_interface: int
    blocks_per_bank: int
    pages_per_block: int
    page_size: int
    spare_per_page: int
    read_unit: int
    erase_cycles_limit: int = 100_000

    @property
    def num_banks(self):
        return self.num_interfaces * self.banks_per_interface

    @property
    def total_blocks(self):
        return self.num_banks * self.blocks_per_bank

    @property
    def total_pages(self):
        return self.total_blocks * self.pages_per_block

    @property
    def capacity_bytes(self):
        return self.total_pages * self.page_size

    @property
    def sectors_per_page(self):
        return self.page_size // self.read_unit

    def validate(self):
        for name in ("num_interfaces", "banks_per_interface", "blocks_per_bank",
                     "pages_per_block", "page_size", "spare_per_page",
                     "read_unit", "erase_cycles_limit"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.page_size % self.read_unit != 0:
            raise ConfigurationError("page_size must be a multiple of read_unit")
        if self.spare_per_page < SPARE_BYTES:
            raise ConfigurationError(
                f"spare_per_page must hold {SPARE_BYTES} metadata bytes")
        # map entries steal their top bit, so physical pages must fit in 31 bits
        # (and the all-ones 31-bit pattern is the unmapped sentinel)
        if self.total_pages >= (1 << 31) - 1:
            raise ConfigurationError("total pages must fit in 31 bits")
        return self

    def ppn(self, bank, block, page):
        return (bank * self.blocks_per_bank + block) * self.pages_per_block + page

    def split_ppn(self, ppn):
        page = ppn % self.pages_per_block
        blk = ppn // self.pages_per_block
        return PageAddress(blk // self.blocks_per_bank, blk % self.blocks_per_bank, page)


@dataclass(frozen=True)
class PageAddress:
    bank: int
    block: int
    page: int


@dataclass(frozen=True)
class LatencyModel:
    """Whole-op latencies plus per-queue service discipline split.

    transfer occupies the DMA queue, exec occupies the bank; transfer + exec
    equals the headline figure (write 200us/page, read 100us/unit, erase 2ms).
    """
    write_page_us: int = 200
    read_unit_us: int = 100
    erase_block_us: int = 2000
    write_transfer_us: int = 20
    read_transfer_us: int = 80
    erase_transfer_us: int = 2

    def validate(self):
        if min(self.write_page_us, self.read_unit_us, self.erase_block_us) <= 0:
            raise ConfigurationError("latencies must be positive")
        if (self.write_transfer_us >= self.write_page_us
                or self.read_transfer_us >= self.read_unit_us
                or self.erase_transfer_us >= self.erase_block_us):
            raise ConfigurationError("transfer slice must be below total latency")
        return self


@dataclass
class DmaRequest:
    kind: str                      # "read" | "write" | "erase"
    address: PageAddress           # block granularity for erase (page ignored)
    data: bytes = b""
    spare: bytes = b""
    offset: int = 0
    length: int = None             # reads only; None = whole page, 0 = spare probe
    want_spare: bool = False
    request_id: int = -1


@dataclass
class CompletionDescriptor:
    request_id: int
    status: str
    submit_us: int
    complete_us: int
    data: bytes = b""
    spare: bytes = b""

    @property
    def service_latency(self):
        return self.complete_us - self.submit_us


@dataclass
class DeviceStats:
    pages_written: int = 0
    read_ops: int = 0
    read_units: int = 0
    blocks_erased: int = 0
    requests_accepted: int = 0
    completions_delivered: int = 0
    wear_events: int = 0
    parity_errors: int = 0
    erase_counts_per_bank: list = field(default_factory=list)
    wear_flagged_blocks: list = field(default_factory=list)


class _Block:
    __slots__ = ("erase_count", "next_writable_page", "is_bad", "wear_flagged",
                 "pages", "spares", "crcs")

    def __init__(self, pages_per_block):
        self.erase_count = 0
        self.next_writable_page = 0
        self.is_bad = False
        self.wear_flagged = False
        self.pages = [None] * pages_per_block
        self.spares = [None] * pages_per_block
        self.crcs = [0] * pages_per_block


class _Queue:
    __slots__ = ("name", "free_at", "inflight")

    def __init__(self, name):
        self.name = name
        self.free_at = 0
        self.inflight = 0


class SimFlashDevice:
    def __init__(self, geometry, model=None, bad_blocks=()):
        self.geometry = geometry.validate()
        self.model = (model or LatencyModel()).validate()
        g = self.geometry
        self._lock = threading.RLock()
        self._banks = [[_Block(g.pages_per_block) for _ in range(g.blocks_per_bank)]
                       for _ in range(g.num_banks)]
        for bank, block in bad_blocks:
            self._check_block(bank, block)
            self._banks[bank][block].is_bad = True
        # fixed queue map: 1 write + 1 erase queue per interface,
        # 1 read queue per two consecutive banks
        self.write_queues = [_Queue(f"wq{i}") for i in range(g.num_interfaces)]
        self.erase_queues = [_Queue(f"eq{i}") for i in range(g.num_interfaces)]
        self.read_queues = [_Queue(f"rq{i}") for i in range((g.num_banks + 1) // 2)]
        # queues on one interface share that channel's bus bandwidth
        self.bus_free_at = [0] * g.num_interfaces
        self.bank_free_at = [0] * g.num_banks
        self.now_us = 0
        self._next_req_id = 0
        self._completions = []   # pending async completions, submit order
        self._stats = DeviceStats(erase_counts_per_bank=[0] * g.num_banks)
        self.request_log = None  # list of rows when enabled

    # ---- addressing / validation -------------------------------------

    def _check_block(self, bank, block):
        g = self.geometry
        if not (0 <= bank < g.num_banks and 0 <= block < g.blocks_per_bank):
            raise AddressError(f"bank {bank} block {block} out of range")

    def _check_addr(self, addr):
        self._check_block(addr.bank, addr.block)
        if not (0 <= addr.page < self.geometry.pages_per_block):
            raise AddressError(f"page {addr.page} out of range")

    def _queue_for(self, kind, bank):
        itf = bank // self.geometry.banks_per_interface
        if kind == "write":
            return self.write_queues[itf]
        if kind == "erase":
            return self.erase_queues[itf]
        return self.read_queues[bank // 2]

    # ---- timing --------------------------------------------------------

    def _service(self, kind, bank, submit_us, units=1):
        m = self.model
        if kind == "write":
            transfer, total = m.write_transfer_us, m.write_page_us
        elif kind == "erase":
            transfer, total = m.erase_transfer_us, m.erase_block_us
        else:
            transfer, total = m.read_transfer_us * units, m.read_unit_us * units
            units = 1  # already folded in
        execute = (total * units) - transfer
        q = self._queue_for(kind, bank)
        itf = bank // self.geometry.banks_per_interface
        start = max(submit_us, q.free_at, self.bus_free_at[itf])
        transfer_end = start + transfer
        q.free_at = transfer_end
        self.bus_free_at[itf] = transfer_end
        begin = max(transfer_end, self.bank_free_at[bank])
        done = begin + execute
        self.bank_free_at[bank] = done
        if done > self.now_us:
            self.now_us = done
        return done

    def _log(self, req_id, kind, addr, submit_us, complete_us):
        if self.request_log is not None:
            self.request_log.append(
                (req_id, kind, addr.bank, addr.block, addr.page, submit_us, complete_us))

    # ---- synchronous convenience path ----------------------------------

    def write_page(self, addr, data, spare=b"", submit_us=None):
        g = self.geometry
        with self._lock:
            self._check_addr(addr)
            blk = self._banks[addr.bank][addr.block]
            if blk.is_bad:
                raise BadBlockError(f"bank {addr.bank} block {addr.block} is bad")
            if len(data) != g.page_size:
                raise AddressError("write payload must be one full page")
            if len(spare) > g.spare_per_page:
                raise AddressError("spare payload exceeds spare area")
            if addr.page < blk.next_writable_page:
                raise OverwriteViolation(
                    f"page {addr.page} already written in block {addr.block}")
            if addr.page > blk.next_writable_page:
                raise SequencingViolation(
                    f"expected page {blk.next_writable_page}, got {addr.page}")
            if submit_us is None:
                submit_us = self.now_us
            data = bytes(data)
            blk.pages[addr.page] = data
            blk.spares[addr.page] = bytes(spare)
            blk.crcs[addr.page] = zlib.crc32(data) & 0xFFFFFFFF
            blk.next_writable_page += 1
            self._stats.pages_written += 1
            self._stats.requests_accepted += 1
            self._stats.completions_delivered += 1
            done = self._service("write", addr.bank, submit_us)
            rid = self._next_req_id
            self._next_req_id += 1
            self._log(rid, "write", addr, submit_us, done)
            return CompletionDescriptor(rid, "ok", submit_us, done)

    def read_page(self, addr, offset=0, length=None, want_spare=False,
                  submit_us=None):
        g = self.geometry
        with self._lock:
            self._check_addr(addr)
            if length is None:
                length = g.page_size - offset
            if offset < 0 or length < 0 or offset + length > g.page_size:
                raise AddressError("read window outside page")
            if length % g.read_unit or offset % g.read_unit:
                raise AddressError("reads are read_unit granular")
            if submit_us is None:
                submit_us = self.now_us
            blk = self._banks[addr.bank][addr.block]
            stored = blk.pages[addr.page]
            if stored is None:
                data = b"\xff" * length
                spare = b"\xff" * g.spare_per_page
            else:
                if (zlib.crc32(stored) & 0xFFFFFFFF) != blk.crcs[addr.page]:
                    self._stats.parity_errors += 1
                data = stored[offset:offset + length]
                raw = blk.spares[addr.page]
                spare = raw + b"\xff" * (g.spare_per_page - len(raw))
            units = max(1, length // g.read_unit)
            self._stats.read_ops += 1
            self._stats.read_units += units
            self._stats.requests_accepted += 1
            self._stats.completions_delivered += 1
            done = self._service("read", addr.bank, submit_us, units)
            rid = self._next_req_id
            self._next_req_id += 1
            self._log(rid, "read", addr, submit_us, done)
            desc = CompletionDescriptor(rid, "ok", submit_us, done)
            return data, (spare if want_spare else b""), desc

    def erase_block(self, bank, block, submit_us=None):
        with self._lock:
            self._check_block(bank, block)
            blk = self._banks[bank][block]
            if blk.is_bad:
                raise BadBlockError(f"bank {bank} block {block} is bad")
            if submit_us is None:
                submit_us = self.now_us
            n = self.geometry.pages_per_block
            blk.pages = [None] * n
            blk.spares = [None] * n
            blk.crcs = [0] * n
            blk.next_writable_page = 0
            blk.erase_count += 1
            if blk.erase_count > self.geometry.erase_cycles_limit and not blk.wear_flagged:
                blk.wear_flagged = True
                self._stats.wear_events += 1
                self._stats.wear_flagged_blocks.append((bank, block))
            self._stats.blocks_erased += 1
            self._stats.erase_counts_per_bank[bank] += 1
            self._stats.requests_accepted += 1
            self._stats.completions_delivered += 1
            done = self._service("erase", bank, submit_us)
            rid = self._next_req_id
            self._next_req_id += 1
            self._log(rid, "erase", PageAddress(bank, block, 0), submit_us, done)
            return CompletionDescriptor(rid, "ok", submit_us, done)

    # ---- DMA queue path --------------------------------------------------

    def submit_dma(self, req, submit_us=None):
        with self._lock:
            q = self._queue_for(req.kind, req.address.bank)
            if q.inflight >= QUEUE_CAPACITY:
                raise BackpressureError(f"{q.name} holds {QUEUE_CAPACITY} requests")
            if len(self._completions) >= COMPLETION_CAPACITY:
                raise BackpressureError("completion queue full")
            # completions_delivered is bumped at poll time on this path
            delivered_fixup = self._stats.completions_delivered
            if req.kind == "write":
                desc = self.write_page(req.address, req.data, req.spare, submit_us)
            elif req.kind == "erase":
                desc = self.erase_block(req.address.bank, req.address.block, submit_us)
            elif req.kind == "read":
                data, spare, desc = self.read_page(
                    req.address, req.offset, req.length, req.want_spare, submit_us)
                desc.data, desc.spare = data, spare
            else:
                raise ConfigurationError(f"unknown DMA kind {req.kind!r}")
            self._stats.completions_delivered = delivered_fixup
            req.request_id = desc.request_id
            q.inflight += 1
            self._completions.append((desc.complete_us, desc.request_id, q, desc))
            return desc.request_id

    def poll_completions(self, max_count=None, now_us=None):
        with self._lock:
            ready = [c for c in self._completions
                     if now_us is None or c[0] <= now_us]
            ready.sort(key=lambda c: (c[0], c[1]))
            if max_count is not None:
                ready = ready[:max_count]
            out = []
            for item in ready:
                self._completions.remove(item)
                _, _, q, desc = item
                q.inflight -= 1
                self._stats.completions_delivered += 1
                out.append(desc)
            return out

    # ---- introspection ---------------------------------------------------

    def device_stats(self):
        with self._lock:
            s = self._stats
            return replace(
                s,
                erase_counts_per_bank=list(s.erase_counts_per_bank),
                wear_flagged_blocks=list(s.wear_flagged_blocks),
            )

    def block_state(self, bank, block):
        blk = self._banks[bank][block]
        return blk.erase_count, blk.next_writable_page, blk.is_bad, blk.wear_flagged

    def bad_block_set(self):
        out = set()
        for bank in range(self.geometry.num_banks):
            for block in range(self.geometry.blocks_per_bank):
                if self._banks[bank][block].is_bad:
                    out.add((bank, block))
        return out

    def written_prefix(self, bank, block):
        return self._banks[bank][block].next_writable_page

    def reset_clocks(self, now_us=0):
        """Rebase queue/bank virtual clocks (after synthetic state injection,
        which writes pages without simulating elapsed time)."""
        with self._lock:
            for q in self.write_queues + self.erase_queues + self.read_queues:
                q.free_at = now_us
            self.bank_free_at = [now_us] * self.geometry.num_banks
            self.bus_free_at = [now_us] * self.geometry.num_interfaces
            self.now_us = now_us

    def enable_request_log(self):
        self.request_log = []

    def export_request_log(self, path):
        with open(path, "w") as fh:
            fh.write("request_id,kind,bank,block,page,submit_ts_us,complete_ts_us\n")
            for row in self.request_log or ():
                fh.write(",".join(str(v) for v in row) + "\n")

    def corrupt_spare(self, addr):
        """Test hook: garble a written page's spare (simulated torn write)."""
        blk = self._banks[addr.bank][addr.block]
        if blk.spares[addr.page] is not None:
            blk.spares[addr.page] = b"\x00" * len(blk.spares[addr.page])

    # ---- persistence ------------------------------------------------------

    IMAGE_MAGIC = b"BFTLIMG1"

    def save_image(self, path):
        with self._lock, open(path, "wb") as fh:
            fh.write(self.IMAGE_MAGIC)
            blocks = {}
            for bank in range(self.geometry.num_banks):
                for block in range(self.geometry.blocks_per_bank):
                    blk = self._banks[bank][block]
                    if (blk.next_writable_page or blk.erase_count
                            or blk.is_bad or blk.wear_flagged):
                        blocks[(bank, block)] = (
                            blk.erase_count, blk.next_writable_page, blk.is_bad,
                            blk.wear_flagged,
                            blk.pages[:blk.next_writable_page],
                            blk.spares[:blk.next_writable_page],
                        )
            payload = {
                "profile": profile_dict(self.geometry, self.model,
                                        sorted(self.bad_block_set())),
                "blocks": blocks,
                "stats": self._stats.__dict__,
                "now_us": self.now_us,
            }
            pickle.dump(payload, fh, protocol=4)

    @classmethod
    def load_image(cls, path):
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.IMAGE_MAGIC))
            if magic != cls.IMAGE_MAGIC:
                raise ConfigurationError(f"{path} is not a flash image")
            payload = pickle.load(fh)
        geometry, model, bad = parse_profile(payload["profile"])
        dev = cls(geometry, model, bad)
        for (bank, block), row in payload["blocks"].items():
            blk = dev._banks[bank][block]
            (blk.erase_count, blk.next_writable_page, blk.is_bad,
             blk.wear_flagged, pages, spares) = row
            for i, page in enumerate(pages):
                blk.pages[i] = page
                blk.spares[i] = spares[i]
                if page is not None:
                    blk.crcs[i] = zlib.crc32(page) & 0xFFFFFFFF
        dev._stats = DeviceStats(**payload["stats"])
        dev.now_us = payload["now_us"]
        return dev


# ---- device profiles (text key-value) -------------------------------------

_GEOMETRY_KEYS = ("num_interfaces", "banks_per_interface", "blocks_per_bank",
                  "pages_per_block", "page_size", "spare_per_page", "read_unit",
                  "erase_cycles_limit")
_MODEL_KEYS = ("write_page_us", "read_unit_us", "erase_block_us",
               "write_transfer_us", "read_transfer_us", "erase_transfer_us")


def profile_dict(geometry, model, bad_blocks=()):
    d = {k: getattr(geometry, k) for k in _GEOMETRY_KEYS}
    d.update({k: getattr(model, k) for k in _MODEL_KEYS})
    d["bad_blocks"] = " ".join(f"{b}:{blk}" for b, blk in bad_blocks)
    return d


def parse_profile(d):
    geometry = FlashGeometry(**{k: int(d[k]) for k in _GEOMETRY_KEYS})
    model = LatencyModel(**{k: int(d.get(k, getattr(LatencyModel, k)))
                            for k in _MODEL_KEYS})
    bad = []
    spec = str(d.get("bad_blocks", "")).strip()
    if spec:
        for tok in spec.split():
            bank, block = tok.split(":")
            bad.append((int(bank), int(block)))
    return geometry.validate(), model.validate(), bad


def load_profile(path):
    d = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            d[key.strip()] = value.strip()
    return parse_profile(d)


def save_profile(path, geometry, model, bad_blocks=()):
    with open(path, "w") as fh:
        for k, v in profile_dict(geometry, model, bad_blocks).items():
            fh.write(f"{k} = {v}\n")


# Shipped profiles: the full 512GB production card and desk-scale variants. Desk profiles keep
# 8 sectors per page and 64 pages per block but shrink the page to 4KB so whole
# runs fit in memory; the latency model is unchanged.
PROFILES = {
    "card512": FlashGeometry(4, 16, 4096, 64, 32768, 512, 4096),
    "desk64": FlashGeometry(4, 16, 64, 64, 4096, 64, 512),
    "desk8": FlashGeometry(4, 2, 64, 64, 4096, 64, 512),
    "tiny": FlashGeometry(2, 2, 16, 8, 2048, 32, 256),
}


def make_device(profile="desk8", model=None, bad_blocks=()):
    return SimFlashDevice(PROFILES[profile], model, bad_blocks)
