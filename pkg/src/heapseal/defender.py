"""Online defense: a simulated hardened heap driven by the patch table.

Every allocation is intercepted. The allocation function and the current
context ID are looked up in the frozen patch table; a hit picks one of four
buffer structures and turns on guard pages, zero-fill and deferred free as
the vulnerability mask asks. A miss costs one metadata word and nothing else.

Memory is a sparse 48-bit address space of 4 KiB pages. Untouched heap bytes
read as ``0xA5`` so stale-data leaks are visible. Quarantined blocks are
treated as inaccessible in strict mode; otherwise hits are only noted.
"""

from __future__ import annotations

import bisect
import logging
from collections import deque
from dataclasses import dataclass, field

from .callgraph import CallGraph, GraphError, InstrumentationSet
from .config import Config
from .encoder import EncoderState, MalformedTraceError, SiteConstants, encode_call, encode_return
from .metadata import (
    PAGE_SHIFT,
    PAGE_SIZE,
    StructureKind,
    choose_structure,
    pack_metadata,
    unpack_metadata,
)
from .patch import PatchTable, Vuln, lookup
from .trace import ALIGNED_FUNS, Alloc, Call, Copy, Free, Read, Realloc, Ret, Write

__all__ = [
    "ADDRESS_LIMIT",
    "Access",
    "DefenseReport",
    "FirstFitAllocator",
    "HeapBuffer",
    "HeapExhausted",
    "ReportEntry",
    "SimMemory",
    "VirtualHeap",
    "replay",
]

log = logging.getLogger(__name__)

ADDRESS_LIMIT = 1 << 48
HEAP_BASE = 0x1000_0000
STALE_BYTE = 0xA5
WORD = 8

GUARD_PAGE = "GUARD-PAGE"
UAF_QUARANTINE = "UAF-QUARANTINE"
DOUBLE_FREE = "DOUBLE-FREE"


class HeapExhausted(MemoryError):
    pass


def _round_up(n: int, a: int) -> int:
    return (n + a - 1) & -a


class FirstFitAllocator:
    """Stand-in for the system allocator: address-ordered first fit, 8-byte granules."""

    def __init__(self, base: int, limit: int):
        self.free_list: list[list[int]] = [[base, limit]]
        self.blocks: dict[int, int] = {}

    def malloc(self, size: int, align: int = WORD) -> int:
        size = _round_up(max(size, 1), WORD)
        align = max(align, WORD)
        for i, (start, end) in enumerate(self.free_list):
            addr = _round_up(start, align)
            if addr + size > end:
                continue
            pieces = []
            if addr > start:
                pieces.append([start, addr])
            if addr + size < end:
                pieces.append([addr + size, end])
            self.free_list[i:i + 1] = pieces
            self.blocks[addr] = size
            return addr
        raise HeapExhausted(f"no free range for {size} bytes aligned to {align}")

    def free(self, addr: int) -> None:
        size = self.blocks.pop(addr)
        starts = [s for s, _ in self.free_list]
        i = bisect.bisect_left(starts, addr)
        self.free_list.insert(i, [addr, addr + size])
        # Coalesce with neighbours.
        if i + 1 < len(self.free_list) and self.free_list[i][1] == self.free_list[i + 1][0]:
            self.free_list[i][1] = self.free_list.pop(i + 1)[1]
        if i > 0 and self.free_list[i - 1][1] == self.free_list[i][0]:
            self.free_list[i - 1][1] = self.free_list.pop(i)[1]

    def size_of(self, addr: int) -> int:
        return self.blocks[addr]


class SimMemory:
    """Sparse byte store; pages materialize filled with stale bytes."""

    def __init__(self):
        self.pages: dict[int, bytearray] = {}

    def _page(self, n: int) -> bytearray:
        page = self.pages.get(n)
        if page is None:
            page = self.pages[n] = bytearray([STALE_BYTE]) * PAGE_SIZE
        return page

    def read(self, addr: int, length: int) -> bytes:
        out = bytearray()
        while length > 0:
            n, off = divmod(addr, PAGE_SIZE)
            chunk = min(length, PAGE_SIZE - off)
            out += self._page(n)[off:off + chunk]
            addr += chunk
            length -= chunk
        return bytes(out)

    def write(self, addr: int, data: bytes) -> None:
        pos = 0
        while pos < len(data):
            n, off = divmod(addr + pos, PAGE_SIZE)
            chunk = min(len(data) - pos, PAGE_SIZE - off)
            self._page(n)[off:off + chunk] = data[pos:pos + chunk]
            pos += chunk

    def read_word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, WORD), "little")

    def write_word(self, addr: int, value: int) -> None:
        self.write(addr, value.to_bytes(WORD, "little"))


@dataclass
class HeapBuffer:
    buf_id: str
    fun: str
    ccid: int
    p: int
    size: int
    kind: StructureKind
    word: int
    base: int
    block_size: int
    guard: int | None = None
    quarantined: bool = False

    @property
    def t_bits(self) -> int:
        return self.word & 0x7


@dataclass(frozen=True)
class Access:
    ok: bool
    kind: str | None = None
    owner: str | None = None
    data: bytes | None = None
    quarantine_hit: bool = False


@dataclass(frozen=True)
class ReportEntry:
    record: str  # "blocked" or "note"
    kind: str
    buf: str
    event: int

    def to_line(self) -> str:
        return f"{self.record} kind={self.kind} buf={self.buf} event={self.event}"


class VirtualHeap:
    def __init__(self, table: PatchTable, quota_bytes: int, strict_uaf: bool = True,
                 heap_bytes: int = 1 << 32):
        if HEAP_BASE + heap_bytes > ADDRESS_LIMIT:
            raise ValueError("heap does not fit in a 48-bit address space")
        self.table = table
        self.quota_bytes = quota_bytes
        self.strict_uaf = strict_uaf
        self.under = FirstFitAllocator(HEAP_BASE, HEAP_BASE + heap_bytes)
        self.mem = SimMemory()
        self.live: dict[str, HeapBuffer] = {}
        self.freed: dict[str, HeapBuffer] = {}
        self.guard_pages: dict[int, HeapBuffer] = {}
        self.quarantine: deque[HeapBuffer] = deque()
        self.quarantine_bytes = 0
        self.quarantine_peak = 0
        # Sorted, disjoint [start, end) ranges of quarantined blocks.
        self._q_starts: list[int] = []
        self._q_ranges: dict[int, HeapBuffer] = {}
        self.allocations = 0

    # -- allocation ---------------------------------------------------------

    def alloc(self, fun: str, buf_id: str, size: int, align: int | None, ccid: int) -> int:
        if size < 1:
            raise ValueError("allocation size must be >= 1")
        if buf_id in self.live:
            raise MalformedTraceError(f"buffer {buf_id} is already live")
        hit = lookup(self.table, fun, ccid)
        t_bits = hit[0] if hit else 0
        aligned = fun in ALIGNED_FUNS
        if aligned:
            if align is None or align < WORD or align & (align - 1):
                raise ValueError(f"alignment {align} is not a power of two >= {WORD}")
            exp = align.bit_length() - 1
        else:
            align, exp = WORD, None
        kind = choose_structure(t_bits, aligned)

        guard = None
        if kind is StructureKind.S1:
            block = WORD + size
            base = self.under.malloc(block)
            p = base + WORD
        elif kind is StructureKind.S3:
            block = align + size
            base = self.under.malloc(block, align)
            p = base + align
        else:
            head = align if aligned else WORD
            span = _round_up(head + size, PAGE_SIZE)
            block = span + PAGE_SIZE
            base = self.under.malloc(block, max(align, PAGE_SIZE))
            p = base + head
            guard = base + span

        word = pack_metadata(kind, t_bits, aligned, guard if kind.guarded else size, exp)
        self.mem.write_word(p - WORD, word)
        if guard is not None:
            self.mem.write_word(guard, size)
        if t_bits & Vuln.UNINIT or fun == "calloc":
            self.mem.write(p, bytes(size))

        buf = HeapBuffer(buf_id, fun, ccid, p, size, kind, word, base,
                         self.under.size_of(base), guard)
        if guard is not None:
            self.guard_pages[guard >> PAGE_SHIFT] = buf
        self.live[buf_id] = buf
        self.freed.pop(buf_id, None)
        self.allocations += 1
        log.debug("alloc %s %s size=%d kind=%s p=%#x", fun, buf_id, size, kind.name, p)
        return p

    def user_size(self, buf: HeapBuffer) -> int:
        fields = unpack_metadata(self.mem.read_word(buf.p - WORD), buf.kind)
        if fields.guard_addr is not None:
            return self.mem.read_word(fields.guard_addr)
        return fields.size

    def free(self, buf_id: str) -> bool:
        """Release a buffer; returns False for a double or wild free."""
        buf = self.live.pop(buf_id, None)
        if buf is None:
            return False
        fields = unpack_metadata(buf.word, buf.kind)
        if fields.t_bits & Vuln.OVERFLOW:
            del self.guard_pages[fields.guard_addr >> PAGE_SHIFT]
        pi = buf.p - (fields.alignment if fields.aligned else WORD)
        assert pi == buf.base, "block base does not match the metadata"
        self.freed[buf_id] = buf
        if fields.t_bits & Vuln.UAF:
            self._enqueue(buf)
        else:
            self.under.free(pi)
        return True

    def _enqueue(self, buf: HeapBuffer) -> None:
        buf.quarantined = True
        self.quarantine.append(buf)
        self.quarantine_bytes += buf.block_size
        bisect.insort(self._q_starts, buf.base)
        self._q_ranges[buf.base] = buf
        while self.quarantine_bytes > self.quota_bytes:
            old = self.quarantine.popleft()
            old.quarantined = False
            self.quarantine_bytes -= old.block_size
            self._q_starts.remove(old.base)
            del self._q_ranges[old.base]
            self.under.free(old.base)
            log.debug("quarantine released %s at %#x", old.buf_id, old.base)
        self.quarantine_peak = max(self.quarantine_peak, self.quarantine_bytes)

    def realloc(self, old_id: str, new_id: str, new_size: int, ccid: int) -> int:
        old = self.live.get(old_id)
        if old is None:
            raise MalformedTraceError(f"realloc of unknown buffer {old_id}")
        old_size = self.user_size(old)
        p = self.alloc("realloc", new_id, new_size, None, ccid)
        keep = min(old_size, new_size)
        self.mem.write(p, self.mem.read(old.p, keep))
        self.free(old_id)
        return p

    # -- access -------------------------------------------------------------

    def _quarantined_at(self, lo: int, hi: int) -> HeapBuffer | None:
        i = bisect.bisect_right(self._q_starts, hi - 1) - 1
        while i >= 0:
            buf = self._q_ranges[self._q_starts[i]]
            if buf.base + buf.block_size <= lo:
                return None
            if buf.base < hi:
                return buf
            i -= 1
        return None

    def resolve(self, buf_id: str) -> HeapBuffer:
        buf = self.live.get(buf_id) or self.freed.get(buf_id)
        if buf is None:
            raise MalformedTraceError(f"access to unknown buffer {buf_id}")
        return buf

    def access(self, buf_id: str, offset: int, length: int, write: bool = False,
               data: bytes | None = None) -> Access:
        buf = self.resolve(buf_id)
        lo = buf.p + offset
        hi = lo + length
        if lo < 0 or hi > ADDRESS_LIMIT:
            raise MalformedTraceError(f"access to {buf_id} leaves the address space")

        for page in range(lo >> PAGE_SHIFT, ((hi - 1) >> PAGE_SHIFT) + 1):
            owner = self.guard_pages.get(page)
            if owner is not None:
                return Access(False, GUARD_PAGE, owner.buf_id)

        hit = self._quarantined_at(lo, hi)
        if hit is not None and self.strict_uaf:
            return Access(False, UAF_QUARANTINE, hit.buf_id)

        if write:
            self.mem.write(lo, data if data is not None else bytes(length))
            out = None
        else:
            out = self.mem.read(lo, length)
        return Access(True, data=out, quarantine_hit=hit is not None)

    def raw_read(self, buf_id: str, offset: int, length: int) -> bytes:
        return self.mem.read(self.resolve(buf_id).p + offset, length)


@dataclass
class DefenseReport:
    entries: list[ReportEntry] = field(default_factory=list)
    reads: dict[int, bytes] = field(default_factory=dict)
    addresses: dict[int, int] = field(default_factory=dict)
    alloc_ccids: list[tuple[int, str, int]] = field(default_factory=list)
    allocations: int = 0
    quarantine_peak: int = 0
    heap: VirtualHeap | None = field(default=None, repr=False, compare=False)

    @property
    def blocked(self) -> list[ReportEntry]:
        return [e for e in self.entries if e.record == "blocked"]

    def blocked_at(self, event: int) -> list[ReportEntry]:
        return [e for e in self.blocked if e.event == event]

    def notes_at(self, event: int) -> list[ReportEntry]:
        return [e for e in self.entries if e.record == "note" and e.event == event]

    def to_text(self) -> str:
        lines = [e.to_line() for e in self.entries]
        lines.append(
            f"stats allocations={self.allocations} blocked={len(self.blocked)} "
            f"quarantine_peak_bytes={self.quarantine_peak}"
        )
        return "".join(line + "\n" for line in lines)


def _fill(index: int, length: int) -> bytes:
    return bytes([index % 250 + 1]) * length


def replay(g: CallGraph, instr: InstrumentationSet, table: PatchTable, trace,
           cfg: Config | None = None) -> DefenseReport:
    cfg = cfg or Config()
    stray = instr.sites - set(g.edges)
    if stray:
        raise GraphError(f"instrumentation set names call sites outside the graph: {sorted(stray)[0]}")

    heap = VirtualHeap(table, cfg.quota_bytes, cfg.strict_uaf)
    enc = EncoderState()
    consts = SiteConstants(cfg.seed)
    report = DefenseReport()

    def block(kind: str, buf: str, i: int) -> None:
        report.entries.append(ReportEntry("blocked", kind, buf, i))

    def note(kind: str, buf: str, i: int) -> None:
        report.entries.append(ReportEntry("note", kind, buf, i))

    def checked(res: Access, buf_id: str, i: int) -> bool:
        if not res.ok:
            block(res.kind, res.owner, i)
            return False
        if res.quarantine_hit:
            note("quarantine-hit", buf_id, i)
        return True

    for i, ev in enumerate(trace):
        try:
            if isinstance(ev, Call):
                encode_call(enc, ev.site, ev.site in instr.sites, consts[ev.site])
            elif isinstance(ev, Ret):
                encode_return(enc)
            elif isinstance(ev, Alloc):
                report.addresses[i] = heap.alloc(ev.fun, ev.buf, ev.size, ev.align, enc.v_current)
                report.alloc_ccids.append((i, ev.buf, enc.v_current))
            elif isinstance(ev, Realloc):
                report.addresses[i] = heap.realloc(ev.old, ev.new, ev.size, enc.v_current)
                report.alloc_ccids.append((i, ev.new, enc.v_current))
            elif isinstance(ev, Free):
                if not heap.free(ev.buf):
                    block(DOUBLE_FREE, ev.buf, i)
            elif isinstance(ev, Write):
                checked(heap.access(ev.buf, ev.offset, ev.length, True, _fill(i, ev.length)), ev.buf, i)
            elif isinstance(ev, Read):
                res = heap.access(ev.buf, ev.offset, ev.length)
                if checked(res, ev.buf, i):
                    report.reads[i] = res.data
                    buf = heap.resolve(ev.buf)
                    if buf.t_bits & Vuln.UNINIT:
                        note("zero-filled", ev.buf, i)
            elif isinstance(ev, Copy):
                src = heap.access(ev.src, ev.src_offset, ev.length)
                ok = checked(src, ev.src, i)
                # Probe the destination without writing so both faults are reported.
                dst = heap.access(ev.dst, ev.dst_offset, ev.length)
                ok = checked(dst, ev.dst, i) and ok
                if ok:
                    heap.access(ev.dst, ev.dst_offset, ev.length, True, src.data)
            else:  # pragma: no cover
                raise TypeError(f"unexpected event {ev!r}")
        except ValueError as exc:
            if getattr(exc, "event_index", None) is not None:
                raise
            raise MalformedTraceError(str(exc), i) from None

    report.allocations = heap.allocations
    report.quarantine_peak = heap.quarantine_peak
    report.heap = heap
    return report
