"""Offline attack diagnosis over shadow memory.

Each heap buffer gets per-byte validity flags and per-byte origins, and is
flanked by inaccessible red zones. Freed buffers stay inaccessible in a FIFO
quarantine until the byte quota pushes them out. Replaying an attack trace
yields warnings; warnings are folded by allocation origin into patches.

Validity is only checked where a value decides control flow, is used as an
address, or is passed to a system call. Plain copies just carry validity and
origin along, which keeps struct padding from producing false alarms.
"""

from __future__ import annotations

import enum
import logging
from collections import deque
from dataclasses import dataclass, field

from .callgraph import CallGraph, GraphError, InstrumentationSet
from .config import Config
from .encoder import EncoderState, MalformedTraceError, SiteConstants, encode_call, encode_return
from .patch import Patch, Vuln
from .trace import Alloc, Call, Copy, Free, Read, Realloc, Ret, Write

__all__ = ["Analysis", "HeapWarning", "ShadowHeap", "analyze", "format_warnings"]

log = logging.getLogger(__name__)


class BlockState(enum.Enum):
    LIVE = "live"
    QUARANTINED = "quarantined"
    EVICTED = "evicted"


class _Block:
    __slots__ = ("buf_id", "size", "fun", "ccid", "valid", "origin", "state")

    def __init__(self, buf_id: str, size: int, fun: str, ccid: int):
        self.buf_id = buf_id
        self.size = size
        self.fun = fun
        self.ccid = ccid
        self.valid = bytearray(size)
        self.origin: list[_Block | None] = [self] * size
        self.state = BlockState.LIVE

    def mark_valid(self, lo: int, hi: int) -> None:
        self.valid[lo:hi] = b"\x01" * (hi - lo)
        self.origin[lo:hi] = [None] * (hi - lo)


@dataclass(frozen=True)
class HeapWarning:
    kind: Vuln
    origin_buf: str
    origin_fun: str
    origin_ccid: int
    event_index: int
    # Where the faulting access landed; for UNINIT, the flagged byte offsets.
    access_buf: str = ""
    offsets: tuple[int, ...] = ()
    beyond_redzone: bool = False

    def to_line(self) -> str:
        line = (
            f"warning kind={self.kind.name} buf={self.origin_buf} fun={self.origin_fun} "
            f"ccid={self.origin_ccid:016x} event={self.event_index}"
        )
        if self.beyond_redzone:
            line += " note=beyond-redzone"
        return line


@dataclass
class Analysis:
    warnings: list[HeapWarning]
    patches: list[Patch]
    # (event index, buffer label, ccid) for every ALLOC and REALLOC.
    alloc_ccids: list[tuple[int, str, int]] = field(default_factory=list)

    def __iter__(self):
        yield self.warnings
        yield self.patches


class ShadowHeap:
    """Byte-granular shadow state for one replay."""

    def __init__(self, quota_bytes: int, redzone_bytes: int = 16):
        self.quota_bytes = quota_bytes
        self.redzone_bytes = redzone_bytes
        self.blocks: dict[str, _Block] = {}
        self.queue: deque[_Block] = deque()
        self.queued_bytes = 0
        self.evicted: list[str] = []

    def block(self, buf_id: str, index: int) -> _Block:
        try:
            return self.blocks[buf_id]
        except KeyError:
            raise MalformedTraceError(f"unknown buffer {buf_id}", index) from None

    def live(self, buf_id: str, index: int) -> _Block:
        blk = self.block(buf_id, index)
        if blk.state is not BlockState.LIVE:
            raise MalformedTraceError(f"buffer {buf_id} already freed (double free)", index)
        return blk

    def allocate(self, buf_id: str, size: int, fun: str, ccid: int, index: int) -> _Block:
        old = self.blocks.get(buf_id)
        if old is not None and old.state is BlockState.LIVE:
            raise MalformedTraceError(f"buffer {buf_id} is already live", index)
        blk = _Block(buf_id, size, fun, ccid)
        if fun == "calloc":
            blk.mark_valid(0, size)
        self.blocks[buf_id] = blk
        return blk

    def free(self, buf_id: str, index: int) -> None:
        blk = self.live(buf_id, index)
        blk.state = BlockState.QUARANTINED
        self.queue.append(blk)
        self.queued_bytes += blk.size
        while self.queued_bytes > self.quota_bytes:
            old = self.queue.popleft()
            old.state = BlockState.EVICTED
            self.queued_bytes -= old.size
            self.evicted.append(old.buf_id)
            log.debug("quarantine evicted %s (%d bytes)", old.buf_id, old.size)

    def byte_state(self, buf_id: str, offset: int) -> str:
        """Accessibility class of one byte: accessible, redzone, quarantined or untracked."""
        blk = self.blocks[buf_id]
        if blk.state is BlockState.EVICTED:
            return "untracked"
        if blk.state is BlockState.QUARANTINED:
            return "quarantined" if -self.redzone_bytes <= offset < blk.size + self.redzone_bytes else "untracked"
        if 0 <= offset < blk.size:
            return "accessible"
        if -self.redzone_bytes <= offset < blk.size + self.redzone_bytes:
            return "redzone"
        return "untracked"

    def check(self, blk: _Block, offset: int, length: int, index: int, access_buf: str):
        """Accessibility check; returns (warning or None, in-bounds range or None)."""
        if blk.state is BlockState.EVICTED:
            return None, None
        if blk.state is BlockState.QUARANTINED:
            w = HeapWarning(Vuln.UAF, blk.buf_id, blk.fun, blk.ccid, index, access_buf)
            return w, None
        end = offset + length
        lo, hi = max(offset, 0), min(end, blk.size)
        rng = (lo, hi) if lo < hi else None
        if offset >= 0 and end <= blk.size:
            return None, rng
        rz = self.redzone_bytes
        # Accesses that skip both red zones would escape a real shadow heap.
        beyond = not ((offset < 0 and end > -rz) or (offset < blk.size + rz and end > blk.size))
        w = HeapWarning(Vuln.OVERFLOW, blk.buf_id, blk.fun, blk.ccid, index, access_buf,
                        beyond_redzone=beyond)
        return w, rng


def _fold_patches(warnings: list[HeapWarning]) -> list[Patch]:
    masks: dict[tuple[str, int], int] = {}
    for w in warnings:
        key = (w.origin_fun, w.origin_ccid)
        masks[key] = masks.get(key, 0) | int(w.kind)
    return [Patch(fun, ccid, t) for (fun, ccid), t in sorted(masks.items())]


def analyze(g: CallGraph, instr: InstrumentationSet, trace, cfg: Config | None = None) -> Analysis:
    cfg = cfg or Config()
    stray = instr.sites - set(g.edges)
    if stray:
        raise GraphError(f"instrumentation set names call sites outside the graph: {sorted(stray)[0]}")

    heap = ShadowHeap(cfg.quota_bytes, cfg.redzone_bytes)
    enc = EncoderState()
    consts = SiteConstants(cfg.seed)
    warnings: list[HeapWarning] = []
    alloc_ccids: list[tuple[int, str, int]] = []

    def emit(w: HeapWarning | None, seen: set) -> None:
        if w is None:
            return
        key = (w.kind, w.origin_buf, w.origin_ccid)
        if key not in seen:
            seen.add(key)
            warnings.append(w)

    for i, ev in enumerate(trace):
        seen: set = set()
        if isinstance(ev, Call):
            site = ev.site
            encode_call(enc, site, site in instr.sites, consts[site])
        elif isinstance(ev, Ret):
            try:
                encode_return(enc)
            except MalformedTraceError:
                raise MalformedTraceError("return with empty call stack", i) from None
        elif isinstance(ev, Alloc):
            heap.allocate(ev.buf, ev.size, ev.fun, enc.v_current, i)
            alloc_ccids.append((i, ev.buf, enc.v_current))
        elif isinstance(ev, Realloc):
            old = heap.live(ev.old, i)
            fresh = heap.blocks.get(ev.new)
            if fresh is not None and fresh.state is BlockState.LIVE:
                raise MalformedTraceError(f"realloc target {ev.new} is already live", i)
            keep = min(old.size, ev.size)
            valid, origin = old.valid[:keep], old.origin[:keep]
            heap.free(ev.old, i)
            blk = heap.allocate(ev.new, ev.size, "realloc", enc.v_current, i)
            blk.valid[:keep] = valid
            blk.origin[:keep] = origin
            alloc_ccids.append((i, ev.new, enc.v_current))
        elif isinstance(ev, Free):
            heap.free(ev.buf, i)
        elif isinstance(ev, Write):
            blk = heap.block(ev.buf, i)
            w, rng = heap.check(blk, ev.offset, ev.length, i, ev.buf)
            emit(w, seen)
            if rng:
                blk.mark_valid(*rng)
        elif isinstance(ev, Read):
            blk = heap.block(ev.buf, i)
            w, rng = heap.check(blk, ev.offset, ev.length, i, ev.buf)
            emit(w, seen)
            if rng and ev.sink.checked:
                lo, hi = rng
                flagged: dict[int, tuple[_Block, list[int]]] = {}
                for off in range(lo, hi):
                    if not blk.valid[off]:
                        src = blk.origin[off]
                        flagged.setdefault(id(src), (src, []))[1].append(off)
                for src, offs in flagged.values():
                    emit(HeapWarning(Vuln.UNINIT, src.buf_id, src.fun, src.ccid, i,
                                     ev.buf, tuple(offs)), seen)
                # Checked bytes become valid so one bad value is reported once.
                blk.mark_valid(lo, hi)
        elif isinstance(ev, Copy):
            src = heap.block(ev.src, i)
            dst = heap.block(ev.dst, i)
            w_src, _ = heap.check(src, ev.src_offset, ev.length, i, ev.src)
            w_dst, _ = heap.check(dst, ev.dst_offset, ev.length, i, ev.dst)
            emit(w_src, seen)
            emit(w_dst, seen)
            _propagate(src, ev.src_offset, dst, ev.dst_offset, ev.length)
        else:  # pragma: no cover
            raise TypeError(f"unexpected event {ev!r}")

    return Analysis(warnings, _fold_patches(warnings), alloc_ccids)


def _propagate(src: _Block, soff: int, dst: _Block, doff: int, length: int) -> None:
    if dst.state is not BlockState.LIVE:
        return
    src_live = src.state is BlockState.LIVE
    # Snapshot first: source and destination may overlap.
    pairs = []
    for k in range(length):
        d = doff + k
        if not 0 <= d < dst.size:
            continue
        s = soff + k
        if src_live and 0 <= s < src.size:
            pairs.append((d, src.valid[s], src.origin[s]))
        else:
            # Bytes loaded from inaccessible memory were already reported; treat as defined.
            pairs.append((d, 1, None))
    for d, v, o in pairs:
        dst.valid[d] = v
        dst.origin[d] = o


def format_warnings(warnings) -> str:
    return "".join(w.to_line() + "\n" for w in warnings)
