"""Memory-event traces.

A trace stands in for running an instrumented program. Buffers are named by
program-chosen labels and every access is ``(label, offset, len)``, so one
trace replays identically over the shadow heap and over the hardened heap.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from typing import Union

from .callgraph import CallSite

__all__ = [
    "ALIGNED_FUNS",
    "ALLOC_FUNS",
    "Alloc",
    "Call",
    "Copy",
    "Event",
    "Free",
    "Read",
    "Realloc",
    "Ret",
    "Sink",
    "Trace",
    "TraceFormatError",
    "Write",
    "format_event",
    "format_trace",
    "parse_trace",
]

ALLOC_FUNS = ("malloc", "calloc", "memalign", "aligned_alloc")
ALIGNED_FUNS = frozenset({"memalign", "aligned_alloc"})

_NAME_RE = re.compile(r"[A-Za-z0-9_.]+\Z")
_INT_RE = re.compile(r"-?[0-9]+\Z")


class TraceFormatError(ValueError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Sink(enum.Enum):
    COPY = "copy"
    BRANCH = "branch"
    ADDR = "addr"
    SYSCALL = "syscall"

    @property
    def checked(self) -> bool:
        return self is not Sink.COPY


@dataclass(frozen=True)
class Call:
    caller: str
    callee: str
    site_id: int

    @property
    def site(self) -> CallSite:
        return CallSite(self.caller, self.callee, self.site_id)


@dataclass(frozen=True)
class Ret:
    pass


@dataclass(frozen=True)
class Alloc:
    fun: str
    buf: str
    size: int
    align: int | None = None


@dataclass(frozen=True)
class Realloc:
    old: str
    new: str
    size: int


@dataclass(frozen=True)
class Free:
    buf: str


@dataclass(frozen=True)
class Write:
    buf: str
    offset: int
    length: int


@dataclass(frozen=True)
class Read:
    buf: str
    offset: int
    length: int
    sink: Sink


@dataclass(frozen=True)
class Copy:
    src: str
    src_offset: int
    dst: str
    dst_offset: int
    length: int


Event = Union[Call, Ret, Alloc, Realloc, Free, Write, Read, Copy]
Trace = tuple[Event, ...]


def _name(lineno: int, tok: str) -> str:
    if not _NAME_RE.match(tok):
        raise TraceFormatError(lineno, f"invalid name {tok!r}")
    return tok


def _int(lineno: int, tok: str, *, minimum: int | None = None, what: str = "integer") -> int:
    if not _INT_RE.match(tok):
        raise TraceFormatError(lineno, f"malformed {what} {tok!r}")
    value = int(tok, 10)
    if minimum is not None and value < minimum:
        raise TraceFormatError(lineno, f"{what} must be >= {minimum}, got {value}")
    return value


_ARITY = {
    "call": (3,),
    "ret": (0,),
    "alloc": (3, 4),
    "realloc": (3,),
    "free": (1,),
    "write": (3,),
    "read": (4,),
    "copy": (5,),
}


def _parse_line(lineno: int, keyword: str, args: list[str]) -> Event:
    if keyword not in _ARITY:
        raise TraceFormatError(lineno, f"unknown event {keyword!r}")
    if len(args) not in _ARITY[keyword]:
        raise TraceFormatError(lineno, f"wrong number of fields for {keyword!r}")

    if keyword == "call":
        return Call(_name(lineno, args[0]), _name(lineno, args[1]),
                    _int(lineno, args[2], minimum=0, what="site id"))
    if keyword == "ret":
        return Ret()
    if keyword == "alloc":
        fun = args[0]
        if fun not in ALLOC_FUNS:
            raise TraceFormatError(lineno, f"unknown allocation function {fun!r}")
        size = _int(lineno, args[2], minimum=1, what="size")
        align = None
        if fun in ALIGNED_FUNS:
            if len(args) != 4:
                raise TraceFormatError(lineno, f"{fun} requires an alignment")
            align = _int(lineno, args[3], minimum=1, what="alignment")
        elif len(args) == 4:
            raise TraceFormatError(lineno, f"{fun} takes no alignment")
        return Alloc(fun, _name(lineno, args[1]), size, align)
    if keyword == "realloc":
        return Realloc(_name(lineno, args[0]), _name(lineno, args[1]),
                       _int(lineno, args[2], minimum=1, what="size"))
    if keyword == "free":
        return Free(_name(lineno, args[0]))
    if keyword == "write":
        return Write(_name(lineno, args[0]), _int(lineno, args[1], what="offset"),
                     _int(lineno, args[2], minimum=1, what="length"))
    if keyword == "read":
        try:
            sink = Sink(args[3])
        except ValueError:
            raise TraceFormatError(lineno, f"unknown sink {args[3]!r}") from None
        return Read(_name(lineno, args[0]), _int(lineno, args[1], what="offset"),
                    _int(lineno, args[2], minimum=1, what="length"), sink)
    # copy
    return Copy(_name(lineno, args[0]), _int(lineno, args[1], what="offset"),
                _name(lineno, args[2]), _int(lineno, args[3], what="offset"),
                _int(lineno, args[4], minimum=1, what="length"))


def parse_trace(text: str) -> Trace:
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()
        events.append(_parse_line(lineno, keyword, args))
    return tuple(events)


def format_event(ev: Event) -> str:
    if isinstance(ev, Call):
        return f"call {ev.caller} {ev.callee} {ev.site_id}"
    if isinstance(ev, Ret):
        return "ret"
    if isinstance(ev, Alloc):
        tail = f" {ev.align}" if ev.align is not None else ""
        return f"alloc {ev.fun} {ev.buf} {ev.size}{tail}"
    if isinstance(ev, Realloc):
        return f"realloc {ev.old} {ev.new} {ev.size}"
    if isinstance(ev, Free):
        return f"free {ev.buf}"
    if isinstance(ev, Write):
        return f"write {ev.buf} {ev.offset} {ev.length}"
    if isinstance(ev, Read):
        return f"read {ev.buf} {ev.offset} {ev.length} {ev.sink.value}"
    if isinstance(ev, Copy):
        return f"copy {ev.src} {ev.src_offset} {ev.dst} {ev.dst_offset} {ev.length}"
    raise TypeError(f"not a trace event: {ev!r}")


def format_trace(events) -> str:
    return "".join(format_event(ev) + "\n" for ev in events)
