"""Probabilistic calling-context IDs.

The current context ID ``V`` lives in one integer. Every instrumented call
site carries a pseudo-random constant ``c``; right before the call the
caller's saved value ``t`` is combined as ``V = 3*t + c`` (mod 2**64). On
return the caller's ``t`` is put back, so contexts never leak across sibling
calls. Uninstrumented sites leave ``V`` untouched.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .callgraph import CallGraph, CallSite, GraphError, InstrumentationSet

__all__ = [
    "MASK64",
    "EncoderState",
    "MalformedTraceError",
    "SiteConstants",
    "encode_call",
    "encode_return",
    "enumerate_contexts",
    "site_constant",
]

MASK64 = (1 << 64) - 1


class MalformedTraceError(ValueError):
    """A trace violates call/return discipline or buffer lifetime rules."""

    def __init__(self, message: str, event_index: int | None = None):
        if event_index is not None:
            message = f"event {event_index}: {message}"
        super().__init__(message)
        self.event_index = event_index


def site_constant(site: CallSite, seed: int) -> int:
    """Keyed 64-bit hash of a call site's textual identity."""
    key = (seed & MASK64).to_bytes(8, "little")
    msg = f"{site.caller}\x00{site.callee}\x00{site.site_id}".encode()
    digest = hashlib.blake2b(msg, digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little")


class SiteConstants(dict):
    """Memoized ``site_constant`` for one seed."""

    def __init__(self, seed: int):
        super().__init__()
        self.seed = seed

    def __missing__(self, site: CallSite) -> int:
        c = self[site] = site_constant(site, self.seed)
        return c


@dataclass
class EncoderState:
    v_current: int = 0
    frame_stack: list[int] = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.frame_stack)


def encode_call(state: EncoderState, site: CallSite, instrumented: bool, c: int) -> EncoderState:
    t = state.v_current
    state.frame_stack.append(t)
    if instrumented:
        state.v_current = (3 * t + c) & MASK64
    return state


def encode_return(state: EncoderState) -> EncoderState:
    if not state.frame_stack:
        raise MalformedTraceError("return with empty call stack")
    state.v_current = state.frame_stack.pop()
    return state


def enumerate_contexts(
    g: CallGraph,
    instr: InstrumentationSet,
    target: str,
    max_depth: int,
    seed: int,
) -> list[tuple[tuple[CallSite, ...], int]]:
    """Brute-force every root-to-``target`` call path up to ``max_depth`` edges.

    Each path is replayed through the encoder; cycles are followed until the
    depth bound. Results are sorted lexicographically by path.
    """
    if target not in g.nodes:
        raise GraphError(f"target {target} is not in the graph")
    if max_depth < 1:
        raise ValueError("max_depth must be at least 1")

    consts = SiteConstants(seed)
    found: list[tuple[tuple[CallSite, ...], int]] = []
    path: list[CallSite] = []
    state = EncoderState()

    def walk(node: str) -> None:
        if node == target:
            found.append((tuple(path), state.v_current))
        if len(path) == max_depth:
            return
        for e in g.out_edges(node):
            encode_call(state, e, e in instr.sites, consts[e])
            path.append(e)
            walk(e.callee)
            path.pop()
            encode_return(state)

    for root in sorted(g.roots):
        walk(root)

    found.sort(key=lambda item: item[0])
    return found
