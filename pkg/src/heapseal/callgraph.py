"""Call graphs and the call-site selection strategies for context encoding.

A graph is read from a small line-oriented format::

    # comment
    node A
    node T1
    edge A T1 0
    root A
    target T1

Four strategies pick the call sites that need the context-ID update:

* ``FCS`` -- every call site.
* ``TCS`` -- call sites whose callee can reach a target function.
* ``SLIM`` -- TCS sites located in *branching* nodes (two or more
  target-reaching out-edges).
* ``INCREMENTAL`` -- TCS sites located in *true branching* nodes, found by a
  per-target backward BFS.
"""

from __future__ import annotations

import enum
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

__all__ = [
    "CallGraph",
    "CallSite",
    "GraphError",
    "GraphFormatError",
    "InstrumentationSet",
    "Strategy",
    "branching_nodes",
    "format_call_graph",
    "instrumentation_set",
    "parse_call_graph",
    "reachable_edges",
    "true_branching_nodes",
]

NAME_RE = re.compile(r"[A-Za-z0-9_.]+\Z")


class GraphError(ValueError):
    """Raised for semantically invalid graphs or strategy requests."""


class GraphFormatError(GraphError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Strategy(enum.Enum):
    FCS = "fcs"
    TCS = "tcs"
    SLIM = "slim"
    INCREMENTAL = "incremental"

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        try:
            return cls(name.lower())
        except ValueError:
            raise GraphError(f"unknown strategy {name!r}") from None


@dataclass(frozen=True, order=True)
class CallSite:
    caller: str
    callee: str
    site_id: int = 0

    def __str__(self) -> str:
        return f"{self.caller} {self.callee} {self.site_id}"


@dataclass(frozen=True)
class CallGraph:
    nodes: frozenset[str]
    edges: tuple[CallSite, ...]
    roots: frozenset[str] = frozenset()
    targets: frozenset[str] = frozenset()
    _succ: dict = field(init=False, repr=False, compare=False, hash=False)
    _pred: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", frozenset(self.nodes))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        object.__setattr__(self, "roots", frozenset(self.roots))
        object.__setattr__(self, "targets", frozenset(self.targets))

        for prev, e in zip(self.edges, self.edges[1:]):
            if prev == e:
                raise GraphError(f"duplicate call site {e}")
        for e in self.edges:
            for name in (e.caller, e.callee):
                if name not in self.nodes:
                    raise GraphError(f"edge {e} references undeclared node {name}")
        for kind, names in (("root", self.roots), ("target", self.targets)):
            missing = sorted(names - self.nodes)
            if missing:
                raise GraphError(f"{kind} {missing[0]} is not a declared node")

        succ: dict[str, list[CallSite]] = {n: [] for n in self.nodes}
        pred: dict[str, list[CallSite]] = {n: [] for n in self.nodes}
        for e in self.edges:
            succ[e.caller].append(e)
            pred[e.callee].append(e)
        object.__setattr__(self, "_succ", succ)
        object.__setattr__(self, "_pred", pred)

    def out_edges(self, node: str) -> list[CallSite]:
        return self._succ[node]

    def in_edges(self, node: str) -> list[CallSite]:
        return self._pred[node]

    def without_node(self, node: str) -> "CallGraph":
        return CallGraph(
            nodes=self.nodes - {node},
            edges=tuple(e for e in self.edges if node not in (e.caller, e.callee)),
            roots=self.roots - {node},
            targets=self.targets - {node},
        )


@dataclass(frozen=True)
class InstrumentationSet:
    strategy: Strategy
    sites: frozenset[CallSite]

    def __contains__(self, site: CallSite) -> bool:
        return site in self.sites

    def __len__(self) -> int:
        return len(self.sites)


def parse_call_graph(text: str) -> CallGraph:
    nodes: set[str] = set()
    edges: list[tuple[int, CallSite]] = []
    roots: list[tuple[int, str]] = []
    targets: list[tuple[int, str]] = []

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()

        for name in args if keyword != "edge" else args[:2]:
            if not NAME_RE.match(name):
                raise GraphFormatError(lineno, f"invalid name {name!r}")

        if keyword == "node":
            if len(args) != 1:
                raise GraphFormatError(lineno, "expected 'node <name>'")
            nodes.add(args[0])
        elif keyword == "edge":
            if len(args) != 3:
                raise GraphFormatError(lineno, "expected 'edge <caller> <callee> <site_id>'")
            try:
                site_id = int(args[2], 10)
            except ValueError:
                raise GraphFormatError(lineno, f"malformed site id {args[2]!r}") from None
            if site_id < 0:
                raise GraphFormatError(lineno, "site id must be non-negative")
            edges.append((lineno, CallSite(args[0], args[1], site_id)))
        elif keyword in ("root", "target"):
            if len(args) != 1:
                raise GraphFormatError(lineno, f"expected '{keyword} <name>'")
            (roots if keyword == "root" else targets).append((lineno, args[0]))
        else:
            raise GraphFormatError(lineno, f"unknown record {keyword!r}")

    # Declarations may follow their first use, so references are checked last.
    seen: set[CallSite] = set()
    for lineno, e in edges:
        for name in (e.caller, e.callee):
            if name not in nodes:
                raise GraphFormatError(lineno, f"undeclared node {name}")
        if e in seen:
            raise GraphFormatError(lineno, f"duplicate call site {e}")
        seen.add(e)
    for lineno, name in roots + targets:
        if name not in nodes:
            raise GraphFormatError(lineno, f"undeclared node {name}")

    return CallGraph(
        nodes=frozenset(nodes),
        edges=tuple(e for _, e in edges),
        roots=frozenset(n for _, n in roots),
        targets=frozenset(n for _, n in targets),
    )


def format_call_graph(g: CallGraph) -> str:
    lines = [f"node {n}" for n in sorted(g.nodes)]
    lines += [f"edge {e}" for e in g.edges]
    lines += [f"root {n}" for n in sorted(g.roots)]
    lines += [f"target {n}" for n in sorted(g.targets)]
    return "".join(line + "\n" for line in lines)


def _require_targets(g: CallGraph) -> None:
    if not g.targets:
        raise GraphError("graph has no target functions")


def _backward_closure(g: CallGraph, seeds: Iterable[str]) -> set[str]:
    visited = set(seeds)
    queue = deque(visited)
    while queue:
        n = queue.popleft()
        for e in g.in_edges(n):
            if e.caller not in visited:
                visited.add(e.caller)
                queue.append(e.caller)
    return visited


def reachable_edges(g: CallGraph) -> frozenset[CallSite]:
    """Edges whose callee is, or can reach, a target function."""
    _require_targets(g)
    reaching = _backward_closure(g, g.targets)
    return frozenset(e for e in g.edges if e.callee in reaching)


def branching_nodes(g: CallGraph) -> frozenset[str]:
    counts: dict[str, int] = {}
    for e in reachable_edges(g):
        counts[e.caller] = counts.get(e.caller, 0) + 1
    return frozenset(n for n, k in counts.items() if k >= 2)


def true_branching_nodes(g: CallGraph) -> frozenset[str]:
    """Nodes with two or more out-edges reaching the *same* target.

    Each target is processed on its own: a backward BFS collects every node
    that can reach it, then any visited node with more than one out-edge into
    the visited set is kept. The visited-set check makes back edges harmless.
    """
    _require_targets(g)
    result: set[str] = set()
    for t in sorted(g.targets):
        visited: set[str] = set()
        queue = deque([t])
        while queue:
            n = queue.popleft()
            if n in visited:
                continue
            visited.add(n)
            for e in g.in_edges(n):
                if e.caller not in visited:
                    queue.append(e.caller)

        for n in visited:
            count = sum(1 for e in g.out_edges(n) if e.callee in visited)
            if count > 1:
                result.add(n)
    return frozenset(result)


def instrumentation_set(g: CallGraph, strategy: Strategy | str) -> InstrumentationSet:
    if isinstance(strategy, str):
        strategy = Strategy.parse(strategy)

    if strategy is Strategy.FCS:
        sites = frozenset(g.edges)
    elif strategy is Strategy.TCS:
        sites = reachable_edges(g)
    elif strategy is Strategy.SLIM:
        keep = branching_nodes(g)
        sites = frozenset(e for e in reachable_edges(g) if e.caller in keep)
    elif strategy is Strategy.INCREMENTAL:
        keep = true_branching_nodes(g)
        sites = frozenset(e for e in reachable_edges(g) if e.caller in keep)
    else:  # pragma: no cover
        raise GraphError(f"unknown strategy {strategy!r}")
    return InstrumentationSet(strategy, sites)
