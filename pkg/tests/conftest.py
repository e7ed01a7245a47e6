from __future__ import annotations

import random
from pathlib import Path

import pytest

from heapseal.callgraph import CallGraph, CallSite, parse_call_graph
from heapseal.trace import parse_trace

FIXTURES = Path(__file__).parent / "fixtures"

ATTACK_FIXTURES = ("overflow", "uaf", "uninit", "heartbleed")
ALL_TRACES = ATTACK_FIXTURES + ("padding", "chained", "benign")


def fixture_path(name: str) -> Path:
    return FIXTURES / name


def load_trace(name: str):
    return parse_trace((FIXTURES / f"{name}.trace").read_text())


@pytest.fixture(scope="session")
def sample() -> CallGraph:
    return parse_call_graph((FIXTURES / "sample.graph").read_text())


def site(caller: str, callee: str, sid: int = 0) -> CallSite:
    return CallSite(caller, callee, sid)


def edges(*pairs: str) -> set[CallSite]:
    """``edges("AB", "CE")`` -> call sites with site id 0."""
    out = set()
    for p in pairs:
        a, b = (p[0], p[1:]) if len(p) > 2 and p[1] == "T" else (p[0], p[1])
        out.add(CallSite(a, b, 0))
    return out


def random_graph(rng: random.Random, *, max_nodes: int = 12, max_edges: int = 25,
                 acyclic: bool = False) -> CallGraph:
    """Random call graph with node 'n0' as root and 1-3 targets.

    Parallel call sites (same caller and callee, different site ids) are
    allowed. With ``acyclic`` every edge goes from a lower to a higher index.
    """
    n = rng.randint(2, max_nodes)
    names = [f"n{i}" for i in range(n)]
    m = rng.randint(1, max_edges)
    sites: set[CallSite] = set()
    for _ in range(m):
        if acyclic:
            a = rng.randrange(n - 1)
            b = rng.randrange(a + 1, n)
        else:
            a, b = rng.randrange(n), rng.randrange(n)
        sid = rng.choice((0, 0, 0, 1))
        sites.add(CallSite(names[a], names[b], sid))
    targets = rng.sample(names[1:], k=min(len(names) - 1, rng.randint(1, 3)))
    return CallGraph(frozenset(names), tuple(sites), frozenset({"n0"}), frozenset(targets))


def count_paths(g: CallGraph, target: str) -> int:
    """Root-to-target path count in a DAG, by memoized DFS."""
    memo: dict[str, int] = {}

    def walk(node: str) -> int:
        if node in memo:
            return memo[node]
        total = 1 if node == target else 0
        for e in g.out_edges(node):
            total += walk(e.callee)
        memo[node] = total
        return total

    return sum(walk(r) for r in g.roots)
