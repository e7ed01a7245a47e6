"""Heap hardening keyed by allocation context.

Calling-context IDs name each allocation site and path. An offline shadow-memory
pass turns an attack trace into patches, and a simulated hardened heap applies
them when the same contexts allocate again."""

from .callgraph import (
    CallGraph,
    CallSite,
    InstrumentationSet,
    Strategy,
    instrumentation_set,
    parse_call_graph,
)
from .config import Config
from .defender import VirtualHeap, replay
from .offline import analyze
from .patch import Patch, PatchTable, Vuln, build_table, lookup, parse_patches, serialize_patches
from .pipeline import run_e2e
from .trace import parse_trace

__version__ = "0.1.0"

__all__ = [
    "CallGraph",
    "CallSite",
    "Config",
    "InstrumentationSet",
    "Patch",
    "PatchTable",
    "Strategy",
    "VirtualHeap",
    "Vuln",
    "analyze",
    "build_table",
    "instrumentation_set",
    "lookup",
    "parse_call_graph",
    "parse_patches",
    "parse_trace",
    "replay",
    "run_e2e",
    "serialize_patches",
]
