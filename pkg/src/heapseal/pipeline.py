"""Offline diagnosis followed by online replay of the same trace."""

from __future__ import annotations

from dataclasses import dataclass

from .callgraph import CallGraph, instrumentation_set
from .config import Config
from .defender import GUARD_PAGE, UAF_QUARANTINE, DefenseReport, replay
from .offline import Analysis, HeapWarning, analyze
from .patch import Vuln, build_table, serialize_patches
from .trace import Read

__all__ = ["Check", "E2EResult", "check_warning", "run_e2e"]


@dataclass(frozen=True)
class Check:
    warning: HeapWarning
    passed: bool
    how: str

    def to_line(self) -> str:
        w = self.warning
        verdict = "pass" if self.passed else "fail"
        return (f"check kind={w.kind.name} buf={w.origin_buf} event={w.event_index} "
                f"result={verdict} via={self.how}")


@dataclass
class E2EResult:
    analysis: Analysis
    defense: DefenseReport
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def patch_text(self) -> str:
        return serialize_patches(self.analysis.patches)

    def to_text(self) -> str:
        out = [w.to_line() + "\n" for w in self.analysis.warnings]
        out += ["patch " + line + "\n" for line in self.patch_text.splitlines()]
        out.append(self.defense.to_text())
        out += [c.to_line() + "\n" for c in self.checks]
        out.append(f"result {'pass' if self.passed else 'fail'} checks={len(self.checks)}\n")
        return "".join(out)


def check_warning(w: HeapWarning, trace, defense: DefenseReport, strict_uaf: bool) -> Check:
    """Was the offline finding neutralized when the same event ran online?"""
    blocked = {e.kind for e in defense.blocked_at(w.event_index)}
    if w.kind is Vuln.OVERFLOW:
        return Check(w, GUARD_PAGE in blocked, "guard-page")
    if w.kind is Vuln.UAF:
        if strict_uaf:
            return Check(w, UAF_QUARANTINE in blocked, "quarantine")
        # Deferral only: the stale block must still be withheld from reuse.
        hits = [n for n in defense.notes_at(w.event_index) if n.kind == "quarantine-hit"]
        return Check(w, bool(hits), "non-reuse")
    # UNINIT: either the read never happened or the flagged bytes came back zeroed.
    if blocked:
        return Check(w, True, "blocked")
    ev = trace[w.event_index]
    data = defense.reads.get(w.event_index)
    if not isinstance(ev, Read) or data is None:
        return Check(w, False, "zero-fill")
    zeroed = all(data[off - ev.offset] == 0 for off in w.offsets)
    return Check(w, zeroed, "zero-fill")


def run_e2e(g: CallGraph, trace, cfg: Config | None = None) -> E2EResult:
    cfg = cfg or Config()
    instr = instrumentation_set(g, cfg.strategy)
    analysis = analyze(g, instr, trace, cfg)
    table = build_table(analysis.patches)
    defense = replay(g, instr, table, trace, cfg)
    checks = [check_warning(w, trace, defense, cfg.strict_uaf) for w in analysis.warnings]
    return E2EResult(analysis, defense, checks)
