"""Patches ``<fun, ccid, T>`` keyed by allocation context, and the frozen lookup table.

File format, one patch per line, LF endings::

    malloc 00000000deadbeef 5

The third column is the vulnerability mask (OVERFLOW=1, UAF=2, UNINIT=4).
Optional trailing ``key=value`` tokens are kept as parameters; none are
interpreted yet.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterable, Mapping

__all__ = [
    "PATCH_FUNS",
    "FrozenTableError",
    "Patch",
    "PatchFormatError",
    "PatchTable",
    "Vuln",
    "build_table",
    "lookup",
    "parse_patches",
    "serialize_patches",
]

PATCH_FUNS = frozenset({"malloc", "calloc", "memalign", "aligned_alloc", "realloc"})

_HEX_RE = re.compile(r"[0-9a-fA-F]{1,16}\Z")
_PARAM_RE = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)=(\S+)\Z")


class Vuln(enum.IntFlag):
    OVERFLOW = 1
    UAF = 2
    UNINIT = 4


class PatchFormatError(ValueError):
    pass


class FrozenTableError(RuntimeError):
    pass


@dataclass(frozen=True, order=True)
class Patch:
    fun: str
    ccid: int
    t_bits: int
    params: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "t_bits", int(self.t_bits))
        if self.fun not in PATCH_FUNS:
            raise PatchFormatError(f"unknown allocation function {self.fun!r}")
        if not 0 <= self.ccid < 1 << 64:
            raise PatchFormatError(f"ccid out of range: {self.ccid:#x}")
        if not 1 <= self.t_bits <= 7:
            raise PatchFormatError(f"vulnerability mask {self.t_bits} outside [1, 7]")

    @property
    def key(self) -> tuple[str, int]:
        return (self.fun, self.ccid)

    def to_line(self) -> str:
        parts = [self.fun, f"{self.ccid:016x}", str(self.t_bits)]
        parts += [f"{k}={v}" for k, v in self.params]
        return " ".join(parts)


def serialize_patches(patches: Iterable[Patch]) -> str:
    ordered = sorted(patches, key=lambda p: (p.fun, p.ccid))
    return "".join(p.to_line() + "\n" for p in ordered)


def parse_patches(text: str) -> list[Patch]:
    patches: list[Patch] = []
    seen: set[tuple[str, int]] = set()
    for lineno, raw in enumerate(text.split("\n"), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 3:
            raise PatchFormatError(f"line {lineno}: expected '<fun> <ccid> <mask>'")
        fun, ccid_tok, mask_tok, *extra = fields
        if not _HEX_RE.match(ccid_tok):
            raise PatchFormatError(f"line {lineno}: bad ccid {ccid_tok!r}")
        if not mask_tok.isdigit():
            raise PatchFormatError(f"line {lineno}: bad mask {mask_tok!r}")
        params = []
        for tok in extra:
            m = _PARAM_RE.match(tok)
            if not m:
                raise PatchFormatError(f"line {lineno}: bad parameter {tok!r}")
            params.append((m.group(1), m.group(2)))
        try:
            patch = Patch(fun, int(ccid_tok, 16), int(mask_tok), tuple(params))
        except PatchFormatError as exc:
            raise PatchFormatError(f"line {lineno}: {exc}") from None
        if patch.key in seen:
            raise PatchFormatError(f"line {lineno}: duplicate key {fun} {ccid_tok}")
        seen.add(patch.key)
        patches.append(patch)
    return patches


class PatchTable:
    """Hash table keyed by ``(fun, ccid)``; read-only once frozen."""

    def __init__(self):
        self._entries: dict[tuple[str, int], tuple[int, tuple]] = {}
        self._frozen = False

    @property
    def frozen(self) -> bool:
        return self._frozen

    @property
    def entries(self) -> Mapping[tuple[str, int], tuple[int, tuple]]:
        return MappingProxyType(self._entries)

    def insert(self, patch: Patch) -> None:
        if self._frozen:
            raise FrozenTableError("patch table is read-only after initialization")
        if patch.key in self._entries:
            raise PatchFormatError(f"duplicate key {patch.fun} {patch.ccid:016x}")
        self._entries[patch.key] = (patch.t_bits, patch.params)

    def freeze(self) -> "PatchTable":
        self._frozen = True
        return self

    def get(self, fun: str, ccid: int) -> tuple[int, tuple] | None:
        return self._entries.get((fun, ccid))

    def patches(self) -> list[Patch]:
        return [Patch(f, c, t, p) for (f, c), (t, p) in sorted(self._entries.items())]

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries


def build_table(patches: Iterable[Patch]) -> PatchTable:
    table = PatchTable()
    for p in patches:
        table.insert(p)
    return table.freeze()


def lookup(table: PatchTable, fun: str, ccid: int) -> tuple[int, tuple] | None:
    if not table.frozen:
        raise FrozenTableError("lookup requires a frozen table")
    return table.get(fun, ccid)
