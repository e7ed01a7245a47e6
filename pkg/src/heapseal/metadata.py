"""The one-word buffer header and the buffer-structure table.

Bit layout of the 64-bit word that precedes every user buffer::

    bits  0-3   buffer type: OVERFLOW, UAF, UNINIT, ALIGNED
    bits  4-51  user size                 (structures 1 and 3)
    bits  4-39  guard page address >> 12  (structures 2 and 4)
    bits 58-63  log2(alignment)           (structures 3 and 4)

Structures 2 and 4 keep the user size in the first word of the guard page.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

__all__ = [
    "ALIGNED_BIT",
    "MetadataError",
    "MetadataFields",
    "PAGE_SHIFT",
    "PAGE_SIZE",
    "StructureKind",
    "choose_structure",
    "pack_metadata",
    "unpack_metadata",
]

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT
ADDR_BITS = 48

ALIGNED_BIT = 1 << 3
_TYPE_MASK = 0xF
_SIZE_SHIFT, _SIZE_BITS = 4, 48
_GUARD_SHIFT, _GUARD_BITS = 4, ADDR_BITS - PAGE_SHIFT
_EXP_SHIFT, _EXP_BITS = 58, 6

_OVERFLOW = 1


class MetadataError(ValueError):
    pass


class StructureKind(enum.Enum):
    S1 = 1  # [meta][user]
    S2 = 2  # [meta][user][pad][guard page]
    S3 = 3  # [pad][meta][user], user aligned
    S4 = 4  # [pad][meta][user][pad][guard page]

    @property
    def aligned(self) -> bool:
        return self in (StructureKind.S3, StructureKind.S4)

    @property
    def guarded(self) -> bool:
        return self in (StructureKind.S2, StructureKind.S4)


def choose_structure(t_bits: int, aligned: bool) -> StructureKind:
    if not 0 <= t_bits <= 7:
        raise MetadataError(f"vulnerability mask {t_bits} outside [0, 7]")
    if t_bits & _OVERFLOW:
        return StructureKind.S4 if aligned else StructureKind.S2
    return StructureKind.S3 if aligned else StructureKind.S1


@dataclass(frozen=True)
class MetadataFields:
    kind: StructureKind
    t_bits: int
    aligned: bool
    size: int | None = None
    guard_addr: int | None = None
    align_exp: int | None = None

    @property
    def alignment(self) -> int | None:
        return None if self.align_exp is None else 1 << self.align_exp


def pack_metadata(kind: StructureKind, t_bits: int, aligned: bool,
                  size_or_guard_addr: int, align_exp: int | None = None) -> int:
    if aligned != kind.aligned:
        raise MetadataError(f"{kind.name} requires aligned={kind.aligned}")
    if choose_structure(t_bits, aligned) is not kind:
        raise MetadataError(f"mask {t_bits} does not select {kind.name}")

    word = t_bits | (ALIGNED_BIT if aligned else 0)
    if kind.guarded:
        addr = size_or_guard_addr
        if addr % PAGE_SIZE or not 0 <= addr < 1 << ADDR_BITS:
            raise MetadataError(f"guard page address {addr:#x} not page aligned within 48 bits")
        word |= (addr >> PAGE_SHIFT) << _GUARD_SHIFT
    else:
        size = size_or_guard_addr
        if not 0 <= size < 1 << _SIZE_BITS:
            raise MetadataError(f"size {size} does not fit in 48 bits")
        word |= size << _SIZE_SHIFT

    if aligned:
        if align_exp is None or not 0 <= align_exp < 1 << _EXP_BITS:
            raise MetadataError(f"alignment exponent {align_exp} outside [0, 63]")
        word |= align_exp << _EXP_SHIFT
    elif align_exp not in (None, 0):
        raise MetadataError("alignment exponent given for a non-aligned structure")
    return word


def unpack_metadata(word: int, kind: StructureKind | None = None) -> MetadataFields:
    if not 0 <= word < 1 << 64:
        raise MetadataError("metadata word must be a 64-bit unsigned value")
    t_bits = word & 0x7
    aligned = bool(word & ALIGNED_BIT)
    actual = choose_structure(t_bits, aligned)
    if kind is not None and kind is not actual:
        raise MetadataError(f"word encodes {actual.name}, expected {kind.name}")

    size = guard = exp = None
    if actual.guarded:
        guard = ((word >> _GUARD_SHIFT) & ((1 << _GUARD_BITS) - 1)) << PAGE_SHIFT
    else:
        size = (word >> _SIZE_SHIFT) & ((1 << _SIZE_BITS) - 1)
    if aligned:
        exp = (word >> _EXP_SHIFT) & ((1 << _EXP_BITS) - 1)
    return MetadataFields(actual, t_bits, aligned, size, guard, exp)
