from __future__ import annotations

import os
from dataclasses import dataclass

from .callgraph import Strategy

__all__ = ["Config", "DEFAULT_QUOTA", "PRODUCTION_QUOTA", "seed_from_env"]

# Desk-scale quarantine quota; production deployments used 2 GiB.
DEFAULT_QUOTA = 1 << 20
PRODUCTION_QUOTA = 2 << 30

SEED_ENV = "HEAPSEAL_SEED"


def seed_from_env(default: int = 0) -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return default
    return int(raw, 0) & ((1 << 64) - 1)


@dataclass(frozen=True)
class Config:
    seed: int = 0
    strategy: Strategy = Strategy.INCREMENTAL
    quota_bytes: int = DEFAULT_QUOTA
    redzone_bytes: int = 16
    strict_uaf: bool = True

    def __post_init__(self):
        if self.redzone_bytes < 1:
            raise ValueError("redzone_bytes must be >= 1")
        if self.quota_bytes < 0:
            raise ValueError("quota_bytes must be >= 0")
        if not 0 <= self.seed < 1 << 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
