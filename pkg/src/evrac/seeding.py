"""Deterministic seed fan-out.

One master seed is split into independent named streams (init, buffer
sampling, negative sampling, ...) by hashing `"{seed}:{label}"`, so adding a
new consumer never perturbs existing ones and streams are identical across
platforms and runs.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(master: int, label: str) -> int:
    """64-bit sub-seed for a named consumer of the master seed."""
    digest = hashlib.sha256(f"{master}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def rng_for(master: int, label: str) -> np.random.Generator:
    """Seeded PCG64 generator for a named consumer."""
    return np.random.default_rng(derive_seed(master, label))
