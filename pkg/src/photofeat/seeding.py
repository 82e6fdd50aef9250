"""Deterministic named random streams.

Every random decision in the pipeline draws from a stream derived from a
single root seed plus a stream name, so any component can be re-run in
isolation and reproduce its draws exactly.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream(root_seed: int, name: str) -> np.random.Generator:
    """Return an RNG for the named stream under ``root_seed``.

    Same (root_seed, name) always yields the same generator state; distinct
    names yield statistically independent streams.
    """
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((root_seed, tag))))


def child_seed(root_seed: int, name: str) -> int:
    """Derive a u63 child seed for handing to a sub-component."""
    return int(stream(root_seed, name).integers(0, 2**63 - 1))
