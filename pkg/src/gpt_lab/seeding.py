"""Counter-based random stream splitting.

Every random draw in the project flows from one top-level seed expanded
through a spawn key, so adding a sweep cell or a fold never perturbs the
streams of any other cell.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"seed path parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little")
    raise TypeError(f"seed path parts must be int or str, got {type(part)!r}")


def rng_for(seed: int, *path) -> np.random.Generator:
    """Independent generator for the stream named by ``path`` under ``seed``."""
    key = tuple(_key_part(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=key))
