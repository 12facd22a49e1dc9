"""Named, order-independent RNG streams derived from one root seed."""
from __future__ import annotations

import hashlib

import numpy as np


def _key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def stream(root: int, *names: str | int) -> np.random.Generator:
    """Return a generator for the stream ``names`` under ``root``.

    The same (root, names) always yields the same stream, regardless of which
    other streams were created before it, so stages and workers can be rerun
    in any order.
    """
    keys = tuple(_key(str(n)) for n in names)
    return np.random.default_rng(np.random.SeedSequence(int(root), spawn_key=keys))


def as_rng(seed: int | np.random.Generator | None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
