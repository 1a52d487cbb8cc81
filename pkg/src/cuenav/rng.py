"""Named random substreams derived from one root seed."""
from __future__ import annotations

import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def substream(root_seed: int, *names) -> np.random.Generator:
    """Independent generator for ``(root_seed, *names)``; stable across runs and platforms."""
    return np.random.default_rng([_key(root_seed)] + [_key(n) for n in names])


def stable_hash(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))
