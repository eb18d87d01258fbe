"""Named seed derivation.

Every random stream in a run comes from the root seed plus a purpose tag and
integer keys, so results do not depend on execution order or threading.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def derive_seed(root: int, purpose: str, *keys: int) -> int:
    """Stable 64-bit seed for ``(root, purpose, *keys)``."""
    entropy = [int(root) & _MASK64, _purpose_code(purpose)] + [int(k) & _MASK64 for k in keys]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def make_rng(root: int, purpose: str, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(root, purpose, *keys))
