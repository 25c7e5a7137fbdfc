import hashlib
from typing import Any, Union

import numpy as np

SeedLike = Union[int, np.random.Generator]

_SEED_MASK = (1 << 63) - 1


def derive_seed(*parts: Any) -> int:
    """Stable 63-bit seed from any sequence of printable parts.

    Python's built-in hash() is salted per process, so sha256 over the repr of
    the parts is used instead.
    """
    payload = "\x1f".join(repr(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(payload).hexdigest()
    return int(digest[:16], 16) & _SEED_MASK


def as_rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(int(seed))


def child_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, _SEED_MASK, dtype=np.int64))
