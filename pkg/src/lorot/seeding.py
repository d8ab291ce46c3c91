"""Deterministic random-stream derivation.

All randomness in the library flows through numpy Generators derived from a
global seed plus integer context keys (worker id, epoch, batch index, ...).
Deriving rather than sharing one stream keeps transform outputs independent
of batching and worker layout.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a Generator keyed by (seed, *keys); same inputs, same stream."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def content_key(array: np.ndarray) -> int:
    """Integer digest of an array's bytes, for order-independent per-sample streams."""
    digest = hashlib.sha256(np.ascontiguousarray(array).tobytes()).digest()
    return int.from_bytes(digest[:16], "little")
