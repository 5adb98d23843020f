"""Named, counter-based random streams.

Every stochastic op draws from ``stream(seed, module, purpose)``. Streams are
Philox generators keyed by a hash of the triple, so the numbers a client sees
do not depend on how many draws other clients made before it.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _words(text: str) -> list[int]:
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def stream(seed: int, module: str, purpose: str) -> np.random.Generator:
    if seed < 0:
        raise ValueError("seed must be non-negative")
    ss = np.random.SeedSequence([int(seed), *_words(module), *_words(purpose)])
    return np.random.Generator(np.random.Philox(ss))
