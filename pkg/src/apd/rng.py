"""Deterministic random streams keyed by purpose.

Every source of randomness in an experiment is a child stream derived from
the experiment seed plus a list of tags (purpose string, task id, epoch, ...).
Streams are independent of each other and of the order in which they are
drawn, which is what makes checkpoint resume bit-exact: re-deriving the
stream for (seed, "shuffle", task, epoch) always yields the same sequence.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag) -> int:
    if isinstance(tag, str):
        digest = hashlib.sha256(tag.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    return int(tag) & _MASK64


def rng_for(seed: int, *tags) -> np.random.Generator:
    """Independent generator for the stream identified by (seed, *tags)."""
    words = [int(seed) & _MASK64] + [_tag_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))
