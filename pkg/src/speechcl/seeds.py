"""Deterministic RNG derivation: every stream is a pure function of (seed, tags).

Batch workers, evaluation finetunes, and corpus generation all derive their
generators here, so results do not depend on execution order or on when in a
run something happens.
"""
from __future__ import annotations

import zlib

import numpy as np


def _as_word(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    raise TypeError(f"seed tag must be int or str, got {type(part).__name__}")


def derive_rng(seed: int, *tags) -> np.random.Generator:
    """A generator keyed by (seed, *tags); identical arguments, identical stream."""
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_as_word(t) for t in tags]
    return np.random.default_rng(np.random.SeedSequence(words))
