"""Deterministic RNG substreams.

All randomness in the package flows from a single integer seed; every
consumer derives its own independent stream from (seed, purpose labels).
Labels are hashed with sha256 so the derivation is stable across runs,
platforms and Python versions (unlike the builtin hash()).
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label: object) -> int:
    digest = hashlib.sha256(repr(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *labels: object) -> np.random.Generator:
    """Generator for the substream identified by (seed, *labels)."""
    entropy = [int(seed)] + [_label_entropy(lab) for lab in labels]
    return np.random.default_rng(np.random.SeedSequence(entropy))
