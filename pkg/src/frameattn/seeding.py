"""Deterministic 64-bit seed derivation.

Every stochastic component (parameter init, dropout, batch shuffling, the
synthetic generator) draws from a numpy Generator seeded with
``mix64(seed, TAG, ...)``.  The mix is the splitmix64 finalizer, so derived
seeds are reproducible across platforms and Python versions; the constants
below are the standard splitmix64 increment and multipliers.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

# Stream tags, one per consumer, so streams never collide.
TAG_INIT = 1
TAG_DROPOUT = 2
TAG_BATCH = 3
TAG_SYNTH = 4
TAG_GRADCHECK = 5


def mix64(*parts: int) -> int:
    """Fold integer parts into one 64-bit seed (splitmix64 finalizer)."""
    h = 0
    for p in parts:
        h = (h + _GAMMA + (int(p) & _MASK)) & _MASK
        h ^= h >> 30
        h = (h * _MIX1) & _MASK
        h ^= h >> 27
        h = (h * _MIX2) & _MASK
        h ^= h >> 31
    return h
