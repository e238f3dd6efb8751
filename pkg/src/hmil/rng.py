"""Named, reproducible random streams.

A stream for ``(seed, label)`` is built in two steps, both bit-exact on every
platform:

1. ``key = splitmix64(seed ^ fnv1a64(label))`` where ``fnv1a64`` is the
   64-bit FNV-1a hash of the UTF-8 label and ``splitmix64`` is one round of
   Vigna's SplitMix64 (add ``0x9E3779B97F4A7C15``, then the two xor-shift
   multiply steps with ``0xBF58476D1CE4E5B9`` and ``0x94D049BB133111EB``).
2. Four successive SplitMix64 outputs seeded with ``key`` form the 256-bit
   state of numpy's ``PCG64`` bit generator (via ``SeedSequence``-free raw
   state assignment), which is specified independently of numpy's version.
"""
from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a SplitMix64 state once. Returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h


def derive_seed(seed: int, label: str) -> int:
    """Hash ``(seed, label)`` to a 64-bit key."""
    return splitmix64((int(seed) & MASK64) ^ fnv1a64(str(label)))[1]


def seeded_rng(seed: int, label: str) -> np.random.Generator:
    """Independent generator for the named stream ``label`` under ``seed``."""
    s = derive_seed(seed, label)
    words = []
    for _ in range(4):
        s, out = splitmix64(s)
        words.append(out)
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": (words[0] << 64) | words[1], "inc": ((words[2] << 64) | words[3]) | 1},
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bitgen)
