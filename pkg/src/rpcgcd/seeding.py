"""Deterministic RNG streams derived from one root seed.

Each component draws from its own named stream, so adding a consumer never
shifts the draws seen by another.
"""

from __future__ import annotations

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Generator for a named stream under ``seed``; stable across runs."""
    key = int.from_bytes(label.encode("utf-8"), "big")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), key])))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = state
    return gen
