"""
Seed derivation helpers.

Every random stream in the package comes from ``numpy.random.SeedSequence``
keyed on (master seed, purpose, index), so work split across any number of
workers draws exactly the same numbers.
"""
import numpy as np

# Purpose keys; stable integers, changing them changes every artifact.
PURPOSE_TRAINING_SET = 1
PURPOSE_PHANTOM = 2
PURPOSE_SPLIT = 3
PURPOSE_MEMBER = 4
PURPOSE_SAMPLING = 5
PURPOSE_EVALUATION = 6


def derive_seed_sequence(seed: int, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), *[int(k) for k in keys]])


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent PCG64 generator for (seed, *keys)."""
    return np.random.default_rng(derive_seed_sequence(seed, *keys))


def derive_int_seed(seed: int, *keys: int) -> int:
    """A plain 32-bit seed, for places that persist the seed (model files, manifests)."""
    return int(derive_seed_sequence(seed, *keys).generate_state(1, dtype=np.uint32)[0])
