"""Deterministic seed derivation.

Every stochastic component (module init, pair sampling, augmentation
draws) gets its own stream derived from (master seed, tag), so adding or
removing one component never shifts another's randomness.
"""

import contextlib
import hashlib

import torch


def derive_seed(base, tag):
    digest = hashlib.sha256(f"{base}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2 ** 63 - 1)


@contextlib.contextmanager
def seeded_init(seed):
    """Run module construction under an isolated, fixed RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def seeded_generator(base, tag):
    gen = torch.Generator()
    gen.manual_seed(derive_seed(base, tag))
    return gen
