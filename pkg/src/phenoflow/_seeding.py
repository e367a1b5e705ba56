import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError(f"seed components must be non-negative, got {key}")
        return int(key)
    digest = hashlib.blake2b(str(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_rng(seed, *keys) -> np.random.Generator:
    """Independent generator keyed by ``seed`` plus any mix of ints and strings.

    The stream depends only on the key values, never on call order, so work
    can be scheduled in any order without changing results.
    """
    entropy = [_key_to_int(seed)] + [_key_to_int(k) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def derive_seed(seed, *keys) -> int:
    """A 63-bit integer seed derived like :func:`derive_rng`."""
    return int(derive_rng(seed, *keys).integers(0, 2**63 - 1))
