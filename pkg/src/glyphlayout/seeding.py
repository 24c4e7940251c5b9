"""Derive independent, reproducible seeds from one base integer."""
import hashlib

import numpy as np


def derive_seed(base: int, *components) -> int:
    """Hash ``base`` together with component names/indices into a 63-bit seed."""
    key = "/".join([str(int(base))] + [str(c) for c in components])
    return int.from_bytes(hashlib.sha256(key.encode("utf-8")).digest()[:8], "little") >> 1


def make_rng(base: int, *components) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *components))
