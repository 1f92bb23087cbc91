"""Named random streams.

Every stream is a Philox counter-based generator keyed by a SHA-256 digest of
``(root_seed, label, index)``. Two calls with the same triple always yield the
same sequence regardless of platform, call order, or how many other streams
exist.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream_key(root_seed: int, label: str, index: int = 0) -> int:
    digest = hashlib.sha256(f"{int(root_seed)}|{label}|{int(index)}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(root_seed: int, label: str, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=stream_key(root_seed, label, index)))


def normal_per_row(rngs, shape) -> np.ndarray:
    """Stack one standard-normal draw of ``shape`` from each generator."""
    return np.stack([r.standard_normal(shape) for r in rngs])
