"""Deterministic seed fan-out.

A single master seed is expanded into per-stage / per-worker seeds by hashing
the seed together with string or integer labels. No global RNG state is used
anywhere in the package; every stochastic routine receives an explicit seed.
"""

import hashlib


def derive_seed(master: int, *labels) -> int:
    """Derive a 63-bit seed from ``master`` and a sequence of labels.

    Stable across processes and platforms (unlike built-in ``hash``).
    Labels may be ints or strings; order matters.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(master)).encode())
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "big") >> 1
