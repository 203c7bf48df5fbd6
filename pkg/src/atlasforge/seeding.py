"""Deterministic seed derivation.

Every stage and every member of a population gets its own seed derived
from a single global seed plus string/int tags, so that reruns are
bit-reproducible and stages stay independent of each other's RNG
consumption.
"""

import hashlib


def derive_seed(base_seed: int, *tags) -> int:
    """Derive a 63-bit seed from a base seed and a sequence of tags."""
    key = str(int(base_seed)) + "/" + "/".join(str(t) for t in tags)
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
