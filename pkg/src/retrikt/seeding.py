"""Deterministic seed derivation so every stage and substream is independently replayable."""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *labels) -> int:
    """Stable 63-bit seed from a base seed and a label path."""
    key = "|".join([str(base), *map(str, labels)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)
