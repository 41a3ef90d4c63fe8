"""Deterministic seeding and small shared helpers."""

from __future__ import annotations

import hashlib


def derive_seed(*parts: int | str) -> int:
    """Derive a stable 63-bit sub-seed from a tuple of labels and integers.

    Hash-based so that streams for different purposes ("keygen", "shard-3", ...)
    never collide or correlate, and identical inputs give identical seeds on
    every platform and run.
    """
    material = "\x1f".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.sha256(material).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def fmt_float(x: float) -> str:
    """Canonical text form of a float: shortest repr that round-trips."""
    return repr(float(x))
