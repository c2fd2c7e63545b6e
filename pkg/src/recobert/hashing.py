"""64-bit FNV-1a hashing for file fingerprints."""

from __future__ import annotations

from pathlib import Path

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """Hash a byte string with 64-bit FNV-1a."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def fnv1a64_file(path: str | Path) -> int:
    """Hash a file's contents with 64-bit FNV-1a."""
    return fnv1a64(Path(path).read_bytes())
