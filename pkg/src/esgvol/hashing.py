"""Deterministic hashing primitives shared across the package.

Feature hashing and artifact fingerprints must agree bit-exactly across
platforms and runs, so everything here is pinned to published algorithms:

* ``fnv1a64`` -- the 64-bit FNV-1a hash with seed mixing (the seed is fed
  through the hash as 8 little-endian bytes before the payload).
* ``crc64`` -- CRC-64/XZ (ECMA-182 polynomial, reflected, init/xorout all
  ones), used as the trailing checksum of binary artifacts.
"""

from __future__ import annotations

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes, seed: int = 0) -> int:
    """64-bit FNV-1a over ``seed`` (8 LE bytes) followed by ``data``."""
    h = FNV64_OFFSET
    for byte in seed.to_bytes(8, "little", signed=False) + data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


def hash_index_sign(data: bytes, seed: int, dim: int) -> tuple[int, int]:
    """Map a byte string to (bucket index, sign) for feature hashing.

    The low bit of the 64-bit hash picks the sign, the remaining bits pick
    the bucket, so index and sign are (nearly) independent.
    """
    h = fnv1a64(data, seed)
    sign = 1 if h & 1 else -1
    return (h >> 1) % dim, sign


_CRC64_POLY = 0xC96C5795D7870F42  # ECMA-182, reflected


def _crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ _CRC64_POLY if crc & 1 else crc >> 1
        table.append(crc)
    return table


_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ; pass a previous value to continue a running checksum."""
    crc ^= _MASK64
    for byte in data:
        crc = _TABLE[(crc ^ byte) & 0xFF] ^ (crc >> 8)
    return crc ^ _MASK64
