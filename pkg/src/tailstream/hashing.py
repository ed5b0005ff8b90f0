"""Deterministic key hashing shared by routing and the grid.

Python's built-in ``hash`` is salted per process for str/bytes, so partition
routing uses its own serialization plus a seedless 64-bit digest. Every node
must compute the same partition id for the same key.
"""

from __future__ import annotations

import struct
from functools import lru_cache
from hashlib import blake2b

DEFAULT_PARTITION_COUNT = 271

_pack_double = struct.Struct("<d").pack
_pack_len = struct.Struct("<I").pack


def serialize_key(key) -> bytes:
    """Canonical byte form of a key; raises TypeError for unsupported types."""
    if key is None:
        return b"N"
    t = type(key)
    if t is int:
        return b"i" + str(key).encode("ascii")
    if t is str:
        return b"s" + key.encode("utf-8")
    if t is bytes:
        return b"b" + key
    if t is float:
        if key.is_integer():
            # keep 3 and 3.0 on the same partition, as they compare equal
            return b"i" + str(int(key)).encode("ascii")
        return b"f" + _pack_double(key)
    if t is tuple or t is list:
        parts = [b"t", _pack_len(len(key))]
        for element in key:
            data = serialize_key(element)
            parts.append(_pack_len(len(data)))
            parts.append(data)
        return b"".join(parts)
    if isinstance(key, int):
        # bool and int subclasses hash like the equal int
        return serialize_key(int(key))
    if isinstance(key, str):
        return serialize_key(str(key))
    if isinstance(key, tuple):
        return serialize_key(tuple(key))
    raise TypeError(f"unsupported key type for partitioning: {t.__name__}")


def key_hash64(key) -> int:
    """Unsigned 64-bit hash of ``serialize_key(key)``."""
    return int.from_bytes(blake2b(serialize_key(key), digest_size=8).digest(), "little")


@lru_cache(maxsize=1 << 16)
def _cached_partition(key, partition_count):
    return key_hash64(key) % partition_count


def compute_partition_id(key, partition_count: int = DEFAULT_PARTITION_COUNT) -> int:
    try:
        return _cached_partition(key, partition_count)
    except TypeError:
        # unhashable (e.g. list) keys skip the cache
        return key_hash64(key) % partition_count
