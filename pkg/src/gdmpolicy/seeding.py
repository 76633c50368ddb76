"""Stage seeds derived from one master seed.

``derive_seed(master, stage, index)`` is the first 8 bytes (little endian) of
BLAKE2b over ``"{master}/{stage}/{index}"``, so every (stage, network) pair
gets its own stable 64-bit seed.
"""

import hashlib


def derive_seed(master: int, stage: str, index: int = 0) -> int:
    key = f"{int(master)}/{stage}/{int(index)}".encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
