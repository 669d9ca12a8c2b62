"""Named seed substreams: one root seed, independent reproducible stages."""

import hashlib


def derive_seed(seed, *names):
    """Child seed in [0, 2**63) for the stage path ``names`` under ``seed``."""
    key = ":".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") >> 1
