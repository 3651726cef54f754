"""Named-stream seed derivation.

All randomness in a run flows from one manifest seed; each component
draws from its own stream so that changing one stage never perturbs the
others.  SHA-256 keeps the mapping stable across platforms and sessions.
"""

import hashlib


def derive_seed(base_seed: int, stream: str) -> int:
    digest = hashlib.sha256(f"{base_seed}:{stream}".encode()).digest()
    return int.from_bytes(digest[:8], "big")
