"""Named deterministic random substreams derived from one root seed."""

import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(root_seed: int, *names) -> np.random.Generator:
    """Return an independent Generator for the given name path.

    Streams with different name paths are statistically independent;
    the same (root_seed, names) always yields the same stream.
    """
    seq = np.random.SeedSequence(
        entropy=int(root_seed), spawn_key=tuple(_name_key(n) for n in names)
    )
    return np.random.default_rng(seq)


def stream_seed(root_seed: int, *names) -> int:
    """Return a stable 63-bit integer seed for the given name path.

    Used to seed libraries that take plain integers (e.g. torch).
    """
    seq = np.random.SeedSequence(
        entropy=int(root_seed), spawn_key=tuple(_name_key(n) for n in names)
    )
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)
