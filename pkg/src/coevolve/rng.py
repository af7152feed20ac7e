"""Deterministic random streams.

All randomness flows from one root seed. A stream is addressed by a path of
labels, e.g. ``("questioner", iteration, step, scene_id)``; string labels are
mapped to integers with CRC-32 and the resulting integers become the
``spawn_key`` of a :class:`numpy.random.SeedSequence` whose entropy is the
root seed. Two different paths never share a stream and no global generator
is ever touched, so results do not depend on worker scheduling.
"""

from __future__ import annotations

import zlib

import numpy as np

RULE = "SeedSequence(entropy=root_seed, spawn_key=path); str labels -> crc32(utf-8)"


def _key(label: int | str) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if isinstance(label, (int, np.integer)) and int(label) >= 0:
        return int(label)
    raise ValueError(f"stream labels must be str or non-negative int, got {label!r}")


def seed_sequence(root_seed: int, *path: int | str) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(root_seed), spawn_key=tuple(_key(p) for p in path))


def stream(root_seed: int, *path: int | str) -> np.random.Generator:
    """Return the generator addressed by ``path`` under ``root_seed``."""
    return np.random.default_rng(seed_sequence(root_seed, *path))


def derive_seed(root_seed: int, *path: int | str) -> int:
    """Derive an unsigned 64-bit integer seed for ``path``."""
    return int(seed_sequence(root_seed, *path).generate_state(1, dtype=np.uint64)[0])
