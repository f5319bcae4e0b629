"""Seed splitting and per-trajectory random streams.

All randomness in a run flows from one 64-bit master seed.  Sub-seeds are
derived with :func:`derive_seed`, which feeds the master seed and a tuple of
labels through :class:`numpy.random.SeedSequence` (string labels are reduced
to integers with CRC-32 first).  Trajectory ``i`` of a simulation draws its
Brownian increments from a Philox counter-based generator keyed by
``(sub_seed, i)``, so its noise never depends on how trajectories are split
across workers.
"""

from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1


def _label_code(label) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode())
    if isinstance(label, (int, np.integer)) and label >= 0:
        return int(label)
    raise TypeError(f"seed labels must be str or nonnegative int, got {label!r}")


def derive_seed(seed: int, *labels) -> int:
    """Deterministic 64-bit sub-seed for ``(seed, *labels)``."""
    if seed is None:
        raise ValueError("a seed is mandatory")
    ss = np.random.SeedSequence(entropy=int(seed) & MASK64,
                                spawn_key=tuple(_label_code(x) for x in labels))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def stream(seed: int, index: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, index)``."""
    key = np.array([int(seed) & MASK64, int(index) & MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def generator(seed: int, *labels) -> np.random.Generator:
    """Single generator for a labelled purpose (samplers, resampling, ...)."""
    return stream(derive_seed(seed, *labels), 0)


def normals(gens, shape) -> np.ndarray:
    """Stack ``g.standard_normal(shape)`` over a list of generators."""
    out = np.empty((len(gens),) + tuple(shape))
    for i, g in enumerate(gens):
        g.standard_normal(shape, out=out[i])
    return out
