"""Counter-based random number generation.

Every Gaussian increment is a pure function of ``(seed, stream, path,
step, component)``, so any slice of a simulation can be regenerated
independently of iteration order or worker count. Streams separate
independent uses of the same master seed (path simulation, network
initialization, nested resimulation, ...).
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtri

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)

# Packing limits for the (path, step, component) counter word.
MAX_COMPONENTS = 1 << 4
MAX_STEPS = 1 << 16


def _mix(x: np.ndarray) -> np.ndarray:
    """One SplitMix64 finalizer round (uint64 in, uint64 out, wrapping)."""
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def _key(seed: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        k = np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _GOLDEN * np.uint64(stream & 0xFFFFFFFF)
    return _mix(_mix(k))


def stream_id(label: str) -> int:
    """Stable 32-bit stream id from a purpose label."""
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")


def uniforms(seed: int, stream: int, path0: int, n_paths: int, n_steps: int, n_comp: int) -> np.ndarray:
    """Uniforms in (0,1), shape (n_paths, n_steps, n_comp).

    Path ``p`` occupies counter block ``path0 + p`` regardless of how the
    call is chunked, so batched and monolithic generation agree bitwise.
    """
    if n_comp > MAX_COMPONENTS or n_steps > MAX_STEPS:
        raise ValueError(f"counter packing supports < {MAX_STEPS} steps and < {MAX_COMPONENTS} components")
    paths = (np.uint64(path0) + np.arange(n_paths, dtype=np.uint64))[:, None, None]
    steps = np.arange(n_steps, dtype=np.uint64)[None, :, None]
    comps = np.arange(n_comp, dtype=np.uint64)[None, None, :]
    with np.errstate(over="ignore"):
        word = (paths << np.uint64(20)) | (steps << np.uint64(4)) | comps
        h = _mix(_mix(_mix(word + _key(seed, stream))))
    # (k + 0.5) / 2^53 is strictly inside (0,1)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0**-53)


def normals(seed: int, stream: int, path0: int, n_paths: int, n_steps: int, n_comp: int) -> np.ndarray:
    """Standard normals, shape (n_paths, n_steps, n_comp), via inverse CDF."""
    return ndtri(uniforms(seed, stream, path0, n_paths, n_steps, n_comp))
