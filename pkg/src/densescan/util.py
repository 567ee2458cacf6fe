"""Shared plumbing: a platform-stable PRNG and the worker-thread cap.

All randomness in the package (weight init, synthetic images) comes from
SplitMix64 so that a seed produces bit-identical float32 values on every
platform. numpy's generators are avoided on purpose: their bit streams are
only stable per numpy version.
"""

from __future__ import annotations

import functools
import os

import numpy as np

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

THREADS_ENV = "DENSESCAN_THREADS"


def _mix64_int(z: int) -> int:
    # SplitMix64 finalizer on plain ints, mod 2**64.
    z ^= z >> 30
    z = (z * _MIX1) & _MASK
    z ^= z >> 27
    z = (z * _MIX2) & _MASK
    return z ^ (z >> 31)


def split_key(seed: int, index: int) -> int:
    """Derive an independent child stream key from (seed, index)."""
    return _mix64_int((seed + _GOLDEN * (index + 1)) & _MASK)


def uniform_floats(key: int, count: int, low: float, high: float) -> np.ndarray:
    """`count` float32 values uniform in [low, high), bit-stable across platforms.

    Value i is mix64(key + (i+1)*GOLDEN) mapped to [0,1) via the top 53 bits.
    """
    idx = np.arange(1, count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        states = np.uint64(key & _MASK) + idx * np.uint64(_GOLDEN)
        z = states ^ (states >> np.uint64(30))
        z = z * np.uint64(_MIX1)
        z ^= z >> np.uint64(27)
        z = z * np.uint64(_MIX2)
        bits = z ^ (z >> np.uint64(31))
    unit = (bits >> np.uint64(11)).astype(np.float64) * (2.0**-53)
    return (low + unit * (high - low)).astype(np.float32)


@functools.lru_cache(maxsize=1)
def worker_count() -> int:
    """Worker-thread cap: DENSESCAN_THREADS if set, else all cores."""
    cores = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return cores
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return min(n, cores)
