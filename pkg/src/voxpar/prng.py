"""Pinned, counter-based pseudo-random streams.

Everything stochastic in voxpar (epoch shuffles, weight init, dropout masks,
synthetic fixture voxels) is derived from the splitmix64 mixer below, keyed
by small integer tuples. The generator is counter-based: value i of a stream
is a pure function of (key, i), so any rank can produce any slice of any
stream without coordination — this is what makes dropout masks and synthetic
data partition-invariant by construction.

Pinned algorithm (stable across platforms and library versions):

    mix(z): z ^= z >> 30; z *= 0xBF58476D1CE4E5B9
            z ^= z >> 27; z *= 0x94D049BB133111EB
            z ^= z >> 31                     (all mod 2**64)

    key_fold(k0..km): acc = 0x243F6A8885A308D3
                      acc = mix(acc ^ mix(ki + 0x9E3779B97F4A7C15)) for each ki
    stream(key)[i]  = mix(key + (i+1)*0x9E3779B97F4A7C15)
    uniform01       = (u64 >> 11) * 2.0**-53        (fp64 in [0,1))
    permutation     = Fisher-Yates, j = stream[i] mod (i+1), i = S-1 .. 1
                      (modulo bias < i/2**64; irrelevant at desk scale)
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_FOLD_INIT = 0x243F6A8885A308D3


def _mix_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix_arr(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def key_fold(parts) -> int:
    """Collapse a tuple of ints (any sign) into one 64-bit stream key."""
    acc = _FOLD_INIT
    for p in parts:
        acc = _mix_int(acc ^ _mix_int((int(p) & _MASK) + _GOLDEN))
    return acc


def u64(key, n: int = None, counters: np.ndarray = None) -> np.ndarray:
    """Raw 64-bit words of the stream, by count or by explicit counters."""
    k = key_fold(key) if not isinstance(key, int) else key
    if counters is None:
        counters = np.arange(n, dtype=np.uint64)
    else:
        counters = counters.astype(np.uint64, copy=False)
    return _mix_arr(np.uint64(k) + (counters + np.uint64(1)) * np.uint64(_GOLDEN))


def uniform01(key, n: int = None, counters: np.ndarray = None) -> np.ndarray:
    """fp64 uniforms in [0, 1)."""
    return (u64(key, n, counters) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def uniform(key, n: int, lo: float, hi: float) -> np.ndarray:
    return lo + (hi - lo) * uniform01(key, n)


def randint(key, n: int, lo: int, hi: int) -> np.ndarray:
    """Integers in [lo, hi), modulo-mapped (documented bias, negligible)."""
    span = np.uint64(hi - lo)
    return (u64(key, n) % span).astype(np.int64) + lo


def permutation(key, size: int) -> np.ndarray:
    """Deterministic Fisher-Yates shuffle of arange(size)."""
    perm = np.arange(size, dtype=np.int64)
    if size < 2:
        return perm
    draws = u64(key, size)
    for i in range(size - 1, 0, -1):
        j = int(draws[i] % np.uint64(i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
