"""Counter-based Gaussian noise.

Every Brownian increment is a pure function of ``(seed, stream, step,
particle, coordinate)``.  The bits come from a vectorised Philox4x64-10
block cipher (the same construction as :class:`numpy.random.Philox`,
against which the tests cross-check it), so particle ``i`` sees the same
noise no matter how many particles run alongside it or how the particle
range is chunked across workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_LO32 = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_ROUNDS = 10

# Named streams keep the different noise consumers of one seed apart.
STREAM_MAIN = 0
STREAM_NU = 1
STREAM_COUPLING = 2
STREAM_AUX = 3


def _mulhilo(a, b):
    """Full 64x64 -> 128 bit product, returned as (hi, lo)."""
    a_lo, a_hi = a & _LO32, a >> _S32
    b_lo, b_hi = b & _LO32, b >> _S32
    ll = a_lo * b_lo
    lh = a_lo * b_hi
    hl = a_hi * b_lo
    hh = a_hi * b_hi
    mid = (ll >> _S32) + (lh & _LO32) + (hl & _LO32)
    hi = hh + (lh >> _S32) + (hl >> _S32) + (mid >> _S32)
    return hi, a * b


def philox4x64(counter, key) -> np.ndarray:
    """Apply Philox4x64-10 to a batch of 256-bit counters.

    Parameters
    ----------
    counter : array of uint64, shape (n, 4)
    key : array of uint64, shape (2,)

    Returns
    -------
    ndarray of uint64, shape (n, 4)
    """
    c = np.asarray(counter, dtype=np.uint64)
    if c.ndim != 2 or c.shape[1] != 4:
        raise ValueError(f"counter must have shape (n, 4), got {c.shape}")
    k0, k1 = (np.uint64(v) for v in np.asarray(key, dtype=np.uint64))
    c0, c1, c2, c3 = (c[:, j].copy() for j in range(4))
    with np.errstate(over="ignore"):
        for r in range(_ROUNDS):
            if r:
                k0 = k0 + _W0
                k1 = k1 + _W1
            hi0, lo0 = _mulhilo(_M0, c0)
            hi1, lo1 = _mulhilo(_M1, c2)
            c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=1)


def _uniform_open(bits: np.ndarray) -> np.ndarray:
    # 53 significant bits, offset by half an ulp so the result lies in (0, 1).
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _key(seed: int, stream: int) -> np.ndarray:
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be non-negative integers")
    return np.array([seed & 0xFFFFFFFFFFFFFFFF, stream & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)


def _normals_block(seed, stream, step, start, stop, dim):
    # Flat index j = particle * dim + coord; block j // 4, lane j % 4.
    lo, hi = start * dim, stop * dim
    b_lo, b_hi = lo // 4, -(-hi // 4)
    counters = np.zeros((b_hi - b_lo, 4), dtype=np.uint64)
    counters[:, 0] = np.arange(b_lo, b_hi, dtype=np.uint64)
    counters[:, 1] = np.uint64(step)
    u = _uniform_open(philox4x64(counters, _key(seed, stream)))
    # Box-Muller on the lane pairs (0, 1) and (2, 3).
    r01 = np.sqrt(-2.0 * np.log(u[:, 0]))
    r23 = np.sqrt(-2.0 * np.log(u[:, 2]))
    a01 = 2.0 * np.pi * u[:, 1]
    a23 = 2.0 * np.pi * u[:, 3]
    z = np.stack([r01 * np.cos(a01), r01 * np.sin(a01), r23 * np.cos(a23), r23 * np.sin(a23)], axis=1)
    return z.reshape(-1)[lo - 4 * b_lo:hi - 4 * b_lo].reshape(stop - start, dim)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MVLAB_THREADS", "1")))
    except ValueError:
        return 1


def standard_normals(seed: int, stream: int, step: int, n_particles: int, dim: int,
                     start: int = 0, threads: int | None = None) -> np.ndarray:
    """Standard normal draws for particles ``start .. start+n_particles-1`` at ``step``.

    The result is bit-identical for any ``threads`` value and any split
    of the particle range.
    """
    if n_particles < 0 or dim < 1:
        raise ValueError("need n_particles >= 0 and dim >= 1")
    threads = default_threads() if threads is None else max(1, int(threads))
    stop = start + n_particles
    if threads == 1 or n_particles < 4096:
        return _normals_block(seed, stream, step, start, stop, dim)
    edges = np.linspace(start, stop, threads + 1).astype(int)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda ab: _normals_block(seed, stream, step, ab[0], ab[1], dim),
                         zip(edges[:-1], edges[1:]))
        return np.concatenate(list(parts), axis=0)


def brownian_increments(seed: int, stream: int, step: int, n_particles: int, dim: int,
                        dt: float, threads: int | None = None) -> np.ndarray:
    """Brownian increments over one step of length ``dt``, shape (n_particles, dim)."""
    return np.sqrt(dt) * standard_normals(seed, stream, step, n_particles, dim, threads=threads)


def resample_indices(seed: int, stream: int, n_source: int, n_target: int) -> np.ndarray:
    """Deterministic bootstrap indices, used to bridge unequal ensemble sizes."""
    counters = np.zeros((n_target, 4), dtype=np.uint64)
    counters[:, 0] = np.arange(n_target, dtype=np.uint64)
    counters[:, 3] = np.uint64(0xB007)
    bits = philox4x64(counters, _key(seed, stream))[:, 0]
    return (bits % np.uint64(n_source)).astype(np.int64)
