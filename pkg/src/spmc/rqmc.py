"""
Randomized quasi-Monte Carlo point sets and the random streams behind them.

Randomness in this package is counter-based: every uniform variate is a hash
of (seed, stream indices, counter).  A station's draws therefore do not
depend on how many other stations are processed, in which order, or in how
many batches, which is what makes batch results reproducible and lets the
gradient code reuse exactly the same draws (common random numbers).

Sobol base points come from ``scipy.stats.qmc``; the digital shift is applied
here on the 52-bit integer representation so that shifts can be drawn from
the counter-based streams.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri
from scipy.stats import qmc

BITS = 52
_SCALE = float(2**BITS)
MAX_DIM = 21201  # size of scipy's direction-number table
_TINY = np.nextafter(0.0, 1.0)

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(x):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed, *indices):
    """Fold a seed and any number of (broadcastable) integer indices into keys."""
    key = _mix(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF))
    for idx in indices:
        idx = np.asarray(idx).astype(np.uint64)
        key = _mix(key ^ _mix(idx))
    return key


def stream_bits(keys, count):
    """``count`` pseudo-random 64-bit words per key; shape keys.shape + (count,)."""
    keys = np.asarray(keys, dtype=np.uint64)
    ctr = _mix(np.arange(count, dtype=np.uint64) + np.uint64(1))
    return _mix(keys[..., None] ^ ctr)


def stream_uniforms(keys, shape):
    """Uniforms on (0, 1) with shape ``keys.shape + shape``."""
    shape = tuple(np.atleast_1d(shape).astype(int))
    bits = stream_bits(keys, int(np.prod(shape)))
    u = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return u.reshape(np.shape(keys) + shape)


def stream_rng(seed, *indices):
    """A numpy Generator seeded from a stream key, for non-hot-path sampling."""
    return np.random.default_rng(int(stream_key(seed, *indices)))


# ---------------------------------------------------------------------------
# Sobol point sets
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def _sobol_base_ints(m, d):
    pts = qmc.Sobol(d, scramble=False, bits=BITS).random_base2(m)
    ints = np.rint(pts * _SCALE).astype(np.uint64)
    ints.setflags(write=False)
    return ints


def _check_dims(m, d):
    if m < 0:
        raise ValueError("m must be non-negative")
    if not 1 <= d <= MAX_DIM:
        raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {d}")


def digital_shift(base_ints, shift_ints):
    """XOR-shift integer points (N, d) by shifts (..., d); returns (..., N, d) floats."""
    shifted = base_ints ^ shift_ints[..., None, :]
    return shifted.astype(np.float64) / _SCALE


@dataclass(frozen=True)
class PointSet:
    points: np.ndarray
    m: int
    shift_seed: int | None

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


def sobol_points(m: int, d: int, shift_seed=None, scramble: bool = False) -> PointSet:
    """
    First 2**m Sobol points in dimension d, randomized by a digital shift.

    ``shift_seed=None`` leaves the points unshifted.  With ``scramble`` an
    Owen-type scrambling (scipy's LMS + shift) replaces the digital shift.
    """
    _check_dims(m, d)
    if scramble:
        pts = qmc.Sobol(d, scramble=True, bits=BITS, seed=shift_seed).random_base2(m)
        return PointSet(pts, m, shift_seed)
    base = _sobol_base_ints(m, d)
    if shift_seed is None:
        return PointSet(base.astype(np.float64) / _SCALE, m, None)
    shift = stream_bits(stream_key(shift_seed), d) >> np.uint64(64 - BITS)
    return PointSet(digital_shift(base, shift), m, shift_seed)


def next_pow2_exponent(n):
    return max(0, int(np.ceil(np.log2(n))))


def uniform_draws(keys, n, d, use_rqmc=False, scramble=False):
    """
    Uniform points of shape keys.shape + (n, d), one independent set per key.

    With ``use_rqmc`` the set is a digitally shifted Sobol net and ``n`` must
    be a power of two.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    if not use_rqmc:
        return stream_uniforms(keys, (n, d))
    m = next_pow2_exponent(n)
    if 2**m != n:
        raise ValueError("RQMC needs a power-of-two number of points")
    _check_dims(m, d)
    if scramble:
        flat = [sobol_points(m, d, int(k), scramble=True).points for k in keys.ravel()]
        return np.asarray(flat).reshape(keys.shape + (n, d))
    shift = stream_bits(keys, d) >> np.uint64(64 - BITS)
    return digital_shift(_sobol_base_ints(m, d), shift)


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def to_uniform_box(points):
    """Map [0, 1) to [-pi, pi)."""
    pts = points.points if isinstance(points, PointSet) else np.asarray(points)
    return 2.0 * np.pi * pts - np.pi


def std_normal(points):
    pts = points.points if isinstance(points, PointSet) else np.asarray(points, dtype=float)
    return ndtri(np.maximum(pts, _TINY))


def to_gaussian(points, chol_lower):
    """Z = C V with V = Phi^{-1}(U) row-wise."""
    v = std_normal(points)
    return np.einsum("...j,ij->...i", v, np.asarray(chol_lower, dtype=float))
