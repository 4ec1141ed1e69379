"""Deterministic random numbers from SplitMix64.

The i-th output of a generator seeded with s is finalize(s + (i+1)*GOLDEN),
which lets whole blocks of the sequence be produced vectorized without
carrying mutable state.  Sub-streams (per parameter, per sample, per step)
are derived by folding integer keys through the same finalizer, so every
draw in the system is a pure function of (root seed, purpose keys, index).
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_U53 = np.float64(2.0 ** -53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Outputs offset..offset+n-1 of the SplitMix64 sequence for `seed`."""
    with np.errstate(over="ignore"):
        idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
        return _mix(np.uint64(seed) + idx * GOLDEN)


def derive_seed(seed: int, *keys: int) -> int:
    """Collapse (seed, keys...) into a fresh 64-bit sub-stream seed."""
    with np.errstate(over="ignore"):
        s = np.uint64(seed)
        for k in keys:
            s = _mix(s + (np.uint64(k) + np.uint64(1)) * GOLDEN)
        return int(s)


def _to_unit(bits: np.ndarray) -> np.ndarray:
    # top 53 bits -> f64 in [0, 1)
    return (bits >> np.uint64(11)).astype(np.float64) * _U53


class Stream:
    """Counter-based view of one SplitMix64 sequence."""

    def __init__(self, seed: int):
        self.seed = int(np.uint64(seed))
        self._pos = 0

    def _draw(self, n: int) -> np.ndarray:
        bits = splitmix64(self.seed, n, self._pos)
        self._pos += n
        return bits

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        u = _to_unit(self._draw(n))
        return (lo + (hi - lo) * u).reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller transform on consecutive uniform pairs."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = _to_unit(self._draw(m))
        u2 = _to_unit(self._draw(m))
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1-u1 in (0,1] keeps the log finite
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, n: int, bound: int) -> np.ndarray:
        """n indices in [0, bound)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        u = _to_unit(self._draw(n))
        return np.minimum((u * bound).astype(np.int64), bound - 1)
