"""Deterministic, seed-addressable random numbers.

Counter-mode splitmix64: draw i of stream s is ``mix64(stream_key(s) + i)``.
Pure 64-bit integer mixing makes every draw reproducible bit-for-bit across
platforms and numpy versions, and lets batches be generated vectorized
without carrying sequential generator state through Python loops.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_CHILD = np.uint64(0xD6E8FEB86659FD93)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; x is uint64 (any shape), wraps mod 2**64
    with np.errstate(over="ignore"):
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


class Rng:
    """Stateful view over a counter-based splitmix64 stream."""

    def __init__(self, seed: int, stream: int = 0):
        # fold (seed, stream) into one stream key
        base = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        with np.errstate(over="ignore"):
            key = _mix64(np.asarray(base + _GOLDEN * np.uint64(stream & 0xFFFFFFFFFFFFFFFF)))
        self._key = np.uint64(key)
        self._ctr = 0
        self._seed = int(seed)
        self._stream = int(stream)

    def child(self, tag: int) -> "Rng":
        """Independent derived stream; same (seed, tag) always gives the same child."""
        with np.errstate(over="ignore"):
            k = _mix64(np.asarray(self._key ^ (_CHILD * np.uint64(tag & 0xFFFFFFFFFFFFFFFF))))
        r = Rng(0)
        r._key = np.uint64(k)
        return r

    def raw(self, n: int) -> np.ndarray:
        """n raw uint64 draws."""
        idx = np.arange(self._ctr, self._ctr + n, dtype=np.uint64)
        self._ctr += n
        with np.errstate(over="ignore"):
            return _mix64(self._key + idx * _GOLDEN)

    # -- floats ------------------------------------------------------------

    def uniforms(self, n: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return lo + u * (hi - lo)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return float(self.uniforms(1, lo, hi)[0])

    def normals(self, n: int, mu: float = 0.0, sigma: float = 1.0) -> np.ndarray:
        # Box-Muller on disjoint pairs; draws 2*ceil(n/2) uniforms
        m = (n + 1) // 2
        u1 = self.uniforms(m)
        u2 = self.uniforms(m)
        u1 = np.maximum(u1, 2.0 ** -53)  # keep log finite
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return mu + sigma * out

    def normal(self, mu: float = 0.0, sigma: float = 1.0) -> float:
        return float(self.normals(1, mu, sigma)[0])

    # -- integers ----------------------------------------------------------

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive (modulo reduction)."""
        if hi < lo:
            raise ValueError(f"randint: empty range [{lo}, {hi}]")
        span = np.uint64(hi - lo + 1)
        return lo + int(self.raw(1)[0] % span)

    def poisson(self, lam: float) -> int:
        """Knuth's method; fine for the small rates used here."""
        if lam <= 0.0:
            return 0
        limit = np.exp(-lam)
        k, p = 0, 1.0
        while True:
            p *= self.uniform()
            if p <= limit:
                return k
            k += 1

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(0, i)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order
