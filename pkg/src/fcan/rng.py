"""Seeded pseudo-random generator with a fixed, documented algorithm.

The stream is produced by a bank of ``LANES`` independent xorshift64*
generators advanced in lock step.  Lane ``i`` is seeded with
``splitmix64(seed + i)`` (a zero result is replaced by the golden-ratio
constant, since xorshift state must be non-zero).  One step of the bank
yields ``LANES`` outputs, lane 0 first; the public stream is the
concatenation of those steps.  Each lane update is::

    x ^= x >> 12
    x ^= x << 25
    x ^= x >> 27
    out = x * 0x2545F4914F6CDD1D   (mod 2**64)

Floats in [0, 1) are ``(out >> 11) * 2**-53``.  Normals use Box-Muller on
consecutive uniform pairs (u1, u2) -> sqrt(-2 ln(1 - u1)) * cos(2 pi u2).
Any other implementation following these rules reproduces the stream
bit for bit.
"""

import numpy as np

LANES = 64
_MULT = np.uint64(0x2545F4914F6CDD1D)
_GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_S12, _S25, _S27 = np.uint64(12), np.uint64(25), np.uint64(27)
_BLOCK = 16             # rounds generated per refill; does not change the stream


def splitmix64(x):
    x = (x + _GOLDEN) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class Rng:
    """xorshift64* lane bank.  See module docstring for the exact stream."""

    def __init__(self, seed):
        seed = int(seed) & _MASK
        states = []
        for i in range(LANES):
            s = splitmix64((seed + i) & _MASK)
            states.append(s if s else _GOLDEN)
        self._state = np.array(states, dtype=np.uint64)
        self._buf = np.empty(0, dtype=np.uint64)

    def _refill(self, rounds):
        """Advance every lane ``rounds`` times; outputs in round-major order."""
        x = self._state
        t = np.empty_like(x)
        out = np.empty((rounds, LANES), dtype=np.uint64)
        for r in range(rounds):
            np.right_shift(x, _S12, out=t)
            x ^= t
            np.left_shift(x, _S25, out=t)
            x ^= t
            np.right_shift(x, _S27, out=t)
            x ^= t
            np.multiply(x, _MULT, out=out[r])
        return out.reshape(-1)

    def next_u64(self, n):
        """Return the next ``n`` raw 64-bit outputs."""
        n = int(n)
        have = len(self._buf)
        if have < n:
            rounds = max(-(-(n - have) // LANES), _BLOCK)
            self._buf = np.concatenate([self._buf, self._refill(rounds)])
        out = self._buf[:n]
        self._buf = self._buf[n:]
        return out

    def random(self, size=None):
        """Uniform floats in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def normal(self, size, scale=1.0):
        n = int(np.prod(size))
        m = n + (n & 1)
        u = self.random(m)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return (scale * z[:n]).reshape(size)

    def integers(self, low, high, size=None):
        """Integers in [low, high) via floor(u * span); span must be small."""
        u = self.random(1 if size is None else size)
        out = low + np.floor(np.asarray(u) * (high - low)).astype(np.int64)
        if size is None:
            return int(np.ravel(out)[0])
        return out

    def categorical(self, probs, size):
        """Draw ``size`` indices from a probability vector by inverse CDF."""
        cdf = np.cumsum(np.asarray(probs, dtype=np.float64))
        u = self.random(size) * cdf[-1]
        idx = np.searchsorted(cdf, u, side="right")
        return np.minimum(idx, len(cdf) - 1)

    def permutation(self, n):
        """Fisher-Yates shuffle of range(n) driven by the stream."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(u[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self, tag):
        """Derive an independent generator from this stream and an integer tag."""
        base = int(self.next_u64(1)[0])
        return Rng(splitmix64(base ^ (int(tag) & _MASK)))
