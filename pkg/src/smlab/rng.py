"""Deterministic counter-based random number generator.

The whole pipeline (parameter init, chunk sampling, masking, batch
shuffling) draws from this generator instead of the ambient system RNG so
that a seed fully determines a run, bit for bit, on every platform.

The generator is SplitMix64 used in counter mode: draw ``i`` of the stream
seeded with ``s`` is ``mix64(s + (i + 1) * GOLDEN)`` where ``mix64`` is the
SplitMix64 finalizer and GOLDEN is the 64-bit golden-ratio constant.  Being
a pure function of (seed, counter), the stream is identical whether values
are drawn one at a time or in vectorized blocks.
"""

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_SPAWN = 0x632BE59BD9B4E019
# 2**-53, top 53 bits of a draw -> uniform double in [0, 1)
_U53 = 1.0 / (1 << 53)


def _mix64(z):
    """SplitMix64 finalizer on a uint64 ndarray (wraps modulo 2**64)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))


def _mix_int(z):
    """SplitMix64 finalizer on a Python int."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return z ^ (z >> 31)


def fnv1a64(text):
    """FNV-1a hash of an ASCII label, for naming derived streams."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


class Rng:
    """Counter-based SplitMix64 stream with vectorized draws."""

    def __init__(self, seed):
        self.seed = int(seed) & _MASK64
        self._counter = 0

    def __repr__(self):
        return f"Rng(seed={self.seed}, counter={self._counter})"

    def raw(self, n):
        """Next ``n`` raw 64-bit draws as a uint64 array."""
        if n < 0:
            raise ValueError(f"draw count must be non-negative, got {n}")
        start = self._counter + 1
        idx = np.arange(start, start + n, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed) + idx * np.uint64(_GOLDEN)
        self._counter += n
        return _mix64(z)

    def uniforms(self, n):
        """``n`` uniform doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _U53

    def uniform(self):
        return float(self.uniforms(1)[0])

    def normals(self, n):
        """``n`` standard normals via Box-Muller (two draws per value)."""
        u = self.raw(2 * n)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1)
        u1 = ((u[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * _U53
        u2 = (u[1::2] >> np.uint64(11)).astype(np.float64) * _U53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def normal(self):
        return float(self.normals(1)[0])

    def randrange(self, n):
        """Uniform integer in [0, n)."""
        if n <= 0:
            raise ValueError(f"randrange bound must be positive, got {n}")
        return int(self.uniform() * n)

    def integers(self, n, size):
        """``size`` uniform integers in [0, n)."""
        if n <= 0:
            raise ValueError(f"integers bound must be positive, got {n}")
        return (self.uniforms(size) * n).astype(np.int64)

    def permutation(self, n):
        """Deterministic permutation of range(n) (argsort of uniforms)."""
        return np.argsort(self.uniforms(n), kind="stable")

    def choice(self, seq):
        return seq[self.randrange(len(seq))]

    def spawn(self, key):
        """Independent child stream; ``key`` is an int or a short label.

        Child seed = mix64(seed XOR mix64(key * GOLDEN + SPAWN)); distinct
        keys give streams unrelated to each other and to the parent.
        Spawning does not consume parent draws.
        """
        if isinstance(key, str):
            key = fnv1a64(key)
        k = _mix_int((int(key) * _GOLDEN + _SPAWN) & _MASK64)
        return Rng(_mix_int(self.seed ^ k))
