"""Portable counter-based random numbers for synthetic fixtures.

Draw ``i`` (0-based) of a stream is a pure function of ``(seed, stream, i)``,
so fixtures can be regenerated bit-for-bit in any language:

* key     = splitmix64(seed XOR (stream * 0xD1B54A32D192ED03))
* word_i  = splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)   (mod 2**64)
* uniform = (word_i >> 11) * 2**-53                            in [0, 1)

where ``splitmix64`` is the finalizer of Steele et al.'s SplitMix64::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Normal deviates take two consecutive uniforms ``u1, u2`` and return
``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`` (Box-Muller, cosine branch only).
"""

from __future__ import annotations

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
STREAM_MIX = np.uint64(0xD1B54A32D192ED03)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class CounterRNG:
    """Sequential view on one counter-based stream.

    Each call consumes the next block of counters, so the sequence of values
    depends only on the seed, the stream id and the order of calls.
    """

    def __init__(self, seed: int, stream: int = 0):
        mixed = np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        with np.errstate(over="ignore"):
            mixed ^= np.uint64(stream & 0xFFFFFFFFFFFFFFFF) * STREAM_MIX
        self.key = splitmix64(mixed)[0]
        self.counter = 0

    def words(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return splitmix64(self.key + i * GOLDEN)

    def uniform(self, n: int, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53
        return low + (high - low) * u

    def normal(self, n: int) -> np.ndarray:
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        """Integers in ``[low, high)`` by flooring scaled uniforms."""
        return low + np.floor(self.uniform(n) * (high - low)).astype(np.int64)
