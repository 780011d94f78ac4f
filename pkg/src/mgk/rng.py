"""SplitMix64 stream, specified bit-exactly so token datasets reproduce anywhere."""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """Sequential SplitMix64 generator over unsigned 64-bit state.

    >>> SplitMix64(0).next_u64()
    16294208416658607535
    """

    def __init__(self, seed):
        if not 0 <= int(seed) <= _MASK:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {seed}")
        self.state = int(seed)

    def next_u64(self):
        self.state = (self.state + _GOLDEN) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def below(self, n):
        """Uniform-ish integer in ``[0, n)`` by plain modular reduction."""
        return self.next_u64() % n

    def numpy_generator(self):
        """A numpy Generator seeded from the next 64-bit output."""
        return np.random.default_rng(self.next_u64())
