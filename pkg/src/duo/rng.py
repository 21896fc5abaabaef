"""Portable splitmix64 random stream.

All initialization, shuffling and dropout draws go through this generator so
that runs are bit-reproducible independent of numpy's own RNG.
"""
import math

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
MIX1 = 0xBF58476D1CE4E5B9
MIX2 = 0x94D049BB133111EB


def _mix(z):
    z = ((z ^ (z >> 30)) * MIX1) & MASK64
    z = ((z ^ (z >> 27)) * MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int = 0):
        self.state = int(seed) & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def u64_array(self, n: int) -> np.ndarray:
        """Next ``n`` outputs, identical to ``n`` calls of :meth:`next_u64`."""
        if n <= 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            steps = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(GAMMA)
            z = steps + np.uint64(self.state)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GAMMA) & MASK64
        return z

    def uniform(self, shape=()) -> np.ndarray:
        """Floats in [0, 1) built from the top 53 bits of each output."""
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        bits = self.u64_array(n) >> np.uint64(11)
        out = bits.astype(np.float64) * (1.0 / 9007199254740992.0)
        return out.reshape(shape)

    def normal(self, shape=(), sigma: float = 1.0) -> np.ndarray:
        """Box-Muller normals; consumes two uniforms per value."""
        n = math.prod(shape) if isinstance(shape, tuple) else int(shape)
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[:n], u[n:]  # u1 in (0, 1]
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
        return (sigma * z).reshape(shape)

    def randbelow(self, n: int) -> int:
        return self.next_u64() % n

    def permutation(self, n: int) -> list:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "SplitMix64":
        return SplitMix64(self.next_u64())


def xavier_uniform(rng: SplitMix64, shape, dtype=np.float64) -> np.ndarray:
    """Glorot uniform init. Vectors are treated as ``[d, 1]`` matrices."""
    if len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in, fan_out = shape[-2], shape[-1]
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ((rng.uniform(tuple(shape)) * 2.0 - 1.0) * bound).astype(dtype)
