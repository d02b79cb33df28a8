"""Counter-based deterministic random numbers.

The generator is SplitMix64 driven by an explicit counter: draw ``i`` of a
stream seeded with ``s`` is ``mix64(s + (i+1)*GOLDEN)``.  Every derived
quantity (uniform floats, integer ranges, derived seeds) is produced from
64-bit integer mixing plus exactly-rounded float arithmetic, so identical
seeds give bit-identical sequences on any platform.  Streams indexed by a
counter can be generated out of order and in bulk with numpy.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1

ALGORITHM_ID = "splitmix64-counter-v1"


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a single 64-bit value."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= np.uint64(_MIX1)
    z ^= z >> np.uint64(27)
    z *= np.uint64(_MIX2)
    z ^= z >> np.uint64(31)
    return z


def derive_seed(seed: int, *path: int) -> int:
    """Fold a tuple of stream labels into a new 64-bit seed."""
    s = mix64(seed)
    for p in path:
        s = mix64((s + GOLDEN + (p & _MASK)) & _MASK)
    return s


class Rng:
    """A seeded stream of deterministic draws.

    ``seed`` and the current draw counter fully describe the state, which
    makes the state trivially checkpointable.
    """

    algorithm_id = ALGORITHM_ID

    def __init__(self, seed: int, counter: int = 0):
        self.seed = seed & _MASK
        self.counter = counter

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        base = np.uint64(self.seed) + idx * np.uint64(GOLDEN)
        return _mix64_array(base)

    def u64(self, n: int = 1) -> np.ndarray:
        return self._raw(n)

    def floats(self, shape) -> np.ndarray:
        """Uniform float64 in [0, 1), shaped; exact (x >> 11) * 2**-53."""
        if isinstance(shape, int):
            shape = (shape,)
        n = int(np.prod(shape)) if shape else 1
        bits = self._raw(n) >> np.uint64(11)
        out = bits.astype(np.float64) * (2.0 ** -53)
        return out.reshape(shape)

    def uniform(self, lo: float, hi: float, shape=()) -> np.ndarray:
        return lo + (hi - lo) * self.floats(shape)

    def randint(self, lo: int, hi: int) -> int:
        """One integer in [lo, hi) by rejection-free modulo (desk-scale ranges)."""
        span = hi - lo
        if span <= 0:
            raise ValueError(f"empty range [{lo}, {hi})")
        return lo + int(self._raw(1)[0] % np.uint64(span))

    def shuffle(self, n: int) -> np.ndarray:
        """A permutation of range(n) via Fisher-Yates."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = self.randint(0, i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice_without_replacement(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n); partial Fisher-Yates."""
        if k > n:
            raise ValueError(f"cannot draw {k} distinct from {n}")
        pool = list(range(n))
        out = []
        for i in range(k):
            j = self.randint(i, n)
            pool[i], pool[j] = pool[j], pool[i]
            out.append(pool[i])
        return out

    def spawn(self, *path: int) -> "Rng":
        """Independent child stream; does not consume draws from self."""
        return Rng(derive_seed(self.seed, *path))

    def state(self) -> tuple[int, int]:
        return (self.seed, self.counter)
