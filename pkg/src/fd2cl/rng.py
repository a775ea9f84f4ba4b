"""Counter-based random streams.

Every stream is Philox4x64-10 keyed by ``(seed, purpose)`` with the high
counter word set to a per-item index, so item ``i`` of any generator can be
drawn independently of all others. Floats come from the top 53 bits of each
raw word and normals from Box-Muller, which keeps the output independent of
numpy's distribution code.
"""
import numpy as np

RNG_ID = "philox4x64-10;u53;box-muller"
_MASK64 = (1 << 64) - 1

# stream purposes
REAL = 1
FAKE = 2
PERTURB = 3
MODEL_INIT = 4
TRAIN = 5
ANCHORS = 6
SPLIT = 7


class Stream:
    def __init__(self, seed, purpose, index=0):
        key = np.array([int(seed) & _MASK64, int(purpose) & _MASK64], dtype=np.uint64)
        counter = np.array([0, 0, int(index) & _MASK64, 0], dtype=np.uint64)
        self._bits = np.random.Philox(key=key, counter=counter)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        raw = self._bits.random_raw(n)
        u = (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return u[0] if size is None else u.reshape(size)

    def range(self, low, high, size=None):
        return low + (high - low) * self.uniform(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self.uniform(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        return z[0] if size is None else z.reshape(size)

    def integers(self, high, size=None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        return np.minimum((u * high).astype(np.int64), high - 1)

    def permutation(self, n):
        return np.argsort(self.uniform(n), kind="stable")

    def bernoulli(self, p, size):
        return (self.uniform(size) < p).astype(np.float64)
