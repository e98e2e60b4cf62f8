"""Seedable random source with a documented, portable algorithm.

Uniform doubles come from numpy's PCG64 bit generator (``random_raw`` 64-bit
outputs mapped to ``[0, 1)`` by the top 53 bits). Gaussian variates use the
basic Box-Muller transform, consuming two uniforms per pair of normals. Both
steps are simple enough to reproduce in another language bit for bit.
"""
import numpy as np

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


class Rng:
    """PCG64 stream with Box-Muller normals.

    Parameters
    ----------
    seed : int
        Any non-negative integer; passed to ``numpy.random.PCG64``.
    """

    def __init__(self, seed=0):
        self.seed = int(seed)
        self._bitgen = np.random.PCG64(self.seed)

    def uniform(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        raw = self._bitgen.random_raw(n).astype(np.uint64)
        u = (raw >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size=None):
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = self.uniform(pairs)
        u2 = self.uniform(pairs)
        # 1 - u1 lies in (0, 1], so the log is finite
        r = np.sqrt(-2.0 * np.log1p(-u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(_TWO_PI * u2)
        z[1::2] = r * np.sin(_TWO_PI * u2)
        z = z[:n]
        return float(z[0]) if size is None else z.reshape(size)

    def integers(self, high, size=None):
        """Uniform integers in ``[0, high)``."""
        u = self.uniform(size)
        return np.minimum((np.asarray(u) * high).astype(np.int64), high - 1) if size is not None \
            else min(int(u * high), high - 1)

    def rademacher(self, size):
        return np.where(self.uniform(size) < 0.5, -1.0, 1.0)

    def spawn(self, key):
        """Independent child stream derived from this stream's seed and ``key``."""
        seq = np.random.SeedSequence([self.seed, int(key)])
        return Rng(int(seq.generate_state(2, np.uint64)[0] >> np.uint64(1)))

    def get_state(self):
        st = self._bitgen.state["state"]
        return {"seed": self.seed, "state": int(st["state"]), "inc": int(st["inc"])}

    def set_state(self, state):
        self.seed = int(state["seed"])
        self._bitgen.state = {
            "bit_generator": "PCG64",
            "state": {"state": int(state["state"]), "inc": int(state["inc"])},
            "has_uint32": 0,
            "uinteger": 0,
        }


def as_rng(rng_or_seed):
    if isinstance(rng_or_seed, Rng):
        return rng_or_seed
    return Rng(0 if rng_or_seed is None else rng_or_seed)
