"""Counter-based random streams.

Every random number in a simulation is a pure function of a 64-bit key and
a counter: ``unit(key, ctr) = to_unit(mix64(key + (ctr + 1) * GAMMA))``.
This is SplitMix64 indexed by position rather than iterated, which means

* streams never need to be advanced in order (tree vertices draw their
  children from ``key(vertex)`` regardless of when the walk reaches them),
* replica streams are derived as ``stream_key(seed, replica)`` with no
  shared state, so results do not depend on scheduling,
* outputs are identical across platforms (plain uint64 arithmetic).
"""

from __future__ import annotations

import numpy as np
from numba import njit

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0

# Domain separators so tree, walk and bootstrap streams of one replica differ.
TREE = 1
WALK = 2
AUX = 3


@njit(cache=True, inline="always")
def mix64(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always")
def unit(key, ctr):
    """Uniform double in [0, 1) at position ``ctr`` of stream ``key``."""
    z = mix64(key + (np.uint64(ctr) + np.uint64(1)) * GAMMA)
    return float(z >> _S11) * _INV53


@njit(cache=True)
def fill_units(key, start, out):
    for i in range(out.shape[0]):
        out[i] = unit(key, start + i)


def _u64(x: int) -> np.uint64:
    return np.uint64(int(x) & 0xFFFFFFFFFFFFFFFF)


def stream_key(seed: int, *path: int) -> np.uint64:
    """Derive a stream key from a seed and a path of non-negative integers.

    ``stream_key(seed, replica, WALK)`` and ``stream_key(seed, replica, TREE)``
    are unrelated keys; the derivation is a fold of ``mix64``.
    """
    with np.errstate(over="ignore"):
        k = mix64(_u64(seed) ^ _u64(0x6A09E667F3BCC909))
        for p in path:
            k = mix64(k + (_u64(p) + np.uint64(1)) * GAMMA)
    return np.uint64(k)


class Stream:
    """A cursor over one counter-based stream.

    Only used on the Python side (small traces, tests); jitted kernels take
    the key and a counter directly.
    """

    def __init__(self, key, counter: int = 0):
        self.key = np.uint64(key)
        self.counter = int(counter)

    @classmethod
    def from_seed(cls, seed: int, *path: int) -> "Stream":
        return cls(stream_key(seed, *path))

    def uniform(self) -> float:
        u = unit(self.key, self.counter)
        self.counter += 1
        return u

    def uniforms(self, n: int) -> np.ndarray:
        out = np.empty(n)
        fill_units(self.key, self.counter, out)
        self.counter += n
        return out

    def numpy_generator(self) -> np.random.Generator:
        """A numpy Philox generator keyed from this stream (bulk vectorised draws)."""
        return np.random.Generator(np.random.Philox(key=int(self.key)))
