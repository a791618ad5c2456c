"""Counter-based random streams.

Every random quantity in a simulation is a pure function of
``(seed, stream, purpose, label, counter)``: a site's k-th Poisson ring
depends only on the site's global label, never on how many other sites
the volume has or on which thread ran the trajectory.  This is what lets
truncation windows of different sizes share randomness on common sites.

The mixing function is the SplitMix64 finalizer; a stream with key ``k``
emits ``finalize(k + (c + 1) * GAMMA)`` at counter ``c``.
"""

from dataclasses import dataclass

import numba as nb
import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0

# purposes
RING = 1
INIT = 2
DISCRETE = 3
SURGERY = 4
LABEL_MASK = 0xFFFFFFFFFFFFFFFF


@nb.njit(cache=True, inline="always")
def finalize(z):
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@nb.njit(cache=True, inline="always")
def mix(a, b):
    """Absorb word ``b`` into hash state ``a``."""
    return finalize((np.uint64(a) ^ finalize(np.uint64(b) + GAMMA)) + GAMMA)


@nb.njit(cache=True)
def stream_key(seed, stream, purpose, label):
    h = finalize(np.uint64(seed) + GAMMA)
    h = mix(h, np.uint64(stream))
    h = mix(h, np.uint64(purpose))
    return mix(h, np.uint64(label))


@nb.njit(cache=True, inline="always")
def uniform(key, counter):
    """Uniform on the open interval (0, 1)."""
    z = finalize(np.uint64(key) + (np.uint64(counter) + _ONE) * GAMMA)
    return (np.float64(z >> _S11) + 0.5) * _INV53


@nb.njit(cache=True)
def child_stream(stream, index):
    return mix(np.uint64(stream) ^ np.uint64(0x5851F42D4C957F2D), np.uint64(index))


@nb.njit(cache=True)
def child_streams(stream, start, count):
    out = np.empty(count, dtype=np.uint64)
    for i in range(count):
        out[i] = child_stream(stream, np.uint64(start + i))
    return out


def as_word(value):
    """Map a Python int (possibly negative) to an unsigned 64-bit word."""
    return np.uint64(int(value) & LABEL_MASK)


@dataclass(frozen=True)
class Seed:
    """64-bit master seed plus a stream index.

    ``(seed, stream)`` determines a trajectory's randomness bit-exactly.
    """

    seed: int = 0
    stream: int = 0

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream < 2**64):
            raise ValueError("seed and stream must be unsigned 64-bit integers")

    def spawn(self, index):
        """Seed of the ``index``-th trajectory of a batch rooted here."""
        return Seed(self.seed, int(child_stream(as_word(self.stream), as_word(index))))

    def spawn_streams(self, count, start=0):
        return child_streams(as_word(self.stream), start, count)

    def generator(self):
        """A numpy Generator for non-kernel code paths (Philox, keyed by seed and stream)."""
        return np.random.Generator(np.random.Philox(key=self.seed + (self.stream << 64)))
