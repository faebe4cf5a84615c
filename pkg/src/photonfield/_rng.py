"""Counter-based random streams usable inside numba kernels.

Every Monte Carlo kernel in the package draws from a stream keyed by
``(seed, a, b)`` (for example ``(seed, photon_index, 0)``), so results do
not depend on how work is split across threads or tiles.  The generator is
SplitMix64: a 64-bit Weyl sequence pushed through a strong finalizer.
"""

import numba as nb
import numpy as np

_U = np.uint64
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0

# stream tags, kept distinct so sub-streams never collide
STREAM_TRACE = 1
STREAM_SAMPLE = 2
STREAM_NEE = 3
STREAM_PATH = 4
STREAM_MISC = 5


@nb.njit(inline="always", cache=True)
def mix64(z):
    z = (z ^ (z >> _U(30))) * _M1
    z = (z ^ (z >> _U(27))) * _M2
    return z ^ (z >> _U(31))


@nb.njit(cache=True)
def make_state(seed, a, b):
    """Return a 1-element uint64 state array for stream ``(seed, a, b)``."""
    st = np.empty(1, dtype=np.uint64)
    z = mix64(_U(seed) + _GOLDEN)
    z = mix64(z ^ (_U(a) + _GOLDEN))
    z = mix64(z ^ (_U(b) * _M1 + _GOLDEN))
    st[0] = z
    return st


@nb.njit(inline="always", cache=True)
def next_u01(st):
    """Uniform double in [0, 1) with 53 bits of resolution."""
    st[0] = st[0] + _GOLDEN
    return (mix64(st[0]) >> _U(11)) * _INV53


def seed_from(rng):
    """Draw a 63-bit integer seed from a numpy Generator (or pass an int through)."""
    if isinstance(rng, (int, np.integer)):
        return int(rng) & 0x7FFFFFFFFFFFFFFF
    return int(rng.integers(0, 2**63 - 1))
