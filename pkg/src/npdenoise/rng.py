"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, index, counter)`` so points
can be generated in any order, or in parallel, with identical results.
The mixer is the SplitMix64 finalizer.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z):
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed, stream=0):
    """64-bit key for one named stream under ``seed``."""
    s = np.uint64(int(seed) & _MASK)
    t = np.uint64(int(stream) & _MASK)
    with np.errstate(over="ignore"):
        k = _mix(s + _GOLDEN)
        return _mix(k ^ (t * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))


def uniforms(key, index, count):
    """``(len(index), count)`` uniforms in (0, 1] for per-index substreams."""
    index = np.asarray(index, dtype=np.uint64).reshape(-1, 1)
    ctr = np.arange(count, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        base = _mix(np.uint64(key) ^ (index * _GOLDEN))
        bits = _mix(base + (ctr + np.uint64(1)) * _GOLDEN)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)


def normals(key, index, dim):
    """Standard normal draws, ``dim`` per index, via Box-Muller."""
    pairs = (dim + 1) // 2
    u = uniforms(key, index, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[:, 0::2]))
    theta = 2.0 * np.pi * u[:, 1::2]
    z = np.empty((u.shape[0], 2 * pairs))
    z[:, 0::2] = r * np.cos(theta)
    z[:, 1::2] = r * np.sin(theta)
    return z[:, :dim]


def generator(seed, stream=0):
    """A numpy Generator on Philox keyed by ``(seed, stream)``.

    Used where draws are inherently sequential (surface sampling, weight init,
    shuffling)."""
    ss = np.random.SeedSequence([int(seed) & _MASK, int(stream) & _MASK])
    return np.random.Generator(np.random.Philox(ss))
