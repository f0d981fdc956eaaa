"""Counter-based random numbers (Philox4x32-10).

Every draw is a pure function of ``(seed, stream, path, draw)`` so a path's
randomness never depends on how paths are split across workers.
"""

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint32(0x9E3779B9)
_W1 = np.uint32(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)

STREAM_PATH = 0
STREAM_CLOCK = 1


@nb.njit(cache=True, nogil=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on a 4x32-bit counter with a 2x32-bit key."""
    c0 = np.uint32(c0)
    c1 = np.uint32(c1)
    c2 = np.uint32(c2)
    c3 = np.uint32(c3)
    k0 = np.uint32(k0)
    k1 = np.uint32(k1)
    for _ in range(10):
        p0 = np.uint64(c0) * _M0
        p1 = np.uint64(c2) * _M1
        hi0 = np.uint32(p0 >> np.uint64(32))
        lo0 = np.uint32(p0 & _MASK32)
        hi1 = np.uint32(p1 >> np.uint64(32))
        lo1 = np.uint32(p1 & _MASK32)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = np.uint32(k0 + _W0)
        k1 = np.uint32(k1 + _W1)
    return c0, c1, c2, c3


@nb.njit(cache=True, nogil=True)
def _to_unit(a, b):
    # 53-bit double in [0, 1)
    return ((np.uint64(a) >> np.uint64(5)) * 67108864.0 + (np.uint64(b) >> np.uint64(6))) * (
        1.0 / 9007199254740992.0
    )


@nb.njit(cache=True, nogil=True)
def uniform_pair(seed, stream, path, draw):
    """Two independent U[0,1) variates for one counter value."""
    seed = np.uint64(seed)
    path = np.uint64(path)
    draw = np.uint64(draw)
    r0, r1, r2, r3 = philox4x32(
        np.uint32(draw & _MASK32),
        np.uint32(draw >> np.uint64(32)),
        np.uint32(path & _MASK32),
        np.uint32((path >> np.uint64(32)) ^ (np.uint64(stream) << np.uint64(24))),
        np.uint32(seed & _MASK32),
        np.uint32(seed >> np.uint64(32)),
    )
    return _to_unit(r0, r1), _to_unit(r2, r3)


@nb.njit(cache=True, nogil=True)
def normal_pair(seed, stream, path, draw):
    u1, u2 = uniform_pair(seed, stream, path, draw)
    rad = np.sqrt(-2.0 * np.log1p(-u1))
    return rad * np.cos(2.0 * np.pi * u2), rad * np.sin(2.0 * np.pi * u2)


@nb.njit(cache=True, nogil=True)
def _exponentials(seed, stream, paths, out):
    for i in range(paths.shape[0]):
        u, _ = uniform_pair(seed, stream, paths[i], 0)
        out[i] = -np.log1p(-u)


def exponentials(seed, paths, stream=STREAM_CLOCK):
    """One Exp(1) variate per path index, drawn from ``stream``."""
    if np.ndim(paths) != 1:
        raise ValueError("paths must be a 1-D array of path indices")
    paths = np.ascontiguousarray(paths, dtype=np.uint64)
    out = np.empty(paths.shape[0])
    _exponentials(np.uint64(seed), np.uint64(stream), paths, out)
    return out


@nb.njit(cache=True, nogil=True)
def _uniforms(seed, stream, path, n, out):
    for j in range((n + 1) // 2):
        a, b = uniform_pair(seed, stream, path, j)
        out[2 * j] = a
        if 2 * j + 1 < n:
            out[2 * j + 1] = b


def uniforms(seed, path, n, stream=STREAM_PATH):
    """``n`` uniforms from the substream of a single path."""
    out = np.empty(n)
    _uniforms(np.uint64(seed), np.uint64(stream), np.uint64(path), n, out)
    return out
