"""Counter-based Gaussian streams built on Philox4x32-10.

Every draw is a pure function of a 64-bit key and a 128-bit counter, so any
worker can reproduce any variate without coordination. Counters are laid out
as ``(index_lo, index_hi, lane, tag)`` where ``index`` is a signed 64-bit
integer (dyadic index, time step, ...), ``lane`` carries a secondary integer
(refinement level, replica id) and ``tag`` separates independent uses of the
same key.
"""

import math

import numpy as np

from ._accel import njit, pick

MASK32 = 0xFFFFFFFF
PHILOX_M0 = 0xD2511F53
PHILOX_M1 = 0xCD9E8D57
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
TWO_PI = 2.0 * math.pi
INV_2_53 = 1.0 / 9007199254740992.0

# stream tags
TAG_ENV_POSITIVE = 0x454E5650
TAG_ENV_NEGATIVE = 0x454E564E
TAG_ENV_BRIDGE = 0x454E5642
TAG_NOISE = 0x4E4F4953
TAG_INITIAL = 0x494E4954


def seed_key(seed):
    """Split a non-negative integer seed into the two 32-bit key words."""
    seed = int(seed)
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return seed & MASK32, (seed >> 32) & MASK32


def philox4x32_numpy(c0, c1, c2, c3, k0, k1):
    """Vectorised Philox4x32-10 block function on uint32-valued arrays."""
    c0 = np.asarray(c0, dtype=np.uint64)
    c1 = np.asarray(c1, dtype=np.uint64)
    c2 = np.asarray(c2, dtype=np.uint64)
    c3 = np.asarray(c3, dtype=np.uint64)
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    m0 = np.uint64(PHILOX_M0)
    m1 = np.uint64(PHILOX_M1)
    mask = np.uint64(MASK32)
    shift = np.uint64(32)
    for _ in range(10):
        p0 = m0 * c0
        p1 = m1 * c2
        hi0, lo0 = p0 >> shift, p0 & mask
        hi1, lo1 = p1 >> shift, p1 & mask
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
        k0 = (k0 + np.uint64(PHILOX_W0)) & mask
        k1 = (k1 + np.uint64(PHILOX_W1)) & mask
    return c0, c1, c2, c3


@njit
def philox4x32_scalar(c0, c1, c2, c3, k0, k1):
    """Scalar Philox4x32-10 on uint64 carriers holding 32-bit words."""
    mask = np.uint64(MASK32)
    for _ in range(10):
        p0 = np.uint64(PHILOX_M0) * c0
        p1 = np.uint64(PHILOX_M1) * c2
        n0 = (p1 >> np.uint64(32)) ^ c1 ^ k0
        n1 = p1 & mask
        n2 = (p0 >> np.uint64(32)) ^ c3 ^ k1
        n3 = p0 & mask
        c0, c1, c2, c3 = n0, n1, n2, n3
        k0 = (k0 + np.uint64(PHILOX_W0)) & mask
        k1 = (k1 + np.uint64(PHILOX_W1)) & mask
    return c0, c1, c2, c3


def _box_muller(w0, w1, w2, w3):
    a = (w0 >> np.uint64(5)).astype(np.float64) * 67108864.0
    b = (w1 >> np.uint64(6)).astype(np.float64)
    u1 = (a + b + 0.5) * INV_2_53
    a = (w2 >> np.uint64(5)).astype(np.float64) * 67108864.0
    b = (w3 >> np.uint64(6)).astype(np.float64)
    u2 = (a + b + 0.5) * INV_2_53
    radius = np.sqrt(-2.0 * np.log(u1))
    return radius * np.cos(TWO_PI * u2), radius * np.sin(TWO_PI * u2)


def _split_index(index):
    index = np.asarray(index, dtype=np.int64).view(np.uint64)
    return index & np.uint64(MASK32), index >> np.uint64(32)


def normal_pair_numpy(key, index, lane, tag):
    """Two independent standard normals per ``(index, lane)`` counter."""
    lo, hi = _split_index(index)
    lane = np.asarray(lane, dtype=np.int64).astype(np.uint64) & np.uint64(MASK32)
    lane = np.broadcast_to(lane, lo.shape)
    tag_words = np.full(lo.shape, tag & MASK32, dtype=np.uint64)
    words = philox4x32_numpy(lo, hi, lane, tag_words, key[0], key[1])
    return _box_muller(*words)


@njit
def normal_pair_scalar(k0, k1, index, lane, tag):
    """Scalar counterpart of :func:`normal_pair_numpy`."""
    u = np.uint64(index)  # two's complement reinterpretation of int64
    lo = u & np.uint64(MASK32)
    hi = u >> np.uint64(32)
    w0, w1, w2, w3 = philox4x32_scalar(
        lo, hi, np.uint64(lane) & np.uint64(MASK32), np.uint64(tag), np.uint64(k0), np.uint64(k1)
    )
    u1 = (float(w0 >> np.uint64(5)) * 67108864.0 + float(w1 >> np.uint64(6)) + 0.5) * INV_2_53
    u2 = (float(w2 >> np.uint64(5)) * 67108864.0 + float(w3 >> np.uint64(6)) + 0.5) * INV_2_53
    radius = math.sqrt(-2.0 * math.log(u1))
    return radius * math.cos(TWO_PI * u2), radius * math.sin(TWO_PI * u2)


@njit
def _normals_loop(k0, k1, index, lane, tag, out):
    for i in range(index.shape[0]):
        out[i] = normal_pair_scalar(k0, k1, index[i], lane[i], tag)[0]


def _normals_compiled(key, index, lane, tag):
    index = np.ascontiguousarray(index, dtype=np.int64).ravel()
    lane = np.ascontiguousarray(np.broadcast_to(lane, index.shape), dtype=np.int64)
    out = np.empty(index.shape[0])
    _normals_loop(key[0], key[1], index, lane, tag, out)
    return out


def _normals_numpy(key, index, lane, tag):
    index = np.asarray(index, dtype=np.int64).ravel()
    return normal_pair_numpy(key, index, lane, tag)[0]


_normals_impl = pick(_normals_compiled, _normals_numpy)


def keyed_normals(seed, index, lane=0, tag=TAG_NOISE):
    """Standard normals indexed by ``index``, reproducible from ``seed`` alone.

    Uses the first output of each Box-Muller pair so that draws for distinct
    indices never share a counter block.
    """
    index = np.asarray(index, dtype=np.int64)
    shape = index.shape
    out = _normals_impl(seed_key(seed), index.ravel(), lane, tag & MASK32)
    return out.reshape(shape)


def derive_seed(master, *path):
    """Child seed for a named sub-stream of ``master`` (e.g. per replica)."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(p) for p in path))
    words = seq.generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)
