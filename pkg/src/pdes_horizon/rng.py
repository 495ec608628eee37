"""Counter-based random streams.

Every random number in a trial is a pure function of ``(seed, pe, step, tag)``
through the Philox-4x32-10 block cipher, so a trajectory does not depend on
the order in which PEs are swept or on how trials are scheduled.
"""

import numba
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
LO32 = np.uint64(0xFFFFFFFF)
S32 = np.uint64(32)
_S12 = np.uint64(12)
_TWO52_INV = 1.0 / 4503599627370496.0

TAG_STEP = 0
TAG_INIT = 1


@numba.njit(inline="always", cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox-4x32 block.

    Words are carried in ``np.uint64`` holding 32-bit values; 32-bit
    conversions inside the rounds cost numba about 4x in throughput.
    """
    c0 = np.uint64(c0)
    c1 = np.uint64(c1)
    c2 = np.uint64(c2)
    c3 = np.uint64(c3)
    k0 = np.uint64(k0)
    k1 = np.uint64(k1)
    for _ in range(10):
        p0 = c0 * _M0
        p1 = c2 * _M1
        c0 = (p1 >> S32) ^ c1 ^ k0
        c1 = p1 & LO32
        c2 = (p0 >> S32) ^ c3 ^ k1
        c3 = p0 & LO32
        k0 = (k0 + _W0) & LO32
        k1 = (k1 + _W1) & LO32
    return c0, c1, c2, c3


@numba.njit(inline="always", cache=True)
def open_unit(hi, lo):
    """Uniform on the open interval (0, 1) from two 32-bit words.

    Uses the top 52 bits, centred in their cell: 53 bits would put the top
    value at 1 - 2**-54, which rounds to exactly 1.0.
    """
    bits = ((np.uint64(hi) << S32) | np.uint64(lo)) >> _S12
    return (float(bits) + 0.5) * _TWO52_INV


@numba.njit(inline="always", cache=True)
def block(k0, k1, pe, step, tag):
    """Raw Philox block for one (PE, step, tag) counter."""
    step = np.uint64(step)
    return philox4x32(np.uint64(pe), step & LO32, step >> S32, np.uint64(tag), k0, k1)


@numba.njit(cache=True)
def fill_uniforms(k0, k1, step, tag, site_u, inc_u):
    """Both uniforms of every PE at one step, PE index = array index."""
    s = np.uint64(step)
    lo = s & LO32
    hi = s >> S32
    t = np.uint64(tag)
    for k in range(site_u.shape[0]):
        c0, c1, c2, c3 = philox4x32(np.uint64(k), lo, hi, t, k0, k1)
        site_u[k] = open_unit(c0, c1)
        inc_u[k] = open_unit(c2, c3)


def split_seed(seed):
    """Split a 64-bit seed into the two 32-bit Philox key words."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32)


def derive_seed(master_seed, *path):
    """Deterministic 64-bit child seed for e.g. ``(master, cell, trial)``."""
    ss = np.random.SeedSequence([int(master_seed), *(int(p) for p in path)])
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(lo) | (int(hi) << 32)


def uniforms(seed, pe, step, tag=TAG_STEP):
    """The two open-interval uniforms ``(site_u, increment_u)`` that PE ``pe``
    consumes at step ``step``. Used by tests and replay tools."""
    k0, k1 = split_seed(seed)
    c0, c1, c2, c3 = block(k0, k1, pe, step, tag)
    return open_unit(c0, c1), open_unit(c2, c3)
