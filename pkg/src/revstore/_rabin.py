"""Rabin fingerprint tables and the compiled boundary scanner.

Polynomial arithmetic is over GF(2).  The modulus is the degree-63
irreducible polynomial 0xbfe6b8a5bf378d83, so every reduced value fits in
63 bits and a left shift by one byte never overflows a uint64.
"""

import numba
import numpy as np

POLY = 0xBFE6B8A5BF378D83
DEGREE = 63
_SHIFT = DEGREE - 8
_LOW_MASK = (1 << _SHIFT) - 1


def polymod(value: int, poly: int = POLY) -> int:
    """Reduce the GF(2) polynomial encoded in ``value`` modulo ``poly``."""
    deg = poly.bit_length() - 1
    while value.bit_length() - 1 >= deg:
        value ^= poly << (value.bit_length() - 1 - deg)
    return value


def append_table() -> np.ndarray:
    # (t * x^63) mod P for the byte t shifted out of the top of the state
    return np.array([polymod(t << DEGREE) for t in range(256)], dtype=np.uint64)


def pop_table(window_size: int) -> np.ndarray:
    # b * x^(8*(W-1)) mod P: contribution of the byte leaving the window
    return np.array(
        [polymod(b << (8 * (window_size - 1))) for b in range(256)], dtype=np.uint64
    )


@numba.njit(cache=True)
def roll(state, in_byte, out_byte, append_t, pop_t):
    state ^= pop_t[out_byte]
    top = state >> np.uint64(_SHIFT)
    return ((state & np.uint64(_LOW_MASK)) << np.uint64(8) | np.uint64(in_byte)) ^ append_t[top]


@numba.njit(cache=True)
def rolling_hashes(data, window_size, append_t, pop_t):
    """Hash of the window ending at every offset (leading window zero-padded)."""
    out = np.empty(data.shape[0], dtype=np.uint64)
    h = np.uint64(0)
    for i in range(data.shape[0]):
        out_byte = data[i - window_size] if i >= window_size else 0
        h = roll(h, data[i], out_byte, append_t, pop_t)
        out[i] = h
    return out


@numba.njit(cache=True)
def scan(data, start, state, window_size, append_t, pop_t,
         min_c, max_c, cmask, min_s, max_s, smask, cuts, seg_flags):
    """Scan ``data[start:]`` for boundaries.

    ``data[:start]`` is history already hashed (at least the previous
    window).  ``state`` holds [hash, last chunk cut, last segment cut,
    absolute offset of data[0]] and is updated in place.  Cut offsets are
    absolute.  Returns the number of cuts written.
    """
    h = np.uint64(state[0])
    last_c = state[1]
    last_s = state[2]
    base = state[3]
    n = 0
    for i in range(start, data.shape[0]):
        out_byte = data[i - window_size] if i - window_size >= 0 else 0
        h = roll(h, data[i], out_byte, append_t, pop_t)
        pos = base + i + 1
        clen = pos - last_c
        if clen >= min_c and (h & cmask) == cmask:
            seg = pos - last_s >= min_s and (h & smask) == smask
        elif clen >= max_c:
            seg = False
        else:
            continue
        # the next chunk could overrun the segment limit
        if not seg and pos - last_s > max_s - max_c:
            seg = True
        cuts[n] = pos
        seg_flags[n] = seg
        n += 1
        last_c = pos
        if seg:
            last_s = pos
    state[0] = np.int64(h)
    state[1] = last_c
    state[2] = last_s
    return n
