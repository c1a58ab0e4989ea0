"""Compiled inner loops. Kept separate so the pure modules import fast."""

import numpy as np
from numba import njit
from numba.cpython.unsafe.numbers import trailing_zeros

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S63 = np.uint64(63)
_ONE = np.uint64(1)


@njit(inline="always")
def mix64(z):
    # splitmix64 finalizer
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(inline="always")
def _sign(z):
    return np.int64(1) - np.int64(2) * np.int64(z >> _S63)


@njit(nogil=True, cache=True)
def sketch_accumulate(words, bits, start, row_keys, mask, out):
    """Add the bit-level count-sketch of ``words`` into ``out`` (d x w, int64).

    The hash input for bit ``k`` of element ``i`` is ``(i * bits + k + 1) *
    GOLDEN`` offset by the row key. ``start`` is the global index of
    ``words[0]`` so disjoint slices of one tensor can be accumulated
    independently and summed.
    """
    d = row_keys.shape[0]
    p = np.uint64(bits)
    st = np.uint64(start)
    if d == 2:
        k0 = row_keys[0]
        k1 = row_keys[1]
        for idx in range(words.shape[0]):
            e = np.uint64(words[idx])
            if e == 0:
                continue
            base = (st + np.uint64(idx)) * p + _ONE
            while e != 0:
                k = np.uint64(trailing_zeros(e))
                e &= e - _ONE
                g = (base + k) * GOLDEN
                z = mix64(k0 + g)
                out[0, z & mask] += _sign(z)
                z = mix64(k1 + g)
                out[1, z & mask] += _sign(z)
        return
    for idx in range(words.shape[0]):
        e = np.uint64(words[idx])
        if e == 0:
            continue
        base = (st + np.uint64(idx)) * p + _ONE
        while e != 0:
            k = np.uint64(trailing_zeros(e))
            e &= e - _ONE
            g = (base + k) * GOLDEN
            for r in range(d):
                z = mix64(row_keys[r] + g)
                out[r, z & mask] += _sign(z)


@njit(nogil=True, cache=True)
def popcount_xor(a, b):
    """Number of differing bits between two equal-length uint8 arrays."""
    total = 0
    for i in range(a.shape[0]):
        x = np.int64(a[i] ^ b[i])
        while x:
            x &= x - 1
            total += 1
    return total
