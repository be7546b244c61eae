"""Hot loops for mask selection and index bit-packing.

Each kernel has a numba ``@njit`` version and a pure-numpy version that must
agree exactly. The numba path is used when numba imports cleanly and the
environment variable ``NMSPARSE_PURE_NUMPY`` is unset (or ``0``).
"""

from __future__ import annotations

import os

import numpy as np

_FLAG = os.environ.get("NMSPARSE_PURE_NUMPY", "0").strip().lower()
_want_numba = _FLAG in ("", "0", "false", "no")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _want_numba


# -- group top-n ---------------------------------------------------------------


def topn_groups_numpy(groups: np.ndarray, n: int) -> np.ndarray:
    """Boolean keep-mask of the ``n`` largest ``|x|`` per row; ties go to the lower column."""
    order = np.argsort(-np.abs(groups), axis=1, kind="stable")
    keep = np.zeros(groups.shape, dtype=np.bool_)
    np.put_along_axis(keep, order[:, :n], True, axis=1)
    return keep


def _topn_groups_loop(groups, n):
    G, M = groups.shape
    if 2 * n <= M:
        keep = np.zeros((G, M), dtype=np.bool_)
        for g in range(G):
            for _ in range(n):
                best = -1
                best_val = -1.0
                for j in range(M):
                    if keep[g, j]:
                        continue
                    v = abs(groups[g, j])
                    if v > best_val:  # strict: the first of equal values wins
                        best_val = v
                        best = j
                keep[g, best] = True
        return keep
    # mostly-kept groups: drop the M - n smallest instead, the last of equal values first
    keep = np.ones((G, M), dtype=np.bool_)
    for g in range(G):
        for _ in range(M - n):
            worst = -1
            worst_val = np.inf
            for j in range(M):
                if not keep[g, j]:
                    continue
                v = abs(groups[g, j])
                if v <= worst_val:
                    worst_val = v
                    worst = j
            keep[g, worst] = False
    return keep


# -- index bit packing -----------------------------------------------------------


def pack_bits_numpy(values: np.ndarray, width: int) -> np.ndarray:
    """Pack unsigned ints into a little-endian bitstream, ``width`` bits each."""
    values = np.asarray(values, dtype=np.uint64)
    if width == 0 or values.size == 0:
        return np.zeros(0, dtype=np.uint8)
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((values[:, None] >> shifts[None, :]) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little")


def unpack_bits_numpy(stream: np.ndarray, width: int, count: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.asarray(stream, dtype=np.uint8), bitorder="little")[: count * width]
    bits = bits.reshape(count, width).astype(np.int64)
    return (bits << np.arange(width, dtype=np.int64)[None, :]).sum(axis=1)


def _pack_bits_loop(values, width):
    count = values.shape[0]
    nbytes = (count * width + 7) // 8
    out = np.zeros(nbytes, dtype=np.uint8)
    pos = 0
    for i in range(count):
        v = values[i]
        for b in range(width):
            if (v >> b) & 1:
                out[pos >> 3] |= np.uint8(1 << (pos & 7))
            pos += 1
    return out


def _unpack_bits_loop(stream, width, count):
    out = np.zeros(count, dtype=np.int64)
    pos = 0
    for i in range(count):
        v = 0
        for b in range(width):
            if (stream[pos >> 3] >> (pos & 7)) & 1:
                v |= 1 << b
            pos += 1
        out[i] = v
    return out


if HAVE_NUMBA:
    topn_groups_numba = njit(cache=True)(_topn_groups_loop)
    _pack_loop_jit = njit(cache=True)(_pack_bits_loop)
    _unpack_loop_jit = njit(cache=True)(_unpack_bits_loop)

    def pack_bits_numba(values: np.ndarray, width: int) -> np.ndarray:
        return _pack_loop_jit(np.ascontiguousarray(values, dtype=np.int64), int(width))

    def unpack_bits_numba(stream: np.ndarray, width: int, count: int) -> np.ndarray:
        return _unpack_loop_jit(np.ascontiguousarray(stream, dtype=np.uint8), int(width), int(count))

else:  # pragma: no cover
    topn_groups_numba = None
    pack_bits_numba = None
    unpack_bits_numba = None


def topn_groups(groups: np.ndarray, n: int) -> np.ndarray:
    groups = np.ascontiguousarray(groups, dtype=np.float64)
    if USE_NUMBA:
        return topn_groups_numba(groups, int(n))
    return topn_groups_numpy(groups, n)


def pack_bits(values: np.ndarray, width: int) -> np.ndarray:
    if USE_NUMBA:
        return pack_bits_numba(values, width)
    return pack_bits_numpy(values, width)


def unpack_bits(stream: np.ndarray, width: int, count: int) -> np.ndarray:
    if USE_NUMBA:
        return unpack_bits_numba(stream, width, count)
    return unpack_bits_numpy(stream, width, count)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
