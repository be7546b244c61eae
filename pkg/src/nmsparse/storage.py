"""Packed N:M weight storage: kept values plus bit-packed in-group offsets.

Byte layout of the serialized form (all little-endian)::

    magic      4 bytes   b"NMPK"
    version    u8        1
    value_bits u8        32 or 64
    N, M       u16, u16
    axis, ndim u8, u8
    shape      ndim x u32
    values     G*N floats, group-major, ascending offset within each group
    indices    ceil(G*N*b / 8) bytes, b = ceil(log2 M) bits per offset,
               LSB-first, padded once at the end of the tensor

Groups are ``M`` consecutive entries along ``axis``, enumerated with that axis
moved last in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .nm import NmPattern, SparsityMask, _from_groups, _to_groups

MAGIC = b"NMPK"
VERSION = 1
_FIXED = struct.Struct("<4sBBHHBB")
_DTYPES = {32: np.dtype("<f4"), 64: np.dtype("<f8")}


@dataclass
class PackedNmTensor:
    pattern: NmPattern
    shape: tuple[int, ...]
    axis: int
    values: np.ndarray
    indices: np.ndarray  # (groups, N) offsets
    value_bits: int = 64

    @property
    def groups(self) -> int:
        return self.indices.shape[0]


def header_bits(ndim: int) -> int:
    return 8 * (_FIXED.size + 4 * ndim)


def index_stream_bits(count: int, pattern: NmPattern) -> int:
    return 8 * ((count * pattern.index_bits + 7) // 8)


def packed_size_bits(packed: PackedNmTensor) -> int:
    count = packed.groups * packed.pattern.keep_n
    return header_bits(len(packed.shape)) + count * packed.value_bits + index_stream_bits(count, packed.pattern)


def size_bits_for(shape: tuple[int, ...], pattern: NmPattern, value_bits: int = 64) -> int:
    """Packed size without building the tensor; depends only on shape and pattern."""
    count = int(np.prod(shape)) // pattern.group_m * pattern.keep_n
    return header_bits(len(shape)) + count * value_bits + index_stream_bits(count, pattern)


def pack(
    weight,
    mask: SparsityMask,
    pattern: NmPattern,
    axis: int = 0,
    value_bits: int = 64,
) -> PackedNmTensor:
    """Keep the entries selected by a binary N:M ``mask``.

    Raises ``ValueError`` if the mask is not binary or any group keeps a
    number of entries other than N.
    """
    if value_bits not in _DTYPES:
        raise ValueError(f"value_bits must be 32 or 64, got {value_bits}")
    w = np.asarray(getattr(weight, "data", weight), dtype=np.float64)
    if mask.values.shape != w.shape:
        raise ValueError(f"pack: weight {w.shape} vs mask {mask.values.shape}")
    if mask.mask_mode != "binary":
        raise ValueError("pack needs a binary mask")
    axis = axis % w.ndim
    if w.shape[axis] % pattern.group_m:
        raise ValueError(f"pack: axis length {w.shape[axis]} not divisible by M={pattern.group_m}")
    mask.check(pattern, axis=axis)
    wg = _to_groups(w, pattern.group_m, axis)
    kg = _to_groups(mask.kept, pattern.group_m, axis)
    indices = np.nonzero(kg)[1].reshape(-1, pattern.keep_n)
    values = wg[kg].astype(_DTYPES[value_bits])
    return PackedNmTensor(pattern, tuple(w.shape), axis, values, indices, value_bits)


def unpack(packed: PackedNmTensor) -> np.ndarray:
    """Dense float64 array; pruned slots are +0.0."""
    p = packed.pattern
    groups = np.zeros((packed.groups, p.group_m))
    rows = np.repeat(np.arange(packed.groups), p.keep_n)
    groups[rows, packed.indices.reshape(-1)] = packed.values.astype(np.float64)
    return np.ascontiguousarray(_from_groups(groups, packed.shape, packed.axis))


def to_bytes(packed: PackedNmTensor) -> bytes:
    p = packed.pattern
    head = _FIXED.pack(MAGIC, VERSION, packed.value_bits, p.keep_n, p.group_m, packed.axis, len(packed.shape))
    dims = struct.pack(f"<{len(packed.shape)}I", *packed.shape)
    vals = np.ascontiguousarray(packed.values, dtype=_DTYPES[packed.value_bits]).tobytes()
    idx = _kernels.pack_bits(packed.indices.reshape(-1), p.index_bits).tobytes()
    return head + dims + vals + idx


def from_bytes(buf: bytes) -> PackedNmTensor:
    if len(buf) < _FIXED.size or buf[:4] != MAGIC:
        raise ValueError("not an NMPK stream")
    _, version, value_bits, n, m, axis, ndim = _FIXED.unpack_from(buf, 0)
    if version != VERSION:
        raise ValueError(f"unsupported NMPK version {version}")
    if value_bits not in _DTYPES:
        raise ValueError(f"corrupt NMPK header: value_bits={value_bits}")
    pattern = NmPattern(n, m)
    pos = _FIXED.size
    shape = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    count = int(np.prod(shape, dtype=np.int64)) // m * n
    dtype = _DTYPES[value_bits]
    values = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).copy()
    pos += count * dtype.itemsize
    nbytes = (count * pattern.index_bits + 7) // 8
    stream = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=pos)
    if pos + nbytes != len(buf):
        raise ValueError(f"NMPK stream has {len(buf) - pos - nbytes} trailing or missing bytes")
    indices = _kernels.unpack_bits(stream, pattern.index_bits, count).reshape(-1, n)
    return PackedNmTensor(pattern, tuple(shape), axis, values, indices, value_bits)


def save(path: str | Path, packed: PackedNmTensor) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(packed))
    return path


def load(path: str | Path) -> PackedNmTensor:
    return from_bytes(Path(path).read_bytes())
