"""Weight storage variants describing a layer's compression state.

A layer's parameters live in exactly one of five representations:

* ``DenseF32``   -- plain float32 values.
* ``DenseF16``   -- float16 values, upcast for compute.
* ``QuantizedI8``-- int8 values with one positive float32 scale per tensor.
* ``SparseBitmap`` -- one bit per logical position plus the surviving values
  (float32, float16 or int8+scale) in flat position order.
* ``Clustered``  -- k shared centroid values (float32 or int8+scale) plus a
  per-weight centroid index.

All variants expose the same logical element count; ``to_dense`` recovers a
float32 tensor of the logical shape for reference computations.

Bitmaps and packed index buffers use little-endian bit order: bit ``i`` of
byte ``j`` covers flat position ``j*8 + i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, ShapeError


@dataclass
class DenseF32:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def to_dense(self) -> np.ndarray:
        return self.values


@dataclass
class DenseF16:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float16)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def to_dense(self) -> np.ndarray:
        return self.values.astype(np.float32)


@dataclass
class QuantizedI8:
    q: np.ndarray
    scale: float

    def __post_init__(self):
        self.q = np.ascontiguousarray(self.q, dtype=np.int8)
        self.scale = float(self.scale)
        if self.scale <= 0:
            raise InvariantError(f"quantization scale must be positive, got {self.scale}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.q.shape

    def to_dense(self) -> np.ndarray:
        return (self.q.astype(np.float32) * np.float32(self.scale)).astype(np.float32)


@dataclass
class SparseBitmap:
    shape: tuple[int, ...]
    bitmap: np.ndarray          # packed uint8, ceil(T/8) bytes
    values: np.ndarray          # nonzero values in flat order (f32 | f16 | i8)
    scale: float | None = None  # set iff values are int8

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.bitmap = np.ascontiguousarray(self.bitmap, dtype=np.uint8)
        self.values = np.ascontiguousarray(self.values)
        total = int(np.prod(self.shape))
        if self.bitmap.size != (total + 7) // 8:
            raise ShapeError(
                f"bitmap has {self.bitmap.size} bytes, expected {(total + 7) // 8}"
            )
        nnz = int(np.unpackbits(self.bitmap, bitorder="little", count=total).sum())
        if nnz != self.values.size:
            raise InvariantError(
                f"bitmap popcount {nnz} does not match stored value count {self.values.size}"
            )
        if (self.values.dtype == np.int8) != (self.scale is not None):
            raise InvariantError("scale must be present exactly for int8 sparse values")

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def mask(self) -> np.ndarray:
        total = int(np.prod(self.shape))
        flat = np.unpackbits(self.bitmap, bitorder="little", count=total).astype(bool)
        return flat.reshape(self.shape)

    def to_dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)), dtype=np.float32)
        flat_mask = self.mask().reshape(-1)
        if self.values.dtype == np.int8:
            out[flat_mask] = self.values.astype(np.float32) * np.float32(self.scale)
        else:
            out[flat_mask] = self.values.astype(np.float32)
        return out.reshape(self.shape)


@dataclass
class Clustered:
    shape: tuple[int, ...]
    centroids: np.ndarray       # f32[k] or int8[k]
    indices: np.ndarray         # flat row-major, values in [0, k)
    scale: float | None = None  # set iff centroids are int8

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        self.centroids = np.ascontiguousarray(self.centroids)
        self.indices = np.ascontiguousarray(self.indices, dtype=np.uint32)
        k = self.centroids.size
        if k < 2:
            raise InvariantError(f"clustered store needs k >= 2, got {k}")
        if self.indices.size != int(np.prod(self.shape)):
            raise ShapeError("index count does not match logical element count")
        if self.indices.size and int(self.indices.max()) >= k:
            raise InvariantError("cluster index out of range")
        if (self.centroids.dtype == np.int8) != (self.scale is not None):
            raise InvariantError("scale must be present exactly for int8 centroids")

    @property
    def k(self) -> int:
        return int(self.centroids.size)

    @property
    def index_bits(self) -> int:
        return max(1, math.ceil(math.log2(self.k)))

    def centroid_table(self) -> np.ndarray:
        if self.centroids.dtype == np.int8:
            return self.centroids.astype(np.float32) * np.float32(self.scale)
        return self.centroids.astype(np.float32)

    def to_dense(self) -> np.ndarray:
        return self.centroid_table()[self.indices].reshape(self.shape)


WeightStore = DenseF32 | DenseF16 | QuantizedI8 | SparseBitmap | Clustered


def element_count(store: WeightStore) -> int:
    return int(np.prod(store.shape))


def make_sparse(values: np.ndarray, mask: np.ndarray) -> SparseBitmap:
    """Pack a dense float32 tensor and its keep-mask into bitmap form."""
    if values.shape != mask.shape:
        raise ShapeError("values and mask shapes differ")
    flat_mask = np.ascontiguousarray(mask, dtype=bool).reshape(-1)
    bitmap = np.packbits(flat_mask, bitorder="little")
    kept = np.ascontiguousarray(values, dtype=np.float32).reshape(-1)[flat_mask]
    return SparseBitmap(values.shape, bitmap, kept)


def pack_uint_bits(values: np.ndarray, bits: int) -> bytes:
    """Pack unsigned ints into ``bits`` bits each, little-endian bit order."""
    values = np.ascontiguousarray(values, dtype=np.uint32)
    if values.size and int(values.max()) >= (1 << bits):
        raise ShapeError(f"value does not fit in {bits} bits")
    shifts = np.arange(bits, dtype=np.uint32)
    bitmat = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bitmat.reshape(-1), bitorder="little").tobytes()


def unpack_uint_bits(buf: bytes, count: int, bits: int) -> np.ndarray:
    """Inverse of :func:`pack_uint_bits`."""
    need = (count * bits + 7) // 8
    if len(buf) < need:
        raise ShapeError(f"packed buffer too short: {len(buf)} < {need} bytes")
    flat = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    bitmat = flat[: count * bits].reshape(count, bits).astype(np.uint32)
    shifts = np.arange(bits, dtype=np.uint32)
    return (bitmat << shifts).sum(axis=1, dtype=np.uint32)
