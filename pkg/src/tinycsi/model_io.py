"""Bit-exact model serialization; the on-disk byte count is the model-size
metric, with no container compression so every byte is attributable to the
chosen weight representation.

Layout (all little-endian):

    magic "CSIM" | version u16
    spec block: planes u8 | n_delay u16 | n_tx u16 | gamma f32 |
                leaky_slope f32 | epochs_seen u32 |
                technique length u8 + ascii bytes
    layer count u16, then per-layer records: kind u8 + payload

Weight-store records carry a variant tag u8, a small fixed header, and the
payload mandated by the size rules: DenseF32 4 bytes/weight, DenseF16 2,
QuantizedI8 1 byte/weight + one 4-byte scale, SparseBitmap ceil(T/8) bitmap
bytes plus 4/2/1 bytes per stored nonzero (f32/f16/int8), Clustered
4 or 1 bytes per centroid plus ceil(T * ceil(log2 k) / 8) packed index
bytes. Biases and batch-norm arrays are always float32.
"""

from __future__ import annotations

import math
import struct

import numpy as np

from .errors import FormatError
from .model import (
    BatchNormLayer,
    ConvLayer,
    DenseLayer,
    FlattenLayer,
    LeakyReluLayer,
    Model,
    ModelSpec,
    ReshapeLayer,
    SigmoidLayer,
    SkipBeginLayer,
    SkipEndLayer,
)
from .tensor import BatchNormState, Tensor
from .weights import (
    Clustered,
    DenseF16,
    DenseF32,
    QuantizedI8,
    SparseBitmap,
    WeightStore,
    element_count,
    pack_uint_bits,
    unpack_uint_bits,
)

MODEL_MAGIC = b"CSIM"
MODEL_VERSION = 1

_KIND_CONV = 0
_KIND_DENSE = 1
_KIND_BATCHNORM = 2
_KIND_LEAKY = 3
_KIND_SIGMOID = 4
_KIND_FLATTEN = 5
_KIND_RESHAPE = 6
_KIND_SKIP_BEGIN = 7
_KIND_SKIP_END = 8

_TAG_DENSE_F32 = 0
_TAG_DENSE_F16 = 1
_TAG_QUANT_I8 = 2
_TAG_SPARSE = 3
_TAG_CLUSTERED = 4

_SPARSE_DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float16): 1, np.dtype(np.int8): 2}
_SPARSE_WIDTH = {0: 4, 1: 2, 2: 1}


# --- size accounting ---------------------------------------------------------


def store_payload_bytes(store: WeightStore) -> int:
    """Payload bytes of one weight tensor under the serialization rules
    (excludes the variant tag and fixed header fields)."""
    total = element_count(store)
    if isinstance(store, DenseF32):
        return 4 * total
    if isinstance(store, DenseF16):
        return 2 * total
    if isinstance(store, QuantizedI8):
        return total + 4
    if isinstance(store, SparseBitmap):
        width = _SPARSE_WIDTH[_SPARSE_DTYPES[store.values.dtype]]
        return (total + 7) // 8 + width * store.nnz
    if isinstance(store, Clustered):
        cwidth = 1 if store.centroids.dtype == np.int8 else 4
        index_bytes = (total * store.index_bits + 7) // 8
        return cwidth * store.k + index_bytes
    raise FormatError(f"unknown store {type(store).__name__}")


def _store_record_bytes(store: WeightStore) -> int:
    header = 1  # variant tag
    if isinstance(store, SparseBitmap):
        header += 1 + 4 + (4 if store.values.dtype == np.int8 else 0)  # dtype, nnz, scale
    elif isinstance(store, Clustered):
        header += 1 + 2 + (4 if store.centroids.dtype == np.int8 else 0)  # dtype, k, scale
    return header + store_payload_bytes(store)


def _layer_record_bytes(layer) -> int:
    if isinstance(layer, ConvLayer):
        return 1 + 4 + _store_record_bytes(layer.store) + 4 * layer.bias.size
    if isinstance(layer, DenseLayer):
        return 1 + 8 + _store_record_bytes(layer.store) + 4 * layer.bias.size
    if isinstance(layer, BatchNormLayer):
        return 1 + 2 + 16 * layer.state.channels
    if isinstance(layer, LeakyReluLayer):
        return 1 + 4
    if isinstance(layer, ReshapeLayer):
        return 1 + 6
    return 1  # sigmoid / flatten / skip markers


def size_of(model: Model) -> int:
    """Exact serialized size in bytes, computed without writing."""
    header = 4 + 2
    spec_block = 1 + 2 + 2 + 4 + 4 + 4 + 1 + len(model.technique.encode("ascii"))
    body = 2 + sum(_layer_record_bytes(layer) for layer in model.layers)
    return header + spec_block + body


# --- writing -----------------------------------------------------------------


def _write_store(buf: bytearray, store: WeightStore) -> None:
    if isinstance(store, DenseF32):
        buf.append(_TAG_DENSE_F32)
        buf += np.ascontiguousarray(store.values, dtype="<f4").tobytes()
    elif isinstance(store, DenseF16):
        buf.append(_TAG_DENSE_F16)
        buf += np.ascontiguousarray(store.values, dtype="<f2").tobytes()
    elif isinstance(store, QuantizedI8):
        buf.append(_TAG_QUANT_I8)
        buf += store.q.tobytes()
        buf += struct.pack("<f", store.scale)
    elif isinstance(store, SparseBitmap):
        buf.append(_TAG_SPARSE)
        dtype_code = _SPARSE_DTYPES[store.values.dtype]
        buf.append(dtype_code)
        buf += struct.pack("<I", store.nnz)
        if dtype_code == 2:
            buf += struct.pack("<f", store.scale)
        buf += store.bitmap.tobytes()
        if dtype_code == 0:
            buf += np.ascontiguousarray(store.values, dtype="<f4").tobytes()
        elif dtype_code == 1:
            buf += np.ascontiguousarray(store.values, dtype="<f2").tobytes()
        else:
            buf += store.values.tobytes()
    elif isinstance(store, Clustered):
        buf.append(_TAG_CLUSTERED)
        is_i8 = store.centroids.dtype == np.int8
        buf.append(2 if is_i8 else 0)
        buf += struct.pack("<H", store.k)
        if is_i8:
            buf += struct.pack("<f", store.scale)
            buf += store.centroids.tobytes()
        else:
            buf += np.ascontiguousarray(store.centroids, dtype="<f4").tobytes()
        buf += pack_uint_bits(store.indices, store.index_bits)
    else:
        raise FormatError(f"cannot serialize store {type(store).__name__}")


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def serialize(model: Model) -> bytes:
    buf = bytearray()
    buf += MODEL_MAGIC
    buf += struct.pack("<H", MODEL_VERSION)
    spec = model.spec
    tech = model.technique.encode("ascii")
    if len(tech) > 255:
        raise FormatError("technique tag too long")
    buf += struct.pack("<BHHffIB", spec.planes, spec.n_delay, spec.n_tx,
                       spec.gamma, spec.leaky_slope, model.epochs_seen, len(tech))
    buf += tech
    buf += struct.pack("<H", len(model.layers))
    for layer in model.layers:
        if isinstance(layer, ConvLayer):
            buf.append(_KIND_CONV)
            buf += struct.pack("<HH", layer.out_channels, layer.in_channels)
            _write_store(buf, layer.store)
            buf += _f32_bytes(layer.bias)
        elif isinstance(layer, DenseLayer):
            buf.append(_KIND_DENSE)
            buf += struct.pack("<II", layer.n_in, layer.n_out)
            _write_store(buf, layer.store)
            buf += _f32_bytes(layer.bias)
        elif isinstance(layer, BatchNormLayer):
            buf.append(_KIND_BATCHNORM)
            state = layer.state
            buf += struct.pack("<H", state.channels)
            buf += _f32_bytes(state.scale.data)
            buf += _f32_bytes(state.shift.data)
            buf += _f32_bytes(state.running_mean)
            buf += _f32_bytes(state.running_var)
        elif isinstance(layer, LeakyReluLayer):
            buf.append(_KIND_LEAKY)
            buf += struct.pack("<f", layer.slope)
        elif isinstance(layer, SigmoidLayer):
            buf.append(_KIND_SIGMOID)
        elif isinstance(layer, FlattenLayer):
            buf.append(_KIND_FLATTEN)
        elif isinstance(layer, ReshapeLayer):
            buf.append(_KIND_RESHAPE)
            buf += struct.pack("<HHH", *layer.shape)
        elif isinstance(layer, SkipBeginLayer):
            buf.append(_KIND_SKIP_BEGIN)
        elif isinstance(layer, SkipEndLayer):
            buf.append(_KIND_SKIP_END)
        else:
            raise FormatError(f"cannot serialize layer {type(layer).__name__}")
    return bytes(buf)


def save(model: Model, path) -> int:
    """Write the model file; returns bytes written (== size_of(model))."""
    blob = serialize(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


# --- reading -----------------------------------------------------------------


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError(
                f"file truncated: needed {count} bytes, {len(self.blob) - self.pos} left",
                offset=self.pos,
            )
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def f32_array(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * count), dtype="<f4").astype(np.float32)


def _read_store(cur: _Cursor, shape: tuple[int, ...]) -> WeightStore:
    total = int(np.prod(shape))
    (tag,) = cur.unpack("<B")
    if tag == _TAG_DENSE_F32:
        vals = np.frombuffer(cur.take(4 * total), dtype="<f4").reshape(shape)
        return DenseF32(vals.copy())
    if tag == _TAG_DENSE_F16:
        vals = np.frombuffer(cur.take(2 * total), dtype="<f2").reshape(shape)
        return DenseF16(vals.copy())
    if tag == _TAG_QUANT_I8:
        q = np.frombuffer(cur.take(total), dtype=np.int8).reshape(shape)
        (scale,) = cur.unpack("<f")
        return QuantizedI8(q.copy(), scale)
    if tag == _TAG_SPARSE:
        dtype_code, nnz = cur.unpack("<BI")
        if dtype_code not in _SPARSE_WIDTH:
            raise FormatError(f"bad sparse dtype code {dtype_code}", offset=cur.pos - 5)
        scale = None
        if dtype_code == 2:
            (scale,) = cur.unpack("<f")
        bitmap = np.frombuffer(cur.take((total + 7) // 8), dtype=np.uint8)
        if dtype_code == 0:
            vals = np.frombuffer(cur.take(4 * nnz), dtype="<f4").astype(np.float32)
        elif dtype_code == 1:
            vals = np.frombuffer(cur.take(2 * nnz), dtype="<f2").astype(np.float16)
        else:
            vals = np.frombuffer(cur.take(nnz), dtype=np.int8).copy()
        return SparseBitmap(shape, bitmap.copy(), vals,
                            scale if dtype_code == 2 else None)
    if tag == _TAG_CLUSTERED:
        dtype_code, k = cur.unpack("<BH")
        if dtype_code == 2:
            (scale,) = cur.unpack("<f")
            cents = np.frombuffer(cur.take(k), dtype=np.int8).copy()
        elif dtype_code == 0:
            scale = None
            cents = np.frombuffer(cur.take(4 * k), dtype="<f4").astype(np.float32)
        else:
            raise FormatError(f"bad centroid dtype code {dtype_code}", offset=cur.pos - 3)
        bits = max(1, math.ceil(math.log2(k)))
        packed = cur.take((total * bits + 7) // 8)
        indices = unpack_uint_bits(packed, total, bits)
        return Clustered(shape, cents, indices, scale)
    raise FormatError(f"unknown weight store tag {tag}", offset=cur.pos - 1)


def deserialize(blob: bytes) -> Model:
    cur = _Cursor(blob)
    if cur.take(4) != MODEL_MAGIC:
        raise FormatError("bad model magic", offset=0)
    (version,) = cur.unpack("<H")
    if version != MODEL_VERSION:
        raise FormatError(
            f"unsupported model format version {version} (expected {MODEL_VERSION})",
            offset=4,
        )
    planes, n_delay, n_tx, gamma, slope, epochs_seen, tech_len = cur.unpack("<BHHffIB")
    technique = cur.take(tech_len).decode("ascii")
    spec = ModelSpec(n_delay=n_delay, n_tx=n_tx, gamma=gamma, planes=planes,
                     leaky_slope=slope)
    (layer_count,) = cur.unpack("<H")
    layers = []
    for _ in range(layer_count):
        (kind,) = cur.unpack("<B")
        if kind == _KIND_CONV:
            out_ch, in_ch = cur.unpack("<HH")
            store = _read_store(cur, (out_ch, in_ch, 3, 3))
            layers.append(ConvLayer(store, cur.f32_array(out_ch)))
        elif kind == _KIND_DENSE:
            n_in, n_out = cur.unpack("<II")
            store = _read_store(cur, (n_in, n_out))
            layers.append(DenseLayer(store, cur.f32_array(n_out)))
        elif kind == _KIND_BATCHNORM:
            (channels,) = cur.unpack("<H")
            state = BatchNormState(channels)
            state.scale = Tensor(cur.f32_array(channels), requires_grad=True)
            state.shift = Tensor(cur.f32_array(channels), requires_grad=True)
            state.running_mean = cur.f32_array(channels)
            state.running_var = cur.f32_array(channels)
            layers.append(BatchNormLayer(state))
        elif kind == _KIND_LEAKY:
            (slope_val,) = cur.unpack("<f")
            layers.append(LeakyReluLayer(slope_val))
        elif kind == _KIND_SIGMOID:
            layers.append(SigmoidLayer())
        elif kind == _KIND_FLATTEN:
            layers.append(FlattenLayer())
        elif kind == _KIND_RESHAPE:
            shape = cur.unpack("<HHH")
            layers.append(ReshapeLayer(shape))
        elif kind == _KIND_SKIP_BEGIN:
            layers.append(SkipBeginLayer())
        elif kind == _KIND_SKIP_END:
            layers.append(SkipEndLayer())
        else:
            raise FormatError(f"unknown layer kind {kind}", offset=cur.pos - 1)
    if cur.pos != len(blob):
        raise FormatError(
            f"{len(blob) - cur.pos} trailing bytes after model body", offset=cur.pos
        )
    model = Model(spec, layers, technique=technique)
    model.epochs_seen = epochs_seen
    return model


def load(path) -> Model:
    """Exact inverse of :func:`save`; no partial models on malformed input."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return deserialize(blob)
