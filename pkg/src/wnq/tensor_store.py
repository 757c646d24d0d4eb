"""Dense weight tensors, per-filter grouping, and the WNQT / WNQQ binary formats.

WNQT (float tensor)::

    b"WNQT" | version u8 | kind u8 (0=FC, 1=Conv) | ndim u8 | dims u64le * ndim | data f32le * prod(dims)

WNQQ (quantized layer)::

    b"WNQQ" | version u8 | kind u8 | K u8 | N u64le | M u64le
    then per filter: mav f32le | alpha f32le * K | K bit-planes of ceil(M/8) bytes, LSB-first

Bit ``i`` of plane ``k`` is 1 when the k-th code sign of element ``i`` is +1.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TENSOR_MAGIC = b"WNQT"
QUANT_MAGIC = b"WNQQ"
FORMAT_VERSION = 1
MAX_BITS = 8


class LayerKind(enum.IntEnum):
    FullyConnected = 0
    Conv = 1


_NDIM = {LayerKind.FullyConnected: 2, LayerKind.Conv: 4}


class FormatError(Exception):
    """Base class for malformed WNQT/WNQQ files. ``code`` is stable for scripting."""

    code = "format"


class BadMagic(FormatError):
    code = "bad_magic"


class UnsupportedVersion(FormatError):
    code = "bad_version"


class Truncated(FormatError):
    code = "truncated"


class KindMismatch(FormatError):
    code = "kind_mismatch"


class TrailingBytes(FormatError):
    code = "trailing_bytes"


def combine_levels(codes: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Evaluate ``alpha . code`` along the last axis, summing bits left to right.

    Every dequantization path goes through here so that the same (codes, alpha)
    always produce bit-identical values.
    """
    codes = np.asarray(codes)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim > 1:
        # per-filter alpha (N, K) against codes (N, M, K)
        alpha = alpha[..., None, :]
    acc = np.zeros(codes.shape[:-1], dtype=np.float64)
    for k in range(codes.shape[-1]):
        acc = acc + codes[..., k] * alpha[..., k]
    return acc


@dataclass(frozen=True)
class FilterView:
    filter_index: int
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class WeightTensor:
    """A dense float weight tensor. ``data`` is a read-only float64 copy, row-major."""

    shape: tuple[int, ...]
    data: np.ndarray
    kind: LayerKind

    def __init__(self, shape: Sequence[int], data, kind: LayerKind | None = None):
        shape = tuple(int(d) for d in shape)
        if kind is None:
            kind = LayerKind.Conv if len(shape) == 4 else LayerKind.FullyConnected
        kind = LayerKind(kind)
        if len(shape) != _NDIM[kind]:
            raise ValueError(f"{kind.name} tensor needs {_NDIM[kind]} dims, got shape {shape}")
        if any(d <= 0 for d in shape):
            raise ValueError(f"dimensions must be positive, got {shape}")
        arr = np.array(data, dtype=np.float64).reshape(-1)
        if arr.size != int(np.prod(shape)):
            raise ValueError(f"data has {arr.size} values, shape {shape} needs {int(np.prod(shape))}")
        arr.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "kind", kind)

    @classmethod
    def from_array(cls, array: np.ndarray, kind: LayerKind | None = None) -> "WeightTensor":
        array = np.asarray(array)
        return cls(array.shape, array.reshape(-1), kind)

    @property
    def num_filters(self) -> int:
        return self.shape[0]

    @property
    def filter_size(self) -> int:
        return int(np.prod(self.shape[1:]))

    def rows(self) -> np.ndarray:
        """Read-only (N, M) view, one filter per row."""
        return self.data.reshape(self.num_filters, self.filter_size)

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.shape).copy()

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightTensor):
            return NotImplemented
        return self.shape == other.shape and self.kind == other.kind and np.array_equal(self.data, other.data)


def filter_views(t: WeightTensor) -> list[FilterView]:
    """Split ``t`` into its N filters (conv output channels or FC rows)."""
    rows = t.rows()
    return [FilterView(n, rows[n]) for n in range(t.num_filters)]


@dataclass(frozen=True, eq=False)
class QuantizedFilter:
    alpha: np.ndarray
    bitplanes: np.ndarray
    mav: float
    m: int

    @property
    def bits(self) -> int:
        return len(self.alpha)

    @property
    def codes(self) -> np.ndarray:
        """(M, K) matrix of +-1 code signs."""
        bits = np.unpackbits(self.bitplanes, axis=1, count=self.m, bitorder="little")
        return (2 * bits.astype(np.int8) - 1).T

    def dequantize(self) -> np.ndarray:
        return self.mav * combine_levels(self.codes, self.alpha)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedFilter):
            return NotImplemented
        return (
            self.m == other.m
            and self.mav == other.mav
            and np.array_equal(self.alpha, other.alpha)
            and np.array_equal(self.bitplanes, other.bitplanes)
        )


def pack_filter(alpha, codes, mav: float) -> QuantizedFilter:
    """Pack per-element code signs into plane-major bit-planes.

    Args:
        alpha: K level parameters.
        codes: (M, K) array of +-1 signs; a 1-D array is read as K=1.
        mav: scale multiplied back on dequantization.
    """
    alpha = np.array(alpha, dtype=np.float64).reshape(-1)
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[:, None]
    m, k = codes.shape
    if m == 0:
        raise ValueError("cannot pack an empty filter")
    if k != alpha.size:
        raise ValueError(f"codes have {k} bits but alpha has {alpha.size} entries")
    if not 1 <= k <= MAX_BITS:
        raise ValueError(f"bit-width must be in [1, {MAX_BITS}], got {k}")
    if not np.all(np.abs(codes) == 1):
        raise ValueError("codes must be +1/-1")
    if mav < 0:
        raise ValueError("mav must be nonnegative")
    planes = np.packbits(codes.T > 0, axis=1, bitorder="little")
    alpha.setflags(write=False)
    planes.setflags(write=False)
    return QuantizedFilter(alpha, planes, float(mav), int(m))


def unpack_filter(qf: QuantizedFilter) -> np.ndarray:
    return qf.dequantize()


@dataclass(frozen=True)
class QuantizedLayer:
    kind: LayerKind
    filters: tuple[QuantizedFilter, ...]

    @property
    def bits(self) -> int:
        return self.filters[0].bits

    @property
    def num_filters(self) -> int:
        return len(self.filters)

    @property
    def filter_size(self) -> int:
        return self.filters[0].m

    def dequantize(self) -> np.ndarray:
        """(N, M) dequantized weights."""
        return np.stack([f.dequantize() for f in self.filters])


# -- WNQT ---------------------------------------------------------------------


def encode_tensor(t: WeightTensor) -> bytes:
    head = TENSOR_MAGIC + bytes([FORMAT_VERSION, int(t.kind), len(t.shape)])
    dims = struct.pack(f"<{len(t.shape)}Q", *t.shape)
    return head + dims + t.data.astype("<f4").tobytes()


def decode_tensor(buf: bytes) -> WeightTensor:
    if len(buf) < 4 or buf[:4] != TENSOR_MAGIC:
        raise BadMagic(f"expected magic {TENSOR_MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < 7:
        raise Truncated("header shorter than 7 bytes")
    version, kind_byte, ndim = buf[4], buf[5], buf[6]
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    try:
        kind = LayerKind(kind_byte)
    except ValueError:
        raise KindMismatch(f"unknown layer kind byte {kind_byte}") from None
    if ndim != _NDIM[kind]:
        raise KindMismatch(f"{kind.name} tensor declares {ndim} dims, expected {_NDIM[kind]}")
    off = 7 + 8 * ndim
    if len(buf) < off:
        raise Truncated("dimension block truncated")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 7)
    if any(d == 0 for d in shape):
        raise KindMismatch(f"zero-sized dimension in {shape}")
    count = int(np.prod(shape, dtype=object))
    end = off + 4 * count
    if len(buf) < end:
        raise Truncated(f"payload holds {(len(buf) - off) // 4} floats, shape {shape} needs {count}")
    if len(buf) > end:
        raise TrailingBytes(f"{len(buf) - end} unexpected bytes after payload")
    data = np.frombuffer(buf, dtype="<f4", count=count, offset=off)
    return WeightTensor(shape, data, kind)


def write_tensor(t: WeightTensor, path) -> None:
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path) -> WeightTensor:
    return decode_tensor(Path(path).read_bytes())


# -- WNQQ ---------------------------------------------------------------------

_QHEAD = struct.Struct("<4sBBBQQ")


def encode_quantized(layer: QuantizedLayer) -> bytes:
    k, n, m = layer.bits, layer.num_filters, layer.filter_size
    out = [_QHEAD.pack(QUANT_MAGIC, FORMAT_VERSION, int(layer.kind), k, n, m)]
    for f in layer.filters:
        if f.bits != k or f.m != m:
            raise ValueError("all filters in a layer must share K and M")
        out.append(struct.pack("<f", f.mav))
        out.append(f.alpha.astype("<f4").tobytes())
        out.append(f.bitplanes.tobytes())
    return b"".join(out)


def decode_quantized(buf: bytes) -> QuantizedLayer:
    if len(buf) < 4 or buf[:4] != QUANT_MAGIC:
        raise BadMagic(f"expected magic {QUANT_MAGIC!r}, got {bytes(buf[:4])!r}")
    if len(buf) < _QHEAD.size:
        raise Truncated("header truncated")
    _, version, kind_byte, k, n, m = _QHEAD.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported version {version}")
    try:
        kind = LayerKind(kind_byte)
    except ValueError:
        raise KindMismatch(f"unknown layer kind byte {kind_byte}") from None
    if not 1 <= k <= MAX_BITS or n == 0 or m == 0:
        raise KindMismatch(f"invalid header K={k} N={n} M={m}")
    plane = (m + 7) // 8
    per_filter = 4 + 4 * k + k * plane
    end = _QHEAD.size + n * per_filter
    if len(buf) < end:
        raise Truncated(f"expected {end} bytes, got {len(buf)}")
    if len(buf) > end:
        raise TrailingBytes(f"{len(buf) - end} unexpected bytes after payload")
    filters = []
    off = _QHEAD.size
    for _ in range(n):
        (mav,) = struct.unpack_from("<f", buf, off)
        alpha = np.frombuffer(buf, dtype="<f4", count=k, offset=off + 4).astype(np.float64)
        planes = np.frombuffer(buf, dtype=np.uint8, count=k * plane, offset=off + 4 + 4 * k)
        # padding bits are ignored: clear them so re-encoding is canonical
        bits = np.unpackbits(planes.reshape(k, plane), axis=1, count=m, bitorder="little")
        codes = 2 * bits.T.astype(np.int8) - 1
        filters.append(pack_filter(alpha, codes, mav))
        off += per_filter
    return QuantizedLayer(kind, tuple(filters))


def write_quantized(layer: QuantizedLayer, path) -> None:
    Path(path).write_bytes(encode_quantized(layer))


def read_quantized(path) -> QuantizedLayer:
    return decode_quantized(Path(path).read_bytes())


def sniff(path) -> bytes:
    """Return the 4-byte magic of ``path``."""
    with open(path, "rb") as fh:
        return fh.read(4)
