"""Bit-exact file formats.

BTCQ holds one QuantizedLayer:

    magic "BTCQ" | version (1 byte, = 1) | flags (1 byte)
    n, m, v, c, index_count   -- unsigned 32-bit little-endian
    alpha  n x float32        mu  n x float32
    codebook  c rows x ceil(v/8) bytes, LSB-first, bit 1 <-> +1
    indices   index_count entries of ceil(log2 c) bits, packed LSB-first
              contiguously, zero-padded to a byte boundary
    [flags bit0] overlay: count u32, count x (row u32, col u32),
                 packed signs, alpha2 n x float32
    [flags bit1] transform: d1 u32, d2 u32, sigma packed bits,
                 P1 d1*d1 x float64, P2 d2*d2 x float64
    [flags bit2] grouping: count u32, thresholds count x float64

BTCW is a minimal raw weight container: magic "BTCW", version byte,
rows and cols as u32 little-endian, then row-major float32.

Scales are stored at 32 bits but computed at 64: the first serialization
rounds them, after which round trips are byte-identical.  Every field
width is fixed, so equal layers serialize to equal bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import matrix
from .binarize import SalientOverlay, SplitGrouping
from .codebook import BinaryCodebook
from .errors import (
    BadMagicError,
    ContainerError,
    CorruptIndexError,
    DomainError,
    ShapeError,
    TruncatedError,
    UnsupportedVersionError,
)
from .pipeline import QuantizedLayer, _ceil_div
from .transform import TransformPair

BTCQ_MAGIC = b"BTCQ"
BTCW_MAGIC = b"BTCW"
VERSION = 1

FLAG_OVERLAY = 1
FLAG_TRANSFORM = 2
FLAG_GROUPING = 4
_KNOWN_FLAGS = FLAG_OVERLAY | FLAG_TRANSFORM | FLAG_GROUPING


@dataclass
class BtcqContainer:
    payload: bytes


def _pack_sign_bits(values) -> bytes:
    """Signs to LSB-first bits (bit 1 <-> +1), zero-padded to bytes."""
    bits = np.asarray(values) > 0
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_sign_bits(data: bytes, count: int, what: str) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    if bits[count:].any():
        raise ContainerError(f"{what} padding bits are not zero")
    return np.where(bits[:count], 1.0, -1.0)


def _pack_uint_stream(values, width: int) -> bytes:
    if width == 0 or len(values) == 0:
        return b""
    vals = np.asarray(values, dtype=np.uint64)
    shifts = np.arange(width, dtype=np.uint64)
    bits = ((vals[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def _unpack_uint_stream(data: bytes, count: int, width: int) -> np.ndarray:
    if width == 0 or count == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    total = count * width
    if bits[total:].any():
        raise CorruptIndexError("index padding bits are not zero")
    shifts = np.arange(width, dtype=np.uint64)
    vals = (bits[:total].reshape(count, width).astype(np.uint64) << shifts).sum(
        axis=1
    )
    return vals.astype(np.int64)


def _f32_bytes(values) -> bytes:
    return np.asarray(values, dtype="<f4").tobytes()


def _sections(layer: QuantizedLayer) -> list[tuple[str, bytes]]:
    flags = 0
    if layer.overlay is not None:
        flags |= FLAG_OVERLAY
    if layer.transform is not None:
        flags |= FLAG_TRANSFORM
    if layer.grouping is not None:
        flags |= FLAG_GROUPING
    header = BTCQ_MAGIC + struct.pack(
        "<BBIIIII",
        VERSION,
        flags,
        layer.n,
        layer.m,
        layer.v,
        layer.c,
        layer.index_count,
    )
    out = [
        ("header", header),
        ("alpha", _f32_bytes(layer.alpha)),
        ("mu", _f32_bytes(layer.mu)),
        ("codebook", matrix.packed_rows_to_bytes(layer.codebook.C).tobytes()),
        (
            "indices",
            _pack_uint_stream(layer.indices, (layer.c - 1).bit_length()),
        ),
    ]
    if layer.overlay is not None:
        ov = layer.overlay
        rows, cols = np.nonzero(ov.mask)
        dense_b2 = matrix.unpack_signs(ov.B2)
        out.append(
            (
                "overlay",
                struct.pack("<I", len(rows))
                + np.column_stack([rows, cols]).astype("<u4").tobytes()
                + _pack_sign_bits(dense_b2[rows, cols])
                + _f32_bytes(ov.alpha2),
            )
        )
    if layer.transform is not None:
        t = layer.transform
        out.append(
            (
                "transform",
                struct.pack("<II", t.d1, t.d2)
                + _pack_sign_bits(t.sigma)
                + t.p1.astype("<f8").tobytes()
                + t.p2.astype("<f8").tobytes(),
            )
        )
    if layer.grouping is not None:
        th = np.asarray(layer.grouping.thresholds, dtype="<f8")
        out.append(
            ("grouping", struct.pack("<I", len(th)) + th.tobytes())
        )
    return out


def serialize(layer: QuantizedLayer) -> BtcqContainer:
    return BtcqContainer(b"".join(data for _, data in _sections(layer)))


def section_layout(layer: QuantizedLayer) -> list[tuple[str, int]]:
    """Byte length of every section as serialized, header included."""
    return [(name, len(data)) for name, data in _sections(layer)]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, count: int, what: str) -> bytes:
        if self.off + count > len(self.buf):
            raise TruncatedError(
                f"container ends inside {what}: needed {count} bytes at "
                f"offset {self.off}, have {len(self.buf) - self.off}"
            )
        out = self.buf[self.off : self.off + count]
        self.off += count
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def f32s(self, count: int, what: str) -> np.ndarray:
        data = self.take(4 * count, what)
        return np.frombuffer(data, dtype="<f4").astype(np.float64)

    def f64s(self, count: int, what: str) -> np.ndarray:
        data = self.take(8 * count, what)
        return np.frombuffer(data, dtype="<f8").astype(np.float64)

    def finish(self):
        if self.off != len(self.buf):
            raise ContainerError(
                f"{len(self.buf) - self.off} trailing bytes after the last section"
            )


def deserialize(container: BtcqContainer | bytes) -> QuantizedLayer:
    buf = container.payload if isinstance(container, BtcqContainer) else bytes(container)
    r = _Reader(buf)

    magic = r.take(4, "magic")
    if magic != BTCQ_MAGIC:
        raise BadMagicError(f"expected {BTCQ_MAGIC!r}, found {magic!r}")
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    flags = r.take(1, "flags")[0]
    if flags & ~_KNOWN_FLAGS:
        raise ContainerError(f"unknown flag bits 0x{flags & ~_KNOWN_FLAGS:02x}")
    n = r.u32("n")
    m = r.u32("m")
    v = r.u32("v")
    c = r.u32("c")
    index_count = r.u32("index_count")
    if min(n, m, v, c) < 1:
        raise ContainerError(f"degenerate dimensions n={n} m={m} v={v} c={c}")
    if index_count != _ceil_div(n * m, v):
        raise ContainerError(
            f"index_count {index_count} inconsistent with {n}x{m} weights "
            f"in vectors of {v}"
        )

    alpha = r.f32s(n, "alpha")
    mu = r.f32s(n, "mu")

    cb_bytes = r.take(c * ((v + 7) // 8), "codebook")
    try:
        cb_rows = matrix.packed_rows_from_bytes(
            np.frombuffer(cb_bytes, dtype=np.uint8), c, v
        )
    except DomainError as exc:
        raise ContainerError(f"codebook rows malformed: {exc}") from exc
    codebook = BinaryCodebook(cb_rows)

    width = (c - 1).bit_length()
    idx_bytes = r.take(_ceil_div(index_count * width, 8), "indices")
    indices = _unpack_uint_stream(idx_bytes, index_count, width)
    if len(indices) and indices.max() >= c:
        raise CorruptIndexError(
            f"index {int(indices.max())} out of range for codebook of {c}"
        )

    overlay = None
    if flags & FLAG_OVERLAY:
        count = r.u32("overlay count")
        if count > n * m:
            raise ContainerError(f"overlay count {count} exceeds {n}x{m}")
        pos = np.frombuffer(
            r.take(8 * count, "overlay positions"), dtype="<u4"
        ).reshape(count, 2)
        rows, cols = pos[:, 0].astype(np.int64), pos[:, 1].astype(np.int64)
        if count and (rows.max() >= n or cols.max() >= m):
            raise ContainerError("overlay position out of bounds")
        mask = np.zeros((n, m), dtype=bool)
        mask[rows, cols] = True
        if int(mask.sum()) != count:
            raise ContainerError("duplicate overlay positions")
        sign_bytes = r.take(_ceil_div(count, 8), "overlay signs")
        signs = _unpack_sign_bits(sign_bytes, count, "overlay sign")
        dense_b2 = np.ones((n, m))
        dense_b2[rows, cols] = signs
        alpha2 = r.f32s(n, "overlay alpha2")
        overlay = SalientOverlay(mask, matrix.pack_signs(dense_b2), alpha2)

    transform = None
    if flags & FLAG_TRANSFORM:
        d1 = r.u32("transform d1")
        d2 = r.u32("transform d2")
        if d1 < 1 or d2 < 1 or d1 * d2 != m:
            raise ContainerError(
                f"transform factors {d1}x{d2} do not cover {m} columns"
            )
        sigma_bytes = r.take(_ceil_div(d1 * d2, 8), "transform sigma")
        sigma = _unpack_sign_bits(sigma_bytes, d1 * d2, "sigma")
        p1 = r.f64s(d1 * d1, "transform P1").reshape(d1, d1)
        p2 = r.f64s(d2 * d2, "transform P2").reshape(d2, d2)
        transform = TransformPair(sigma, p1, p2)

    grouping = None
    if flags & FLAG_GROUPING:
        count = r.u32("grouping count")
        thresholds = r.f64s(count, "grouping thresholds")
        if count > 1 and not (np.diff(thresholds) > 0).all():
            raise ContainerError("grouping thresholds must be strictly increasing")
        grouping = SplitGrouping(thresholds, None, 0.0, False)

    r.finish()
    return QuantizedLayer(
        n,
        m,
        v,
        codebook,
        indices,
        alpha,
        mu,
        overlay=overlay,
        transform=transform,
        grouping=grouping,
    )


def write_layer(path, layer: QuantizedLayer) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(layer).payload)


def read_layer(path) -> QuantizedLayer:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def weights_to_bytes(w) -> bytes:
    w = matrix.as_dense(w, "W")
    if w.size == 0:
        raise ShapeError("weight container needs a nonempty matrix")
    header = BTCW_MAGIC + struct.pack("<BII", VERSION, w.shape[0], w.shape[1])
    return header + np.ascontiguousarray(w, dtype="<f4").tobytes()


def weights_from_bytes(data: bytes) -> np.ndarray:
    r = _Reader(bytes(data))
    magic = r.take(4, "magic")
    if magic != BTCW_MAGIC:
        raise BadMagicError(f"expected {BTCW_MAGIC!r}, found {magic!r}")
    version = r.take(1, "version")[0]
    if version != VERSION:
        raise UnsupportedVersionError(f"version {version} not supported")
    rows = r.u32("rows")
    cols = r.u32("cols")
    if rows < 1 or cols < 1:
        raise ContainerError(f"degenerate weight shape {rows}x{cols}")
    w = r.f32s(rows * cols, "weights").reshape(rows, cols)
    r.finish()
    return w


def write_weights(path, w) -> None:
    with open(path, "wb") as fh:
        fh.write(weights_to_bytes(w))


def read_weights(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read())
