"""Dense and bit-packed matrix primitives.

Dense matrices are plain 2-D float64 numpy arrays (row-major).  Sign
matrices with entries in {-1, +1} can be packed into 64-bit words,
one row at a time, least-significant bit first; a set bit encodes +1.
Hamming distances between packed rows reduce to XOR + popcount.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

# Packed words are reinterpreted as little-endian byte strings in a few
# places (serialization, byte views); big-endian hosts are not supported.
if sys.byteorder != "little":  # pragma: no cover
    raise ImportError("btcq requires a little-endian platform")

WORD_BITS = 64


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Validate and return `a` as a 2-D float64 C-contiguous array.

    Raises ShapeError for non-2-D input and DomainError if any entry
    is NaN or infinite.
    """
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got ndim={out.ndim}")
    if out.size and not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))[0]
        raise DomainError(f"{name} has non-finite entry at {tuple(bad)}")
    return out


def matmul(a, b) -> np.ndarray:
    """Product A @ B.T with a documented accumulation order.

    Accumulation runs sequentially over the shared dimension k (a
    rank-1 update per k), so every output element is built by the same
    sequence of IEEE-754 operations as the naive triple loop
    ``acc = 0; for k: acc += A[i,k] * B[j,k]``, and results match that
    loop bit for bit.
    """
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"inner dimensions differ: a is {a.shape}, b is {b.shape}"
        )
    out = np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, :, k]
    return out


def frobenius_norm_sq(a) -> float:
    """Sum of squared entries; 0.0 for an empty matrix."""
    a = as_dense(a)
    return float(np.sum(a * a))


@dataclass
class PackedBinaryMatrix:
    """Sign matrix packed into uint64 words, LSB-first, bit 1 == +1.

    Column j of row i lives in bit (j % 64) of word (i, j // 64).
    Bits past `cols` in the last word of each row are zero.
    """

    rows: int
    cols: int
    words: np.ndarray  # (rows, words_per_row) uint64

    def __post_init__(self):
        wpr = words_per_row(self.cols)
        if self.words.shape != (self.rows, wpr):
            raise ShapeError(
                f"words shape {self.words.shape} != ({self.rows}, {wpr})"
            )
        if self.words.dtype != np.uint64:
            raise DomainError(f"words must be uint64, got {self.words.dtype}")
        pad = wpr * WORD_BITS - self.cols
        if pad and self.rows:
            mask = np.uint64(0xFFFFFFFFFFFFFFFF) >> np.uint64(pad)
            if np.any(self.words[:, -1] & ~mask):
                raise IntegrityPaddingError(self.rows, self.cols)

    @property
    def words_per_row(self) -> int:
        return words_per_row(self.cols)


class IntegrityPaddingError(DomainError):
    def __init__(self, rows, cols):
        super().__init__(
            f"padding bits past column {cols} must be zero ({rows} rows)"
        )


def words_per_row(cols: int) -> int:
    return max(0, -(-cols // WORD_BITS))


def pack_signs(m) -> PackedBinaryMatrix:
    """Pack a {-1,+1} matrix into words.  +1 -> bit set, -1 -> clear.

    Any entry that is not exactly +1.0 or -1.0 raises DomainError,
    naming the first offending index.
    """
    m = as_dense(m, "sign matrix")
    ok = np.abs(m) == 1.0
    if not ok.all():
        i, j = np.argwhere(~ok)[0]
        raise DomainError(
            f"entry at ({i}, {j}) is {m[i, j]!r}, expected exactly +1 or -1"
        )
    return pack_bits(m > 0)


def pack_bits(bits) -> PackedBinaryMatrix:
    """Pack a boolean matrix (True == +1) into a PackedBinaryMatrix."""
    bits = np.asarray(bits, dtype=bool)
    if bits.ndim != 2:
        raise ShapeError(f"bit matrix must be 2-D, got ndim={bits.ndim}")
    rows, cols = bits.shape
    wpr = words_per_row(cols)
    packed = np.packbits(bits, axis=1, bitorder="little")
    byts = np.zeros((rows, wpr * 8), dtype=np.uint8)
    byts[:, : packed.shape[1]] = packed
    words = byts.view(np.uint64)
    return PackedBinaryMatrix(rows, cols, words)


def unpack_signs(p: PackedBinaryMatrix) -> np.ndarray:
    """Inverse of pack_signs: returns a float64 {-1,+1} matrix."""
    return np.where(unpack_bits(p), 1.0, -1.0)


def unpack_bits(p: PackedBinaryMatrix) -> np.ndarray:
    """Unpack to a boolean matrix of shape (rows, cols)."""
    byts = p.words.view(np.uint8)
    bits = np.unpackbits(byts, axis=1, bitorder="little")
    return bits[:, : p.cols].astype(bool)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Hamming distance between two packed rows (1-D uint64 word arrays).

    The rows must pack the same number of columns, i.e. have equal word
    counts; padding bits are zero on both sides by construction.
    """
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ShapeError(f"packed rows differ in length: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_matrix(a: PackedBinaryMatrix, b: PackedBinaryMatrix) -> np.ndarray:
    """All-pairs Hamming distances; entry (i, k) is d_H(a row i, b row k)."""
    if a.cols != b.cols:
        raise ShapeError(f"column counts differ: {a.cols} vs {b.cols}")
    x = a.words[:, None, :] ^ b.words[None, :, :]
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def packed_rows_to_bytes(p: PackedBinaryMatrix) -> np.ndarray:
    """Each row as ceil(cols/8) bytes, LSB-first (serialization layout)."""
    nbytes = -(-p.cols // 8)
    return p.words.view(np.uint8)[:, :nbytes].copy()


def packed_rows_from_bytes(data: np.ndarray, rows: int, cols: int) -> PackedBinaryMatrix:
    """Rebuild a PackedBinaryMatrix from per-row byte strings."""
    nbytes = -(-cols // 8)
    data = np.asarray(data, dtype=np.uint8).reshape(rows, nbytes)
    wpr = words_per_row(cols)
    byts = np.zeros((rows, wpr * 8), dtype=np.uint8)
    byts[:, :nbytes] = data
    return PackedBinaryMatrix(rows, cols, byts.view(np.uint64))
