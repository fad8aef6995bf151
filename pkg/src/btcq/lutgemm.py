"""Table-lookup GEMM over codebook-compressed sign weights.

With every weight row built from length-v codebook patterns, the
product y = X @ W_hat.T factors through two lookup stages:

  Stage I   per input row and block j, a signed-sum table over mu-bit
            activation segments: LUT[s] = sum_t sigma_t(s) * x[t],
            built by sign-selected additions (no multiplies);
  Stage II  per block, one dot product per centroid via key gathers:
            CBLUT_j[k] = sum_p LUT_{j,p}[key[k,p]] = <x_j, C_k>.

The raw output is then an index gather plus additions,
raw_r = sum_j CBLUT_j[I[r,j]], and the dequantization identity
X(alpha*B_hat + mu)^T = alpha ⊙ (X B_hat^T) + (sum x) * mu^T supplies a
final scale-and-shift epilogue per output element.  CBLUT tables are
built once per input row and shared across all output rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from time import perf_counter_ns

import numpy as np

from . import matrix
from .codebook import BinaryCodebook
from .errors import ConfigError, ShapeError

MAX_SEGMENT_BITS = 16


@dataclass
class ActivationLut:
    """Stage-I tables for one activation block: tables[p][s] is the
    signed sum of segment p under the sign pattern s (bit t set -> +x[t])."""

    mu_seg: int
    tables: np.ndarray  # (P, 2^mu_seg)


def build_activation_lut(x_block, mu_seg: int) -> ActivationLut:
    """Signed-sum tables for every mu-bit pattern of each segment.

    Built by accumulating sign-selected segment entries, so
    LUT[s] == -LUT[~s] holds exactly (negation is exact in IEEE-754).
    Plans restrict mu_seg to {4, 8}; the builder itself accepts any
    1..16 so tiny tables remain enumerable in tests.
    """
    x_block = np.asarray(x_block, dtype=np.float64).ravel()
    if not 1 <= mu_seg <= MAX_SEGMENT_BITS:
        raise ConfigError(f"mu_seg must be in [1, {MAX_SEGMENT_BITS}]")
    if len(x_block) % mu_seg:
        raise ConfigError(
            f"block length {len(x_block)} not divisible by mu_seg {mu_seg}"
        )
    segments = x_block.reshape(-1, mu_seg)
    codes = np.arange(2**mu_seg)
    tables = np.zeros((segments.shape[0], 2**mu_seg))
    for t in range(mu_seg):
        plus = (codes >> t) & 1 == 1
        term = segments[:, t][:, None]
        tables += np.where(plus[None, :], term, -term)
    return ActivationLut(mu_seg, tables)


def codebook_keys(cb: BinaryCodebook, mu_seg: int) -> np.ndarray:
    """mu-bit segment codes per centroid; decode_keys inverts exactly."""
    if cb.v % mu_seg:
        raise ConfigError(f"v {cb.v} not divisible by mu_seg {mu_seg}")
    bits = matrix.unpack_bits(cb.C).reshape(cb.c, -1, mu_seg)
    weights = 1 << np.arange(mu_seg)
    return (bits * weights).sum(axis=2).astype(np.uint32)


def decode_keys(keys: np.ndarray, mu_seg: int, v: int) -> BinaryCodebook:
    """Rebuild the codebook a key matrix encodes."""
    keys = np.asarray(keys)
    bits = (keys[:, :, None] >> np.arange(mu_seg)) & 1
    return BinaryCodebook(matrix.pack_bits(bits.reshape(len(keys), v) == 1))


def build_cblut(keys: np.ndarray, lut: ActivationLut) -> np.ndarray:
    """Per-centroid dot products with this block: gather one table entry
    per segment and add."""
    p_count = lut.tables.shape[0]
    if keys.shape[1] != p_count:
        raise ShapeError(
            f"keys have {keys.shape[1]} segments, tables have {p_count}"
        )
    gathered = lut.tables[np.arange(p_count)[:, None], keys.T]  # (P, c)
    return gathered.sum(axis=0)


@dataclass
class LutGemmPlan:
    """Everything static about one weight matrix: pattern keys and the
    per-(row, block) centroid index matrix.  Columns count n == blocks*v."""

    v: int
    mu_seg: int
    keys: np.ndarray  # (c, P) uint32
    index: np.ndarray  # (m, n // v) intp

    def __post_init__(self):
        if self.mu_seg not in (4, 8):
            raise ConfigError(f"mu_seg must be 4 or 8, got {self.mu_seg}")
        if self.v % self.mu_seg:
            raise ConfigError(
                f"v {self.v} not divisible by mu_seg {self.mu_seg}"
            )
        if self.keys.shape[1] != self.v // self.mu_seg:
            raise ShapeError("key matrix width != v / mu_seg")
        if self.index.size and self.index.max() >= len(self.keys):
            raise ShapeError("index matrix references a missing centroid")

    @property
    def n(self) -> int:
        return self.index.shape[1] * self.v

    @property
    def out_rows(self) -> int:
        return self.index.shape[0]


def make_plan(cb: BinaryCodebook, index, mu_seg: int = 8) -> LutGemmPlan:
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 2:
        raise ShapeError("index matrix must be 2-D (rows x blocks)")
    return LutGemmPlan(cb.v, mu_seg, codebook_keys(cb, mu_seg), index)


def lut_gemm(x, plan: LutGemmPlan, cb: BinaryCodebook, alpha, mu_bias) -> np.ndarray:
    """y = alpha ⊙ (X B_hat^T) + (sum x) * mu via table lookups.

    B_hat row r is the concatenation C[I[r,0]], C[I[r,1]], ...; the raw
    accumulation is gathers and additions only, then each output gets
    one alpha scale and one mu * sum(x) correction.
    """
    x = matrix.as_dense(x, "X")
    alpha = np.asarray(alpha, dtype=np.float64)
    mu_bias = np.asarray(mu_bias, dtype=np.float64)
    if cb.v != plan.v:
        raise ShapeError(f"codebook v {cb.v} != plan v {plan.v}")
    if cb.c != len(plan.keys):
        raise ShapeError(f"codebook c {cb.c} != plan c {len(plan.keys)}")
    if x.shape[1] != plan.n:
        raise ShapeError(f"X has {x.shape[1]} cols, plan covers {plan.n}")
    m = plan.out_rows
    if alpha.shape != (m,) or mu_bias.shape != (m,):
        raise ShapeError("alpha and mu_bias must have one entry per output row")

    blocks = plan.index.shape[1]
    block_range = np.arange(blocks)
    out = np.empty((x.shape[0], m))
    for b in range(x.shape[0]):
        row = x[b]
        cblut = np.empty((blocks, cb.c))
        for j in range(blocks):
            lut = build_activation_lut(row[j * plan.v : (j + 1) * plan.v], plan.mu_seg)
            cblut[j] = build_cblut(plan.keys, lut)
        raw = cblut[block_range[None, :], plan.index].sum(axis=1)
        out[b] = alpha * raw + mu_bias * row.sum()
    return out


def sign_gemm(x, b_hat: matrix.PackedBinaryMatrix, alpha, mu_bias) -> np.ndarray:
    """Reference GEMM straight off the packed sign bits.

    Uses <x, b> = 2 * (sum of x where the bit is set) - sum(x), so the
    packed representation is consumed without dequantizing to +-1.
    """
    x = matrix.as_dense(x, "X")
    if x.shape[1] != b_hat.cols:
        raise ShapeError(f"X has {x.shape[1]} cols, weights have {b_hat.cols}")
    bits = matrix.unpack_bits(b_hat).astype(np.float64)
    positive = x @ bits.T
    row_sum = x.sum(axis=1, keepdims=True)
    raw = 2.0 * positive - row_sum
    return np.asarray(alpha) * raw + np.asarray(mu_bias) * row_sum


def bench_lut_vs_dense(sizes, reps: int, seed: int = 0):
    """Median wall-clock per kernel on synthetic layers.

    Returns (size_label, kernel_name, median_ns) rows: three kernels
    per size triple (batch, out_rows, cols); purely informational.
    """
    rows = []
    if reps <= 0:
        return rows
    rng = np.random.default_rng(seed)
    v, c, mu_seg = 16, 256, 8
    for batch, m, n in sizes:
        if n % v:
            raise ConfigError(f"bench size n={n} must be a multiple of {v}")
        cents = np.where(rng.random((c, v)) < 0.5, -1.0, 1.0)
        cb = BinaryCodebook(matrix.pack_signs(cents))
        index = rng.integers(0, c, size=(m, n // v))
        alpha = rng.uniform(0.5, 1.5, m)
        mu_bias = rng.standard_normal(m) * 0.01
        x = rng.standard_normal((batch, n))
        plan = make_plan(cb, index, mu_seg)
        b_hat_dense = cents[index].reshape(m, n)
        b_hat = matrix.pack_signs(b_hat_dense)
        w_hat = alpha[:, None] * b_hat_dense + mu_bias[:, None]

        kernels = (
            ("dense", lambda: matrix.matmul(x, w_hat)),
            ("sign-gemm", lambda: sign_gemm(x, b_hat, alpha, mu_bias)),
            ("lut-gemm", lambda: lut_gemm(x, plan, cb, alpha, mu_bias)),
        )
        label = f"{batch}x{m}x{n}"
        for name, fn in kernels:
            times = []
            for _ in range(reps):
                start = perf_counter_ns()
                fn()
                times.append(perf_counter_ns() - start)
            rows.append((label, name, int(np.median(times))))
    return rows
