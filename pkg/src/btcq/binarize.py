"""Row-wise sign binarization with refined scale/bias, salient-residual
overlays, and split-point grouping of weight magnitudes.

A weight row w is approximated as alpha * b + mu with b in {-1,+1}^m.
Centering by the row mean and taking alpha = mean|w - mu|, b = sign(w - mu)
minimizes the squared error for that parameterization; `arb_refine` then
alternates coordinate updates of mu, alpha and b, which never increases
the objective.  Salient positions (large magnitude x column statistic)
can be given a second, dedicated binarization of their residual.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import matrix
from .errors import ConfigError, DomainError, ShapeError
from .matrix import PackedBinaryMatrix

log = logging.getLogger(__name__)

U32_MAX = 2**32 - 1


def sign_pm1(x) -> np.ndarray:
    """Sign with the fixed convention sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


@dataclass
class BinarizedRowSet:
    """Per-row binarization: row i dequantizes to alpha[i]*B[i,:] + mu[i]."""

    B: PackedBinaryMatrix
    alpha: np.ndarray  # (n,), >= 0
    mu: np.ndarray  # (n,)
    alpha_clamps: int = 0  # times a refined scale was clamped up to zero

    def dequantize(self) -> np.ndarray:
        signs = matrix.unpack_signs(self.B)
        return self.alpha[:, None] * signs + self.mu[:, None]


@dataclass
class SalientOverlay:
    """Secondary binarization covering only mask-true positions.

    Dequantization adds alpha2[i] * B2[i,j] at salient positions and 0
    elsewhere.  Rows without any salient position carry alpha2 = 0 and
    an all-(+1) B2 row (deterministic filler).
    """

    mask: np.ndarray  # (n, m) bool
    B2: PackedBinaryMatrix
    alpha2: np.ndarray  # (n,)

    def contribution(self) -> np.ndarray:
        signs = matrix.unpack_signs(self.B2)
        return np.where(self.mask, self.alpha2[:, None] * signs, 0.0)

    @property
    def count(self) -> int:
        return int(self.mask.sum())


@dataclass
class SplitGrouping:
    """Magnitude thresholds partitioning values into len(thresholds)+1
    groups; group_of[i] counts thresholds strictly below value i (so a
    value equal to a threshold joins the group below it)."""

    thresholds: np.ndarray  # strictly increasing magnitudes
    group_of: np.ndarray | None  # per-value group index (in-memory only)
    error: float  # total squared error of group-wise binarization
    reduced: bool = False  # true when fewer groups than requested

    @property
    def group_count(self) -> int:
        return len(self.thresholds) + 1


def row_center(w):
    """Subtract each row's mean.  Returns (centered, means)."""
    w = matrix.as_dense(w, "W")
    if w.size == 0:
        raise ShapeError("W must be nonempty")
    mu = w.mean(axis=1)
    return w - mu[:, None], mu


def binarize_rowwise(w_tilde) -> BinarizedRowSet:
    """Optimal (alpha, B) per row for already-centered input.

    alpha[i] is the mean absolute value of row i, B = sign(row) with
    sign(0) = +1; mu comes back as zero.
    """
    w_tilde = matrix.as_dense(w_tilde, "W_tilde")
    alpha = np.mean(np.abs(w_tilde), axis=1)
    b = sign_pm1(w_tilde)
    return BinarizedRowSet(matrix.pack_signs(b), alpha, np.zeros(len(alpha)))


def arb_refine(w, state: BinarizedRowSet, iters: int) -> BinarizedRowSet:
    """Alternately refine (mu, alpha, B) for `iters` rounds.

    Each round applies, in order:
      mu    += row mean of the residual W - alpha*B - mu
      alpha  = (1/m) sum_j B[i,j] * (W[i,j] - mu[i])   (clamped at 0)
      B      = sign(W - mu)
    Every update is a coordinate minimizer, so ||W - alpha*B - mu||_F^2
    never increases.  Negative refined scales are clamped to zero and
    counted in the returned state's alpha_clamps.
    """
    w = matrix.as_dense(w, "W")
    if not (0 <= iters <= U32_MAX):
        raise ConfigError(f"iters must be in [0, {U32_MAX}], got {iters}")
    n, m = w.shape
    if state.B.rows != n or state.B.cols != m:
        raise ShapeError(
            f"state is {state.B.rows}x{state.B.cols}, W is {n}x{m}"
        )
    if iters == 0:
        return state

    alpha = state.alpha.astype(np.float64).copy()
    mu = state.mu.astype(np.float64).copy()
    signs = matrix.unpack_signs(state.B)
    clamps = state.alpha_clamps
    for _ in range(iters):
        resid = w - alpha[:, None] * signs - mu[:, None]
        mu = mu + resid.mean(axis=1)
        alpha = np.mean(signs * (w - mu[:, None]), axis=1)
        negative = alpha < 0
        if negative.any():
            clamps += int(negative.sum())
            alpha[negative] = 0.0
        signs = sign_pm1(w - mu[:, None])
    if clamps > state.alpha_clamps:
        log.warning(
            "arb_refine clamped %d negative scale(s) to zero",
            clamps - state.alpha_clamps,
        )
    return BinarizedRowSet(matrix.pack_signs(signs), alpha, mu, clamps)


def binarization_objective(w, state: BinarizedRowSet) -> float:
    """||W - alpha*B - mu||_F^2 for a given state."""
    w = matrix.as_dense(w, "W")
    return matrix.frobenius_norm_sq(w - state.dequantize())


def residual_binarize(r, mask) -> SalientOverlay:
    """Binarize the residual over mask-true positions, one scale per row."""
    r = matrix.as_dense(r, "R")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != r.shape:
        raise ShapeError(f"mask shape {mask.shape} != R shape {r.shape}")
    counts = mask.sum(axis=1)
    masked_abs = np.where(mask, np.abs(r), 0.0)
    alpha2 = np.divide(
        masked_abs.sum(axis=1),
        counts,
        out=np.zeros(r.shape[0]),
        where=counts > 0,
    )
    # sign(residual) at salient positions, +1 filler elsewhere
    signs = np.where(mask & (r < 0), -1.0, 1.0)
    return SalientOverlay(mask, matrix.pack_signs(signs), alpha2)


def select_salient(w, col_stats, fraction: float) -> np.ndarray:
    """Mark the top ceil(fraction*m) positions per row.

    Scores are |W[i,j]|^2 * col_stats[j]; ties resolve toward the lower
    column index.  col_stats=None means all-ones (pure magnitude).
    """
    w = matrix.as_dense(w, "W")
    n, m = w.shape
    if col_stats is None:
        col_stats = np.ones(m)
    col_stats = np.asarray(col_stats, dtype=np.float64)
    if col_stats.shape != (m,):
        raise ShapeError(f"col_stats must have length {m}")
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"fraction must be in [0, 1], got {fraction}")
    k = math.ceil(fraction * m)
    mask = np.zeros((n, m), dtype=bool)
    if k == 0:
        return mask
    scores = (w * w) * col_stats
    # stable sort on -score keeps earlier columns first among ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    np.put_along_axis(mask, order, True, axis=1)
    return mask


def search_split_points(values, n_points: int, grid: int = 64) -> SplitGrouping:
    """Grid-search magnitude thresholds that minimize group-wise
    binarization error.

    Candidates sit at `grid` evenly spaced percentiles of the values.
    Each candidate set partitions the magnitudes into groups; a group
    binarizes to its mean magnitude, contributing its squared deviation
    sum.  The arg-min set is returned; among ties the lexicographically
    lowest threshold set wins.  When fewer distinct candidates exist
    than requested points, the search falls back to fewer groups and
    flags the result.
    """
    if n_points not in (1, 2, 3):
        raise ConfigError(f"n_points must be in {{1,2,3}}, got {n_points}")
    if grid < 2:
        raise ConfigError(f"grid must be >= 2, got {grid}")
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size and values.min() < 0:
        raise DomainError("values are magnitudes and must be non-negative")
    if values.size == 0:
        return SplitGrouping(np.empty(0), np.empty(0, dtype=np.intp), 0.0, True)

    candidates = np.unique(np.percentile(values, np.linspace(0, 100, grid)))
    n_eff = min(n_points, len(candidates))
    reduced = n_eff < n_points

    sorted_vals = np.sort(values)
    prefix1 = np.concatenate([[0.0], np.cumsum(sorted_vals)])
    prefix2 = np.concatenate([[0.0], np.cumsum(sorted_vals**2)])
    bound_of = np.searchsorted(sorted_vals, candidates, side="right")

    combos = np.array(
        list(itertools.combinations(range(len(candidates)), n_eff)),
        dtype=np.intp,
    )
    bounds = bound_of[combos]  # (n_combo, n_eff)
    lows = np.hstack([np.zeros((len(combos), 1), dtype=np.intp), bounds])
    highs = np.hstack([bounds, np.full((len(combos), 1), len(values))])
    span = highs - lows
    sums = prefix1[highs] - prefix1[lows]
    sq_sums = prefix2[highs] - prefix2[lows]
    seg_err = sq_sums - np.divide(
        sums * sums, span, out=np.zeros_like(sums), where=span > 0
    )
    total = seg_err.sum(axis=1)
    best = int(np.argmin(total))  # ties: first (lowest thresholds) wins
    thresholds = candidates[combos[best]]
    group_of = np.searchsorted(thresholds, values, side="left")
    return SplitGrouping(thresholds, group_of, float(total[best]), reduced)


@dataclass
class BinarizeConfig:
    salient_fraction: float = 0.0
    split_points: int = 2
    arb_iters: int = 15
    split_grid: int = 64
    col_stats: np.ndarray | None = None


@dataclass
class LayerBinarization:
    state: BinarizedRowSet
    overlay: SalientOverlay
    grouping: SplitGrouping
    error: float  # ||W - dequantized||_F^2 including the overlay

    def dequantize(self) -> np.ndarray:
        return self.state.dequantize() + self.overlay.contribution()


def quantize_layer_binary(w, cfg: BinarizeConfig) -> LayerBinarization:
    """Center, pick salient positions, group the rest by magnitude,
    binarize, refine, and overlay the salient residual."""
    w = matrix.as_dense(w, "W")
    centered, mu0 = row_center(w)
    mask = select_salient(centered, cfg.col_stats, cfg.salient_fraction)

    non_salient = np.abs(centered[~mask])
    if cfg.split_points > 0:
        grouping = search_split_points(
            non_salient, cfg.split_points, cfg.split_grid
        )
    else:
        grouping = SplitGrouping(
            np.empty(0),
            np.zeros(non_salient.size, dtype=np.intp),
            float(
                np.sum((non_salient - non_salient.mean()) ** 2)
                if non_salient.size
                else 0.0
            ),
            False,
        )

    state = binarize_rowwise(centered)
    state = BinarizedRowSet(state.B, state.alpha, mu0)
    state = arb_refine(w, state, cfg.arb_iters)

    residual = w - state.dequantize()
    overlay = residual_binarize(residual, mask)
    error = matrix.frobenius_norm_sq(
        w - state.dequantize() - overlay.contribution()
    )
    return LayerBinarization(state, overlay, grouping, error)
