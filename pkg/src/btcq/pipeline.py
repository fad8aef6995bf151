"""End-to-end weight compression.

`btc_quantize` chains the stages: optionally pull the weights back
through a fused activation transform, center and binarize each row
(with ARB refinement), compress the full sign matrix through a binary
codebook, and finally overlay a second binarization of the remaining
residual at salient positions.  The codebook therefore always covers
the whole n*m stream — saliency only steers where its loss is measured
and where the overlay spends its extra bits — so the index count stays
at ceil(n*m / v) regardless of configuration.

The stage errors are disjoint by construction (codebook loss lives on
non-salient positions, overlay error on salient ones), so the report's
total matches the reconstruction error of `dequantize` up to summation
order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import binarize, codebook as codebook_mod, lutgemm, matrix, transform
from .binarize import BinarizedRowSet, SalientOverlay, SplitGrouping
from .codebook import BinaryCodebook
from .errors import ConfigError, IntegrityError, ShapeError
from .lutgemm import LutGemmPlan
from .transform import AuxLossConfig, TransformPair


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class QuantizeConfig:
    v: int = 16
    c: int = 512
    salient_fraction: float = 0.0
    split_points: int = 2
    arb_iters: int = 15
    codebook_iters: int = 5
    split_grid: int = 64
    col_stats: np.ndarray | None = None
    codebook_init: str = "frequency"
    freq_threshold: float = 0.01
    seed: int | None = None

    def __post_init__(self):
        if self.v < 1:
            raise ConfigError(f"v must be >= 1, got {self.v}")
        if self.c < 1:
            raise ConfigError(f"c must be >= 1, got {self.c}")
        if not 0.0 <= self.salient_fraction <= 1.0:
            raise ConfigError(
                f"salient_fraction must be in [0, 1], got {self.salient_fraction}"
            )
        if self.split_points not in (0, 1, 2, 3):
            raise ConfigError(
                f"split_points must be 0 (off) or 1..3, got {self.split_points}"
            )
        if self.arb_iters < 0:
            raise ConfigError(f"arb_iters must be >= 0, got {self.arb_iters}")
        if self.codebook_iters < 1:
            raise ConfigError(
                f"codebook_iters must be >= 1, got {self.codebook_iters}"
            )


@dataclass(eq=False)
class QuantizedLayer:
    """Complete compressed form of one n x m weight matrix.

    `indices` maps every length-v vector of the row-major sign stream
    (padded to a multiple of v) to a codebook row, so it always holds
    ceil(n*m / v) entries.  `report` carries per-stage diagnostics for
    the run that produced the layer; it is not serialized.
    """

    n: int
    m: int
    v: int
    codebook: BinaryCodebook
    indices: np.ndarray
    alpha: np.ndarray
    mu: np.ndarray
    overlay: SalientOverlay | None = None
    transform: TransformPair | None = None
    grouping: SplitGrouping | None = None
    report: dict | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ShapeError(f"layer dims must be positive, got {self.n}x{self.m}")
        if self.v != self.codebook.v:
            raise ShapeError(
                f"layer v {self.v} != codebook vector length {self.codebook.v}"
            )
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.ndim != 1:
            raise ShapeError("indices must be a flat vector")
        expected = _ceil_div(self.n * self.m, self.v)
        if len(self.indices) != expected:
            raise IntegrityError(
                f"{len(self.indices)} indices cannot cover {self.n}x{self.m} "
                f"weights in vectors of {self.v} (need {expected})"
            )
        if len(self.indices) and (
            self.indices.min() < 0 or self.indices.max() >= self.codebook.c
        ):
            raise IntegrityError(
                f"index {int(self.indices.max())} out of range for "
                f"codebook of {self.codebook.c}"
            )
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        if self.alpha.shape != (self.n,) or self.mu.shape != (self.n,):
            raise ShapeError("alpha and mu must have one entry per row")
        if self.overlay is not None and self.overlay.mask.shape != (self.n, self.m):
            raise ShapeError("overlay mask shape does not match the layer")
        if self.transform is not None and self.transform.d != self.m:
            raise ShapeError(
                f"fused transform covers {self.transform.d} columns, layer has {self.m}"
            )

    @property
    def c(self) -> int:
        return self.codebook.c

    @property
    def index_count(self) -> int:
        return len(self.indices)

    def sign_stream(self) -> np.ndarray:
        """The stored sign vectors, one codebook row per index."""
        return matrix.unpack_signs(self.codebook.C)[self.indices]


def btc_quantize(w, transform_pair: TransformPair | None = None,
                 cfg: QuantizeConfig | None = None) -> QuantizedLayer:
    """Compress a weight matrix into a QuantizedLayer.

    When a transform pair is given the weights are first mapped into the
    transformed space (so that transformed activations times the stored
    weights reproduce the original product) and everything downstream —
    including the report's error terms — lives in that space.
    """
    if cfg is None:
        cfg = QuantizeConfig()
    w = matrix.as_dense(w, "W")
    work = (
        transform.inverse_transform_weight(w, transform_pair)
        if transform_pair is not None
        else w
    )
    n, m = work.shape

    centered, mu0 = binarize.row_center(work)
    mask = binarize.select_salient(centered, cfg.col_stats, cfg.salient_fraction)
    grouping = None
    if cfg.split_points > 0:
        grouping = binarize.search_split_points(
            np.abs(centered[~mask]), cfg.split_points, cfg.split_grid
        )

    state = binarize.binarize_rowwise(centered)
    state = BinarizedRowSet(state.B, state.alpha, mu0, state.alpha_clamps)
    state = binarize.arb_refine(work, state, cfg.arb_iters)

    non_salient = ~mask
    pre_err = float(np.sum((work - state.dequantize())[non_salient] ** 2))

    b_full = matrix.unpack_signs(state.B)
    result = codebook_mod.optimize_codebook(
        b_full,
        work,
        non_salient,
        state.mu,
        state.alpha,
        cfg.v,
        cfg.c,
        max_iter=cfg.codebook_iters,
        freq_threshold=cfg.freq_threshold,
        init=cfg.codebook_init,
        seed=cfg.seed,
    )

    overlay = None
    overlay_err = 0.0
    if cfg.salient_fraction > 0.0:
        residual = work - (
            state.alpha[:, None] * result.b_hat + state.mu[:, None]
        )
        overlay = binarize.residual_binarize(residual, mask)
        overlay_err = float(
            np.sum((residual - overlay.contribution())[mask] ** 2)
        )

    report = {
        "pre_codebook_error": pre_err,
        "post_codebook_error": result.loss,
        "overlay_error": overlay_err,
        "total_error": result.loss + overlay_err,
        "codebook_exact": result.exact,
        "alpha_clamps": state.alpha_clamps,
        "em_steps": len(result.trace),
    }
    if grouping is not None:
        report["grouping_error"] = grouping.error

    return QuantizedLayer(
        n,
        m,
        cfg.v,
        result.codebook,
        result.assignment,
        state.alpha,
        state.mu,
        overlay=overlay,
        transform=transform_pair,
        grouping=grouping,
        report=report,
    )


def dequantize(layer: QuantizedLayer) -> np.ndarray:
    """Reconstruct alpha * B_hat + mu (+ overlay) from the stored form.

    When the layer carries a fused transform the result lives in the
    transformed space: pair it with `apply_transform`-ed activations to
    recover the original product.
    """
    z = layer.indices
    if len(z) and (z.min() < 0 or z.max() >= layer.c):
        raise IntegrityError(
            f"index {int(z.max())} references a missing codebook row"
        )
    dense_cb = matrix.unpack_signs(layer.codebook.C)
    flat = dense_cb[z].reshape(-1)[: layer.n * layer.m]
    b_hat = flat.reshape(layer.n, layer.m)
    out = layer.alpha[:, None] * b_hat + layer.mu[:, None]
    if layer.overlay is not None:
        out = out + layer.overlay.contribution()
    return out


def plan_from_layer(layer: QuantizedLayer, mu_seg: int = 8) -> LutGemmPlan:
    """Lay the layer's indices out as the per-(row, block) matrix the
    table-lookup kernel consumes.  Needs whole blocks per row."""
    if layer.m % layer.v:
        raise ConfigError(
            f"layer columns {layer.m} not divisible by v {layer.v}; "
            "the lookup kernel needs whole blocks per row"
        )
    index = layer.indices.reshape(layer.n, layer.m // layer.v)
    return lutgemm.make_plan(layer.codebook, index, mu_seg)


def layer_matmul(x, layer: QuantizedLayer, mu_seg: int = 8) -> np.ndarray:
    """X times the reconstructed weights, via table lookups.

    Equals matmul(X, dequantize(layer).T) up to float accumulation
    order; the overlay contribution is added densely on top of the
    kernel output.
    """
    plan = plan_from_layer(layer, mu_seg)
    y = lutgemm.lut_gemm(x, plan, layer.codebook, layer.alpha, layer.mu)
    if layer.overlay is not None:
        y = y + matrix.as_dense(x, "X") @ layer.overlay.contribution().T
    return y


def effective_bits(v: int, c: int, n: int, m: int) -> dict:
    """Storage accounting for the codebook + index representation.

    Index entries take ceil(log2 c) bits each and there are n*m/v of
    them; the codebook itself adds v*c bits amortized over all weights.
    """
    if v < 1:
        raise ConfigError(f"v must be >= 1, got {v}")
    if c < 1:
        raise ConfigError(f"c must be >= 1, got {c}")
    if n < 1 or m < 1:
        raise ConfigError(f"dims must be positive, got {n}x{m}")
    index_bits = (c - 1).bit_length()
    codebook_bits = v * c
    total_bits = codebook_bits + index_bits * n * m / v
    return {
        "index_bits_per_weight": index_bits / v,
        "codebook_bits": codebook_bits,
        "total_bits": total_bits,
        "bits_per_weight": total_bits / (n * m),
    }


def nm_mask_bits(keep: int, group: int) -> float:
    """Bits per weight of an n:m sparsity mask plus its kept signs:
    (keep + ceil(log2 C(group, keep))) / group."""
    if not 0 < keep <= group:
        raise ConfigError(f"need 0 < keep <= group, got keep={keep} group={group}")
    mask_bits = (math.comb(group, keep) - 1).bit_length()
    return (keep + mask_bits) / group


@dataclass
class FitConfig:
    """Hyperparameters of the transform fit (quantizer settings plus
    the two optimizer phases)."""

    v: int = 16
    c: int = 256
    arb_iters: int = 15
    codebook_iters: int = 5
    lambda1: float = 1e-2
    lambda2: float = 1e-1
    top_k: int = 16
    sign_sweeps: int = 2
    p_iters: int = 2
    p_lr: float = 1e-3
    fd_eps: float = 1e-4


@dataclass
class TransformFitResult:
    pair: TransformPair
    sign_trace: list
    p_trace: list
    flips: int
    steps: int

    @property
    def trace(self) -> list:
        # the P phase re-evaluates the sign phase's final pair, so its
        # first entry duplicates the sign trace's last
        return self.sign_trace + self.p_trace[1:]

    @property
    def initial(self) -> float:
        return self.trace[0]

    @property
    def final(self) -> float:
        return self.trace[-1]


def fit_transform(w, x_calib, cfg: FitConfig | None = None) -> TransformFitResult:
    """Fit a sign-flip + Kronecker-factor transform for one layer.

    Coordinate-descent on the sign vector first, then finite-difference
    descent on the two factors; both phases score candidates with the
    full quantize-and-compare block objective on the calibration batch,
    so the concatenated trace is non-increasing end to end.
    """
    if cfg is None:
        cfg = FitConfig()
    w = matrix.as_dense(w, "W")
    x_calib = matrix.as_dense(x_calib, "X_calib")
    n, m = w.shape
    if x_calib.shape[1] != m:
        raise ShapeError(
            f"calibration width {x_calib.shape[1]} != weight columns {m}"
        )

    stream_rows = _ceil_div(n * m, cfg.v)
    aux = AuxLossConfig(cfg.lambda1, cfg.lambda2, min(cfg.top_k, stream_rows))
    qcfg = QuantizeConfig(
        v=cfg.v,
        c=cfg.c,
        salient_fraction=0.0,
        split_points=0,
        arb_iters=cfg.arb_iters,
        codebook_iters=cfg.codebook_iters,
    )

    def layer_fn(xs):
        return xs @ w.T

    def layer_fn_quantized(xs, pair):
        layer = btc_quantize(w, pair, qcfg)
        out = transform.apply_transform(xs, pair) @ dequantize(layer).T
        return out, layer.sign_stream()

    def objective(pair):
        return transform.block_objective(
            layer_fn, layer_fn_quantized, x_calib, pair, aux
        )

    t0 = transform.identity_pair(m)
    sign_result = transform.optimize_sign_flips(
        lambda s: objective(TransformPair(s, t0.p1, t0.p2)),
        t0.sigma,
        cfg.sign_sweeps,
    )
    t1 = TransformPair(sign_result.sigma, t0.p1, t0.p2)
    p_result = transform.optimize_P(
        objective, t1, lr=cfg.p_lr, iters=cfg.p_iters, fd_eps=cfg.fd_eps
    )
    return TransformFitResult(
        p_result.pair,
        sign_result.trace,
        p_result.trace,
        sign_result.flips,
        p_result.steps,
    )
