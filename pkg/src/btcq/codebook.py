"""Binary codebook compression of sign matrices.

A masked sign matrix (entries -1/0/+1, zeros = excluded positions) is
flattened row-major, padded with alternating +1,-1,... and cut into
length-v vectors.  K-means-style EM then runs entirely in Hamming
space: the E-step assigns each vector to its nearest centroid via
XOR+popcount (4 * d_H equals the squared Euclidean distance between
+-1 vectors), the M-step takes per-coordinate sign majorities with
ties resolved to +1.  Both steps are exact minimizers, so the
clustering objective never increases; this is checked on every run.

When the stream has at most c distinct vectors the codebook is the
set of distinct vectors itself and reconstruction is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import matrix
from .errors import ConfigError, DomainError, IntegrityError, ShapeError
from .matrix import PackedBinaryMatrix


@dataclass
class BinaryVectorSet:
    """Length-v sign vectors cut from a masked matrix, plus the metadata
    needed to invert the packing."""

    vectors: PackedBinaryMatrix  # (N, v)
    pad_len: int  # trailing alternating-pad elements, < v (0 when N == 0)
    origin_mask: np.ndarray  # bool matrix of the source positions

    def __post_init__(self):
        true_count = int(self.origin_mask.sum())
        n, v = self.vectors.rows, self.vectors.cols
        if n * v != true_count + self.pad_len:
            raise IntegrityError(
                f"{n} vectors of length {v} cannot cover {true_count} "
                f"source positions with pad {self.pad_len}"
            )
        if self.pad_len and not 0 <= self.pad_len < v:
            raise IntegrityError(f"pad_len {self.pad_len} out of range")

    @property
    def count(self) -> int:
        return self.vectors.rows


@dataclass
class BinaryCodebook:
    C: PackedBinaryMatrix  # (c, v)

    def __post_init__(self):
        if self.C.rows < 1:
            raise ConfigError("codebook needs at least one centroid")

    @property
    def c(self) -> int:
        return self.C.rows

    @property
    def v(self) -> int:
        return self.C.cols


# An assignment is a plain integer array z with z[i] in [0, c).


def weight_to_vector(b_masked, v: int) -> BinaryVectorSet:
    """Cut the non-zero entries of a {-1,0,+1} matrix into v-vectors.

    Entries are taken in row-major order; the tail is padded with
    +1,-1,+1,... to reach a multiple of v.  Zeros mark excluded
    positions and are recorded in the origin mask, not in the stream.
    """
    if v < 1:
        raise ConfigError(f"v must be >= 1, got {v}")
    b_masked = matrix.as_dense(b_masked, "B_masked")
    valid = np.isin(b_masked, (-1.0, 0.0, 1.0))
    if not valid.all():
        i, j = np.argwhere(~valid)[0]
        raise DomainError(
            f"entry at ({i}, {j}) is {b_masked[i, j]!r}, expected -1, 0 or +1"
        )
    origin_mask = b_masked != 0
    flat = b_masked[origin_mask]  # row-major by construction
    pad_len = (-len(flat)) % v if len(flat) else 0
    if pad_len:
        pads = np.where(np.arange(pad_len) % 2 == 0, 1.0, -1.0)
        flat = np.concatenate([flat, pads])
    vectors = matrix.pack_signs(flat.reshape(-1, v)) if len(flat) else (
        matrix.pack_bits(np.zeros((0, v), dtype=bool))
    )
    return BinaryVectorSet(vectors, pad_len, origin_mask)


def vector_to_weight(vset: BinaryVectorSet) -> np.ndarray:
    """Exact inverse of weight_to_vector: pads dropped, entries returned
    to their origin positions, zeros elsewhere."""
    true_count = int(vset.origin_mask.sum())
    flat = matrix.unpack_signs(vset.vectors).ravel()[:true_count]
    out = np.zeros(vset.origin_mask.shape, dtype=np.float64)
    out[vset.origin_mask] = flat
    return out


def unique_vectors(vset: BinaryVectorSet) -> tuple[PackedBinaryMatrix, np.ndarray]:
    """Distinct patterns with multiplicities.

    Ordered by descending count; ties order by ascending numeric value
    of the packed pattern (words compared most-significant first).
    """
    words = vset.vectors.words
    if words.shape[0] == 0:
        return (
            matrix.PackedBinaryMatrix(0, vset.vectors.cols, words.copy()),
            np.zeros(0, dtype=np.int64),
        )
    uniq, counts = np.unique(words, axis=0, return_counts=True)
    keys = [uniq[:, k] for k in range(uniq.shape[1])] + [-counts]
    order = np.lexsort(tuple(keys))
    return (
        matrix.PackedBinaryMatrix(len(order), vset.vectors.cols, uniq[order]),
        counts[order],
    )


def init_codebook(
    uniq: PackedBinaryMatrix,
    counts,
    c: int,
    freq_threshold: float = 0.01,
    *,
    method: str = "frequency",
    rng: np.random.Generator | None = None,
) -> BinaryCodebook:
    """Pick initial centroids.

    With at most c distinct patterns the codebook is all of them (exact
    mode).  Otherwise `frequency` keeps the top-c by multiplicity after
    dropping patterns rarer than freq_threshold * N — but the filter is
    skipped whenever it would leave fewer than c candidates.  `random`
    samples c distinct patterns instead (appendix-style init); it needs
    an rng.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if uniq.rows == 0:
        raise ConfigError("cannot initialize a codebook from no vectors")
    if c < 1:
        raise ConfigError(f"c must be >= 1, got {c}")
    if uniq.rows <= c:
        return BinaryCodebook(uniq)
    if method == "frequency":
        keep = counts >= freq_threshold * counts.sum()
        pool = np.flatnonzero(keep) if keep.sum() >= c else np.arange(uniq.rows)
        chosen = pool[:c]  # already in canonical (count-descending) order
    elif method == "random":
        if rng is None:
            raise ConfigError("random init requires an rng")
        chosen = np.sort(rng.choice(uniq.rows, size=c, replace=False))
    else:
        raise ConfigError(f"unknown init method {method!r}")
    sub = PackedBinaryMatrix(len(chosen), uniq.cols, uniq.words[chosen])
    return BinaryCodebook(sub)


def assign(vset: BinaryVectorSet, cb: BinaryCodebook) -> np.ndarray:
    """Nearest centroid per vector in Hamming distance; ties -> lowest k."""
    if vset.vectors.cols != cb.v:
        raise ShapeError(
            f"vector length {vset.vectors.cols} != codebook v {cb.v}"
        )
    if vset.count == 0:
        return np.zeros(0, dtype=np.intp)
    distances = matrix.hamming_matrix(vset.vectors, cb.C)
    return np.argmin(distances, axis=1)


def update_centroids(
    vset: BinaryVectorSet, z, codebook: BinaryCodebook
) -> BinaryCodebook:
    """Per-coordinate sign majority per cluster, ties to +1.

    Clusters without members keep their centroid from `codebook`.
    """
    z = np.asarray(z)
    if z.shape != (vset.count,):
        raise ShapeError(f"assignment length {z.shape} != N {vset.count}")
    if vset.count and (z.min() < 0 or z.max() >= codebook.c):
        raise IntegrityError("assignment index out of range")
    dense = matrix.unpack_signs(vset.vectors)
    sums = np.zeros((codebook.c, codebook.v))
    np.add.at(sums, z, dense)
    sizes = np.bincount(z, minlength=codebook.c)
    new_dense = matrix.unpack_signs(codebook.C)
    nonempty = sizes > 0
    new_dense[nonempty] = np.where(sums[nonempty] >= 0, 1.0, -1.0)
    return BinaryCodebook(matrix.pack_signs(new_dense))


def clustering_objective(vset: BinaryVectorSet, cb: BinaryCodebook, z) -> int:
    """Total Hamming distance between vectors and their centroids."""
    if vset.count == 0:
        return 0
    gathered = cb.C.words[np.asarray(z)]
    return int(np.bitwise_count(vset.vectors.words ^ gathered).sum())


def reconstruct(cb: BinaryCodebook, z, origin: BinaryVectorSet) -> np.ndarray:
    """Gather centroids by assignment and invert the packing."""
    z = np.asarray(z)
    if z.size and (z.min() < 0 or z.max() >= cb.c):
        raise IntegrityError(
            f"assignment references centroid {int(z.max())} of {cb.c}"
        )
    rows = PackedBinaryMatrix(len(z), cb.v, cb.C.words[z])
    approx = BinaryVectorSet(rows, origin.pad_len, origin.origin_mask)
    return vector_to_weight(approx)


@dataclass
class CodebookResult:
    codebook: BinaryCodebook
    assignment: np.ndarray
    b_hat: np.ndarray  # dense {-1,0,+1}, zeros at excluded positions
    loss: float  # squared error over mask-true positions
    trace: list  # clustering objective after every E and M step
    exact: bool  # true when every distinct vector became a centroid


def optimize_codebook(
    b_masked,
    w,
    mask,
    mu,
    alpha,
    v: int,
    c: int,
    max_iter: int = 5,
    *,
    freq_threshold: float = 0.01,
    init: str = "frequency",
    seed: int | None = None,
) -> CodebookResult:
    """Fit a binary codebook to the sign stream of `b_masked` and report
    the reconstruction loss of W over mask-true positions.

    Runs init -> alternating assign/update until assignments repeat or
    max_iter rounds pass.  The Hamming objective is recorded after every
    step and verified non-increasing (a violated trace would mean a
    broken minimizer, so it raises rather than returns).
    """
    w = matrix.as_dense(w, "W")
    mask = np.asarray(mask, dtype=bool)
    mu = np.asarray(mu, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    n, m = w.shape
    if mask.shape != (n, m):
        raise ShapeError(f"mask shape {mask.shape} != W shape {(n, m)}")
    if mu.shape != (n,) or alpha.shape != (n,):
        raise ShapeError("alpha and mu must be per-row vectors")
    if max_iter < 1:
        raise ConfigError(f"max_iter must be >= 1, got {max_iter}")

    vset = weight_to_vector(b_masked, v)
    if vset.count == 0:
        # degenerate: nothing to compress; keep a single filler centroid
        filler = matrix.pack_bits(np.ones((1, v), dtype=bool))
        cb = BinaryCodebook(filler)
        b_hat = np.zeros((n, m))
        loss = float(np.sum((w - mu[:, None])[mask] ** 2))
        return CodebookResult(cb, np.zeros(0, dtype=np.intp), b_hat, loss, [0], True)

    uniq, counts = unique_vectors(vset)
    rng = np.random.default_rng(seed) if init == "random" else None
    cb = init_codebook(
        uniq, counts, c, freq_threshold, method=init, rng=rng
    )

    trace = []
    exact = uniq.rows <= c
    if exact:
        z = assign(vset, cb)  # every vector hits its own pattern
        trace.append(clustering_objective(vset, cb, z))
    else:
        z_prev = None
        z = None
        for _ in range(max_iter):
            z = assign(vset, cb)
            trace.append(clustering_objective(vset, cb, z))
            if z_prev is not None and np.array_equal(z, z_prev):
                break
            cb = update_centroids(vset, z, cb)
            trace.append(clustering_objective(vset, cb, z))
            z_prev = z
        else:
            # loop exhausted after an M-step: refresh the assignment so
            # the returned pair (codebook, z) is consistent
            z = assign(vset, cb)
            trace.append(clustering_objective(vset, cb, z))
        if any(b > a for a, b in zip(trace, trace[1:])):
            raise IntegrityError(f"EM objective increased: {trace}")

    b_hat = reconstruct(cb, z, vset)
    model = alpha[:, None] * b_hat + mu[:, None]
    loss = float(np.sum((w - model)[mask] ** 2))
    return CodebookResult(cb, z, b_hat, loss, trace, exact)
