"""Invertible activation/weight transform and its desk-scale fitting tools.

The transform is T = D * (P1 (x) P2): per-column sign flips composed with
a Kronecker-factored affine map.  Activations are mapped as X -> X @ T and
weights as W -> W @ inv(T).T, which leaves X @ W.T unchanged in exact
arithmetic; the Kronecker structure lets both maps run on d1 x d2 blocks
without materializing the d x d matrix.  The module also provides the
auxiliary losses used when fitting T (Gram-eigenvalue similarity and sign
balance, both on +-1 matrices), a cyclic Jacobi eigensolver so the losses
need nothing beyond elementary array ops, and two optimizers: greedy
coordinate descent over the sign vector and finite-difference gradient
descent over the factors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import matrix
from .errors import (
    ConfigError,
    DomainError,
    IntegrityError,
    ShapeError,
    SingularTransformError,
)

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e8
KRON_INVERSE_TOL = 1e-8
JACOBI_OFF_TOL = 1e-10
MAX_LR_HALVINGS = 10


def kronecker_split(d: int) -> tuple[int, int]:
    """Most balanced factor pair (d1, d2) with d1*d2 == d and d1 <= d2.

    d1 is the largest divisor of d not exceeding sqrt(d); primes fall
    back to (1, d).
    """
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    for d1 in range(int(np.sqrt(d)) + 1, 0, -1):
        if d1 * d1 <= d and d % d1 == 0:
            return d1, d // d1
    return 1, d  # pragma: no cover - d1=1 always divides


def condition_estimate(p) -> float:
    """Cheap invertibility proxy: ratio of max to min column 2-norm."""
    p = matrix.as_dense(p, "P")
    norms = np.sqrt(np.sum(p * p, axis=0))
    lo = float(norms.min(initial=np.inf))
    hi = float(norms.max(initial=0.0))
    if lo == 0.0:
        return np.inf
    return hi / lo


def _check_sign_vector(sigma, length: int | None = None) -> np.ndarray:
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    if sigma.ndim != 1:
        raise ShapeError(f"sigma must be 1-D, got ndim={sigma.ndim}")
    if length is not None and sigma.shape[0] != length:
        raise ShapeError(f"sigma has length {sigma.shape[0]}, expected {length}")
    ok = np.abs(sigma) == 1.0
    if not ok.all():
        i = int(np.flatnonzero(~ok)[0])
        raise DomainError(
            f"sigma[{i}] is {sigma[i]!r}, expected exactly +1 or -1"
        )
    return sigma


@dataclass
class TransformPair:
    """T = D * (P1 (x) P2) with D = diag(sigma), sigma in {-1,+1}^d.

    Construction validates the factors: the column-norm condition proxy of
    the pair must stay within CONDITION_LIMIT, both factors must invert,
    and the Kronecker inverse identity
    (P1 (x) P2) @ (inv(P1) (x) inv(P2)) == I must hold to KRON_INVERSE_TOL;
    violations raise SingularTransformError.  Factor inverses are cached.
    """

    sigma: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    p1_inv: np.ndarray = field(init=False, repr=False)
    p2_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.p1 = matrix.as_dense(self.p1, "P1")
        self.p2 = matrix.as_dense(self.p2, "P2")
        for name, p in (("P1", self.p1), ("P2", self.p2)):
            if p.shape[0] != p.shape[1] or p.shape[0] == 0:
                raise ShapeError(f"{name} must be square and nonempty, got {p.shape}")
        self.sigma = _check_sign_vector(self.sigma, self.d1 * self.d2)

        est = condition_estimate(self.p1) * condition_estimate(self.p2)
        if not est <= CONDITION_LIMIT:
            raise SingularTransformError(
                f"condition estimate {est:.3e} exceeds {CONDITION_LIMIT:.0e}"
            )
        try:
            self.p1_inv = np.linalg.inv(self.p1)
            self.p2_inv = np.linalg.inv(self.p2)
        except np.linalg.LinAlgError as exc:
            raise SingularTransformError(f"factor is singular: {exc}") from exc
        kron = np.kron(self.p1, self.p2)
        kron_inv = np.kron(self.p1_inv, self.p2_inv)
        resid = np.max(np.abs(kron @ kron_inv - np.eye(self.d)))
        if not resid <= KRON_INVERSE_TOL:
            raise SingularTransformError(
                f"Kronecker inverse residual {resid:.3e} exceeds "
                f"{KRON_INVERSE_TOL:.0e}"
            )

    @property
    def d1(self) -> int:
        return self.p1.shape[0]

    @property
    def d2(self) -> int:
        return self.p2.shape[0]

    @property
    def d(self) -> int:
        return self.d1 * self.d2


def identity_pair(d: int) -> TransformPair:
    """All-(+1) signs with identity factors of the balanced split of d."""
    d1, d2 = kronecker_split(d)
    return TransformPair(np.ones(d), np.eye(d1), np.eye(d2))


def transform_matrix(pair: TransformPair) -> np.ndarray:
    """Materialize T densely (row scaling by sigma, then the Kronecker
    product); intended for small d and for cross-checks."""
    return pair.sigma[:, None] * np.kron(pair.p1, pair.p2)


def _kron_rows(x: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Per row of x: reshape to (rows of left) x (rows of right), apply
    left @ block @ right, flatten back.  Equals x @ (left.T (x) right)."""
    n = x.shape[0]
    blocks = x.reshape(n, left.shape[0], right.shape[0])
    return np.matmul(np.matmul(left, blocks), right).reshape(n, -1)


def apply_transform(x, pair: TransformPair) -> np.ndarray:
    """X @ T for T = D * (P1 (x) P2): flip column signs, then apply the
    Kronecker factors blockwise (P1.T on the left, P2 on the right)."""
    x = matrix.as_dense(x, "X")
    if x.shape[1] != pair.d:
        raise ShapeError(
            f"X has {x.shape[1]} columns, transform expects {pair.d}"
        )
    return _kron_rows(x * pair.sigma, pair.p1.T, pair.p2)


def inverse_transform_weight(w, pair: TransformPair) -> np.ndarray:
    """Map weights into the transformed space: W @ inv(T).T.

    The result W' satisfies W'.T == inv(T) @ W.T, so pairing it with
    transformed activations reproduces the original product:
    matmul(apply_transform(X, T), W') == matmul(X, W) in exact arithmetic.
    """
    w = matrix.as_dense(w, "W")
    if w.shape[1] != pair.d:
        raise ShapeError(
            f"W has {w.shape[1]} columns, transform expects {pair.d}"
        )
    est = condition_estimate(pair.p1) * condition_estimate(pair.p2)
    if not est <= CONDITION_LIMIT:
        raise SingularTransformError(
            f"condition estimate {est:.3e} exceeds {CONDITION_LIMIT:.0e}"
        )
    return _kron_rows(w * pair.sigma, pair.p1_inv, pair.p2_inv.T)


def equivalence_check(x, w, pair: TransformPair) -> float:
    """Max relative deviation between X @ W.T and its transformed
    re-association (X @ T) @ (inv(T) @ W.T).

    Both products use the sequential-accumulation matmul, so transforms
    that only permute signs reproduce the reference bit for bit.
    """
    reference = matrix.matmul(x, w)
    routed = matrix.matmul(
        apply_transform(x, pair), inverse_transform_weight(w, pair)
    )
    scale = max(float(np.max(np.abs(reference))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(reference - routed)) / scale)


def jacobi_eigvalsh(a, tol: float = JACOBI_OFF_TOL, max_sweeps: int = 60) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps rotate every off-diagonal pair (p, q) in index order until the
    off-diagonal Frobenius norm drops to `tol`.  Returns eigenvalues in
    ascending order.  Already-diagonal input is returned without a single
    rotation, hence exactly.
    """
    a = matrix.as_dense(a, "matrix")
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    if n == 0:
        return np.empty(0)
    asym = float(np.max(np.abs(a - a.T)))
    if asym > 1e-12 * max(1.0, float(np.max(np.abs(a)))):
        raise DomainError(f"matrix is not symmetric (max |A - A.T| = {asym:.3e})")
    a = (a + a.T) / 2.0

    off_diag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        if np.sqrt(float(np.sum(a[off_diag] ** 2))) <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                # smaller-magnitude root of t^2 + 2*tau*t - 1 = 0
                t = np.copysign(1.0, tau) / (abs(tau) + np.hypot(1.0, tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                a[p, q] = a[q, p] = 0.0
    else:
        raise IntegrityError(
            f"Jacobi did not converge in {max_sweeps} sweeps"
        )
    return np.sort(np.diag(a).copy())


def _check_pm1_matrix(m, name: str = "M") -> np.ndarray:
    m = matrix.as_dense(m, name)
    if m.size == 0:
        raise ShapeError(f"{name} must be nonempty")
    ok = np.abs(m) == 1.0
    if not ok.all():
        i, j = np.argwhere(~ok)[0]
        raise DomainError(
            f"{name}[{i}, {j}] is {m[i, j]!r}, expected exactly +1 or -1"
        )
    return m


def gram_similarity_loss(m, k: int) -> float:
    """Trace of G = (1/v) M @ M.T minus its top-k eigenvalue sum, >= 0.

    Every diagonal entry of G is exactly 1 for +-1 rows, so the trace is
    the row count.  The nonzero spectrum of G is computed from whichever
    equivalent Gram is smallest: duplicate rows are collapsed into a
    count-weighted Gram of the distinct rows (entries
    <r_i, r_j> * sqrt(w_i * w_j) / v, identical nonzero spectrum), and
    when the distinct rows still outnumber the columns the v x v dual
    Gram (1/v) M.T @ M is used instead.  A single repeated row therefore
    collapses to the 1 x 1 matrix [[B_rows]], which the eigensolver
    returns without rounding, making the loss exactly zero.  The final
    difference is clamped at zero to absorb eigensolver round-off.
    """
    m = _check_pm1_matrix(m)
    b_rows, v = m.shape
    if not 1 <= int(k) <= b_rows:
        raise ConfigError(f"K must be in [1, {b_rows}], got {k}")
    k = int(k)
    uniq, counts = np.unique(m, axis=0, return_counts=True)
    if uniq.shape[0] <= v:
        weights = np.sqrt(np.outer(counts, counts).astype(np.float64))
        eigs = jacobi_eigvalsh((uniq @ uniq.T) * weights / v)
    else:
        eigs = jacobi_eigvalsh((m.T @ m) / v)
    eigs = np.concatenate([eigs, np.zeros(b_rows - eigs.size)])
    top = np.sort(eigs)[-k:]
    return max(0.0, float(b_rows) - float(np.sum(top)))


def balance_loss(m) -> float:
    """Square of the global sign mean; 1 iff single-signed, 0 iff balanced."""
    m = _check_pm1_matrix(m)
    mean = float(m.mean())
    return mean * mean


@dataclass
class AuxLossConfig:
    """Weights for the auxiliary losses added to a block objective."""

    lambda1: float = 1e-2  # Gram-similarity weight
    lambda2: float = 1e-1  # sign-balance weight
    top_k: int = 16  # eigenvalues kept by the similarity loss

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError(
                f"loss weights must be >= 0, got {self.lambda1}, {self.lambda2}"
            )
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


def block_objective(
    layer_fn_original,
    layer_fn_quantized,
    x_calib,
    pair: TransformPair,
    aux_cfg: AuxLossConfig,
) -> float:
    """Squared output mismatch plus weighted auxiliary losses.

    `layer_fn_original(X)` returns the reference output;
    `layer_fn_quantized(X, pair)` returns (output, M) where M is the
    +-1 stream matrix the quantizer produced under `pair`.  Aux terms
    with zero weight are skipped entirely.
    """
    x_calib = matrix.as_dense(x_calib, "X_calib")
    reference = matrix.as_dense(layer_fn_original(x_calib), "reference output")
    output, stream = layer_fn_quantized(x_calib, pair)
    output = matrix.as_dense(output, "quantized output")
    if output.shape != reference.shape:
        raise ShapeError(
            f"quantized output shape {output.shape} != {reference.shape}"
        )
    value = matrix.frobenius_norm_sq(reference - output)
    if aux_cfg.lambda1 > 0:
        value += aux_cfg.lambda1 * gram_similarity_loss(stream, aux_cfg.top_k)
    if aux_cfg.lambda2 > 0:
        value += aux_cfg.lambda2 * balance_loss(stream)
    return float(value)


@dataclass
class SignFlipResult:
    sigma: np.ndarray
    objective: float
    trace: list[float]  # initial value, then one entry per accepted flip
    sweeps: int
    flips: int


def optimize_sign_flips(objective, sigma0, max_sweeps: int) -> SignFlipResult:
    """Greedy coordinate descent over the sign vector.

    Sweeps the coordinates in index order and keeps a flip only when it
    strictly decreases `objective(sigma)`; stops after a sweep with no
    flips or after `max_sweeps`.  The recorded trace is therefore
    strictly decreasing past its first entry.
    """
    if max_sweeps < 1:
        raise ConfigError(f"max_sweeps must be >= 1, got {max_sweeps}")
    sigma = _check_sign_vector(sigma0).copy()
    best = float(objective(sigma.copy()))
    trace = [best]
    sweeps = 0
    flips = 0
    for _ in range(max_sweeps):
        sweeps += 1
        changed = False
        for i in range(sigma.size):
            trial = sigma.copy()
            trial[i] = -trial[i]
            value = float(objective(trial))
            if value < best:
                sigma, best = trial, value
                trace.append(value)
                flips += 1
                changed = True
        if not changed:
            break
    return SignFlipResult(sigma, best, trace, sweeps, flips)


def fd_gradients(objective, pair: TransformPair, fd_eps: float):
    """Central-difference gradients of `objective` w.r.t. P1 and P2."""
    if fd_eps <= 0:
        raise ConfigError(f"fd_eps must be > 0, got {fd_eps}")
    grads = []
    for which in (1, 2):
        p = pair.p1 if which == 1 else pair.p2
        grad = np.zeros_like(p)
        for i in range(p.shape[0]):
            for j in range(p.shape[1]):
                probes = []
                for delta in (fd_eps, -fd_eps):
                    shifted = p.copy()
                    shifted[i, j] += delta
                    if which == 1:
                        cand = TransformPair(pair.sigma, shifted, pair.p2)
                    else:
                        cand = TransformPair(pair.sigma, pair.p1, shifted)
                    probes.append(float(objective(cand)))
                grad[i, j] = (probes[0] - probes[1]) / (2.0 * fd_eps)
        grads.append(grad)
    return grads[0], grads[1]


@dataclass
class PDescentResult:
    pair: TransformPair
    objective: float
    trace: list[float]  # initial value, then one entry per accepted step
    steps: int


def optimize_P(
    objective, t0: TransformPair, lr: float, iters: int, fd_eps: float
) -> PDescentResult:
    """Finite-difference gradient descent over the transform factors.

    Each iteration probes a full central-difference gradient of both
    factors, then tries the step P -= lr * grad, halving the step for
    this iteration whenever the candidate raises the objective or fails
    the singularity checks.  Candidates that never become nonsingular
    within MAX_LR_HALVINGS halvings abort the run with
    SingularTransformError carrying the best result so far on its
    `best` attribute; a merely non-descending direction ends the run
    normally.  The recorded trace never increases.
    """
    if iters < 0:
        raise ConfigError(f"iters must be >= 0, got {iters}")
    if lr <= 0:
        raise ConfigError(f"lr must be > 0, got {lr}")
    if fd_eps <= 0:
        raise ConfigError(f"fd_eps must be > 0, got {fd_eps}")
    pair = t0
    best = float(objective(pair))
    trace = [best]
    steps = 0
    for _ in range(iters):
        g1, g2 = fd_gradients(objective, pair, fd_eps)
        if not (np.any(g1) or np.any(g2)):
            break
        step = lr
        accepted = False
        singular_last = False
        for _attempt in range(MAX_LR_HALVINGS + 1):
            try:
                cand = TransformPair(
                    pair.sigma, pair.p1 - step * g1, pair.p2 - step * g2
                )
            except SingularTransformError:
                singular_last = True
                step /= 2.0
                continue
            singular_last = False
            value = float(objective(cand))
            if value <= best:
                pair, best = cand, value
                trace.append(value)
                steps += 1
                accepted = True
                break
            step /= 2.0
        if not accepted:
            if singular_last:
                err = SingularTransformError(
                    f"no nonsingular update after {MAX_LR_HALVINGS} halvings"
                )
                err.best = PDescentResult(pair, best, trace, steps)
                raise err
            break
    return PDescentResult(pair, best, trace, steps)
