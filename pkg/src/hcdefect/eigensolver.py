"""Windowed eigenpairs of symmetric pencils ``K u = lam M u`` and inertia counts.

Both rely on one factorisation kernel: SuperLU run in symmetric mode with a
symmetric fill-reducing ordering and no off-diagonal pivoting.  The factors
then satisfy ``P A P^T = L U`` with ``U = D L^T``, so the signs of ``diag(U)``
give the inertia of ``A`` (Sylvester's law) and the same object serves as the
shift-invert operator.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as sla

from .errors import ConvergenceError, FactorizationError
from .fem import OperatorPair

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
CLUSTER_GAP = 1e-6
# LU fill for 2-D grid operators is a few hundred bytes per dof; refuse well before exhausting memory
MEMORY_BUDGET_DOFS = 1_500_000


class SymmetricFactor:
    """LDL^T-type factorisation of a symmetric sparse matrix."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        try:
            lu = sla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                          options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise FactorizationError(str(exc)) from exc
        self.lu = lu
        self.shape = A.shape
        self.symmetric_pivots = bool(np.array_equal(lu.perm_r, lu.perm_c))
        d = lu.U.diagonal()
        if not np.all(np.isfinite(d)) or np.any(d == 0):
            raise FactorizationError("zero or non-finite pivot")
        self.pivots = d

    def solve(self, b):
        return self.lu.solve(np.asarray(b, dtype=float))

    def inertia(self) -> tuple[int, int]:
        """(negative, positive) eigenvalue counts of the factored matrix."""
        if not self.symmetric_pivots:
            raise FactorizationError("factorisation pivoted off the diagonal; inertia unavailable")
        neg = int(np.count_nonzero(self.pivots < 0))
        return neg, len(self.pivots) - neg

    def as_operator(self) -> sla.LinearOperator:
        return sla.LinearOperator(self.shape, matvec=self.solve, dtype=float)


def factor_shifted(K, M, sigma: float, retries: int = 3, scale: float | None = None) -> tuple[SymmetricFactor, float]:
    """Factor ``K - sigma M``, nudging ``sigma`` if it hits an eigenvalue."""
    scale = max(abs(sigma), 1.0) if scale is None else scale
    last = None
    for attempt in range(retries + 1):
        s = sigma + attempt * 1e-12 * scale * (1 if attempt % 2 else -1) * (attempt + 1)
        try:
            f = SymmetricFactor(K - s * M)
            if f.symmetric_pivots:
                return f, s
            last = FactorizationError("off-diagonal pivoting")
        except FactorizationError as exc:
            last = exc
    raise FactorizationError(f"could not factor K - {sigma} M after {retries} retries: {last}")


def count_below(op: OperatorPair, sigma: float) -> int:
    """Number of eigenvalues of the pencil strictly below ``sigma``."""
    f, _ = factor_shifted(op.K, op.M, sigma)
    return f.inertia()[0]


def count_in_window(op: OperatorPair, window) -> int:
    a, b = (float(v) for v in window)
    if not b > a:
        return 0
    return count_below(op, b) - count_below(op, a)


@dataclass
class SpectralWindowResult:
    window: tuple[float, float]
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    count: int
    complete: bool
    tol: float = DEFAULT_TOL
    info: dict = field(default_factory=dict)

    @property
    def converged_count(self) -> int:
        return int(np.count_nonzero(self.residuals <= self.tol))

    def __len__(self):
        return len(self.eigenvalues)


def relative_residuals(K, M, lam, V) -> np.ndarray:
    """``||K u - lam M u|| / (max(|lam|, 1) ||M u||)`` for each column."""
    MV = M @ V
    R = K @ V - MV * lam[None, :]
    return np.linalg.norm(R, axis=0) / (np.maximum(np.abs(lam), 1.0) * np.linalg.norm(MV, axis=0))


def m_orthonormalize(M, lam, V, gap: float = CLUSTER_GAP):
    """Normalise columns in the M inner product, re-orthogonalising within eigenvalue clusters."""
    V = np.array(V, dtype=float, copy=True)
    order = np.argsort(lam, kind="stable")
    lam, V = lam[order], V[:, order]
    scale = max(np.abs(lam).max(initial=0.0), 1.0)
    start = 0
    for k in range(1, len(lam) + 1):
        if k == len(lam) or lam[k] - lam[k - 1] > gap * scale:
            block = V[:, start:k]
            G = block.T @ (M @ block)
            w, Q = np.linalg.eigh(0.5 * (G + G.T))
            block = block @ (Q / np.sqrt(w))
            V[:, start:k] = block
            start = k
    for c in range(V.shape[1]):
        v = V[:, c]
        v /= np.sqrt(v @ (M @ v))
        if v[np.argmax(np.abs(v))] < 0:
            v *= -1.0
    return lam, V


def _v0(n: int, seed: int = 20211229) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def eigs_in_window(op: OperatorPair, window, k_max: int = 20, tol: float = DEFAULT_TOL,
                   shift: float | None = None, count: int | None = None,
                   seed: int = 20211229) -> SpectralWindowResult:
    """All eigenpairs in ``window`` via shift-invert about an interior shift.

    The window population is certified first with inertia counts; if it
    exceeds ``k_max`` only the ``k_max`` pairs nearest the shift are returned
    and the result is flagged incomplete.
    """
    a, b = (float(v) for v in window)
    n = op.n
    if n > MEMORY_BUDGET_DOFS:
        raise FactorizationError(f"{n} dofs exceed the factorisation budget of {MEMORY_BUDGET_DOFS}")
    if count is None:
        count = count_in_window(op, (a, b))
    empty = SpectralWindowResult((a, b), np.zeros(0), np.zeros((n, 0)), np.zeros(0), 0, True, tol)
    if count == 0:
        return empty
    sigma = 0.5 * (a + b) if shift is None else float(shift)
    k = min(count, k_max)
    f, sigma = factor_shifted(op.K, op.M, sigma)
    # the count is certified, so no spare pairs: those would land in whatever cluster borders the window
    nev = min(k, n - 2)
    ncv = min(n - 1, max(2 * nev + 1, 20))
    try:
        lam, V = sla.eigsh(op.K, k=nev, M=op.M, sigma=sigma, which="LM", OPinv=f.as_operator(),
                           v0=_v0(n, seed), ncv=ncv, tol=tol * 1e-4, maxiter=20 * n)
    except sla.ArpackNoConvergence as exc:
        lam, V = exc.eigenvalues, exc.eigenvectors
        log.warning("ARPACK returned %d of %d pairs", len(lam), nev)
    del f
    lam = np.asarray(lam, dtype=float)
    near = np.argsort(np.abs(lam - sigma), kind="stable")[:k]
    lam, V = lam[near], V[:, near]
    lam, V = m_orthonormalize(op.M, lam, V)
    res = relative_residuals(op.K, op.M, lam, V)
    inwin = (lam >= a) & (lam <= b)
    lam, V, res = lam[inwin], V[:, inwin], res[inwin]
    complete = bool(count <= k_max and len(lam) == count and np.all(res <= tol))
    if len(lam) < min(count, k_max):
        raise ConvergenceError(f"found {len(lam)} eigenvalues in {window}, inertia count is {count}")
    return SpectralWindowResult((a, b), lam, V, res, count, complete, tol,
                                info={"shift": sigma, "ncv": ncv})


def lowest_eigenpairs(K, M, k: int, tol: float = DEFAULT_TOL, seed: int = 20211229):
    """Smallest ``k`` eigenpairs of an SPD pencil (shift-invert about zero)."""
    n = K.shape[0]
    f, sigma = factor_shifted(K, M, 0.0)
    ncv = min(n - 1, max(2 * k + 1, 20))
    lam, V = sla.eigsh(K, k=k, M=M, sigma=sigma, which="LM", OPinv=f.as_operator(),
                       v0=_v0(n, seed), ncv=ncv, tol=tol * 1e-4)
    order = np.argsort(lam, kind="stable")
    return m_orthonormalize(M, np.asarray(lam)[order], V[:, order])


def window_slices(op: OperatorPair, window, slice_max: int = 80, min_width: float = 1e-8):
    """Split ``window`` into sub-windows holding at most ``slice_max`` eigenvalues each.

    Returns ``[(a, b, count), ...]`` with inertia-certified counts.  Slices
    are halved until small enough; a cluster wider than ``slice_max`` that
    cannot be split further is returned as is.
    """
    a, b = (float(v) for v in window)
    if not b > a:
        return []
    below = {a: count_below(op, a), b: count_below(op, b)}
    todo, out = [(a, b)], []
    while todo:
        lo, hi = todo.pop()
        c = below[hi] - below[lo]
        if c == 0:
            continue
        if c <= slice_max or hi - lo < min_width * max(abs(hi), 1.0):
            out.append((lo, hi, c))
            continue
        mid = 0.5 * (lo + hi)
        below[mid] = count_below(op, mid)
        todo += [(mid, hi), (lo, mid)]
    return sorted(out)


def eigs_sliced(op: OperatorPair, window, slice_max: int = 80, tol: float = DEFAULT_TOL,
                seed: int = 20211229):
    """Yield complete :class:`SpectralWindowResult` blocks covering ``window``.

    Blocks are produced one at a time so callers can reduce them (projection
    masses, counts) without holding every eigenvector of a wide window.
    """
    for lo, hi, c in window_slices(op, window, slice_max):
        yield eigs_in_window(op, (lo, hi), k_max=c, tol=tol, count=c, seed=seed)
