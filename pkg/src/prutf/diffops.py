"""Discrete difference operators, banded Gram solves and segment projections.

Grid convention: sample ``i`` (1-based) sits at ``i / n`` on ``[0, 1]``.
Dual coordinates are 0-based row indices of ``D`` internally; the public
reporting layer converts to 1-based positions.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.linalg import cholesky_banded, cho_solve_banded
from scipy.special import comb

from .exceptions import ConditioningError, DimensionError, PartitionError

#: Gram matrices whose condition estimate exceeds this are refused.
CONDITION_LIMIT = 1e12


def difference_stencil(r):
    """Coefficients of one row of the ``(r + 1)``-th difference operator.

    Parameters
    ----------
    r : int
        Polynomial degree (``r >= 0``).

    Returns
    -------
    numpy.ndarray, shape (r + 2,)
        Signed binomial coefficients, e.g. ``(-1, 1)`` for ``r = 0`` and
        ``(1, -2, 1)`` for ``r = 1``.
    """
    k = r + 1
    j = np.arange(k + 1)
    return ((-1.0) ** (k - j)) * comb(k, j, exact=False)


@dataclass(frozen=True)
class DifferenceOperator:
    """The ``(r + 1)``-th order difference matrix ``D`` of size ``m x n``.

    Only the stencil is stored; row ``i`` has the stencil in columns
    ``i .. i + r + 1``.
    """

    n: int
    r: int
    stencil: np.ndarray = field(repr=False)

    @property
    def order(self):
        return self.r + 1

    @property
    def m(self):
        return self.n - self.r - 1

    @property
    def bandwidth(self):
        return self.r + 2

    @cached_property
    def dense(self):
        """Dense ``m x n`` copy of ``D``."""
        out = np.zeros((self.m, self.n))
        idx = np.arange(self.m)
        for k, c in enumerate(self.stencil):
            out[idx, idx + k] = c
        return out

    @cached_property
    def row_norm(self):
        """Euclidean norm shared by every row of ``D``."""
        return float(np.linalg.norm(self.stencil))

    def row(self, i):
        """Row ``i`` of ``D`` as a dense length-``n`` vector."""
        out = np.zeros(self.n)
        out[i:i + self.r + 2] = self.stencil
        return out

    def apply(self, y):
        """Compute ``D @ y`` (``y`` may be ``(n,)`` or ``(n, k)``)."""
        y = np.asarray(y, dtype=float)
        out = np.zeros((self.m,) + y.shape[1:])
        for k, c in enumerate(self.stencil):
            out += c * y[k:k + self.m]
        return out

    def apply_transpose(self, u):
        """Compute ``D.T @ u`` (``u`` may be ``(m,)`` or ``(m, k)``)."""
        u = np.asarray(u, dtype=float)
        out = np.zeros((self.n,) + u.shape[1:])
        for k, c in enumerate(self.stencil):
            out[k:k + self.m] += c * u
        return out


def build_difference_operator(n, r):
    """Build ``D = D^(r+1)`` for ``n`` equally spaced samples.

    The stencil is obtained from the recursion ``D^(k+1) = D^(1) D^(k)``
    applied to a single row, which yields signed binomial coefficients.

    Raises
    ------
    DimensionError
        If ``n < r + 2`` (the operator would have no rows).
    """
    n = int(n)
    r = int(r)
    if r < 0:
        raise DimensionError(f"degree r must be >= 0, got {r}")
    if n < r + 2:
        raise DimensionError(f"need n >= r + 2 samples, got n={n}, r={r}")
    stencil = np.array([-1.0, 1.0])
    for _ in range(r):
        # Row i of D1 @ Dk is row i+1 of Dk minus row i of Dk.
        stencil = np.concatenate(([0.0], stencil)) - np.concatenate((stencil, [0.0]))
    return DifferenceOperator(n=n, r=r, stencil=stencil)


def _gram_bands(D, rows):
    """Lower banded storage of ``D_rows D_rows^T`` for sorted ``rows``."""
    rows = np.asarray(rows, dtype=int)
    k = rows.size
    p = D.r + 1
    # Inner product of two stencils offset by ``delta`` positions.
    s = D.stencil
    overlap = np.array([np.dot(s[delta:], s[:s.size - delta]) for delta in range(p + 1)])
    ab = np.zeros((p + 1, k))
    for band in range(p + 1):
        if band >= k:
            break
        delta = rows[band:] - rows[:k - band]
        vals = np.where(delta <= p, overlap[np.minimum(delta, p)], 0.0)
        ab[band, :k - band] = vals
    return ab


@dataclass
class GramFactor:
    """Banded Cholesky factor of ``D_S D_S^T`` for a sorted row subset ``S``."""

    D: DifferenceOperator
    rows: np.ndarray
    cb: np.ndarray
    condition_estimate: float

    def solve(self, rhs):
        """Solve ``(D_S D_S^T) x = rhs``."""
        rhs = np.asarray(rhs, dtype=float)
        if self.rows.size == 0:
            return np.zeros_like(rhs)
        return cho_solve_banded((self.cb, True), rhs, check_finite=False)

    def solve_projected(self, v):
        """Return ``(D_S D_S^T)^{-1} D_S v`` for ``v`` of shape ``(n,)`` or ``(n, k)``."""
        Dv = self.D.apply(v)[self.rows]
        return self.solve(Dv)

    @cached_property
    def operator(self):
        """Dense ``|S| x n`` matrix ``(D_S D_S^T)^{-1} D_S``."""
        return self.solve(self.D.dense[self.rows])

    @cached_property
    def inverse_diagonal(self):
        """Diagonal of ``(D_S D_S^T)^{-1}``."""
        k = self.rows.size
        return np.einsum("ii->i", self.solve(np.eye(k))) if k else np.zeros(0)


def factor_gram(D, rows):
    """Factor the Gram matrix of a sorted subset of rows of ``D``.

    Raises
    ------
    ConditioningError
        If the Gram matrix is numerically singular.
    """
    rows = np.asarray(rows, dtype=int)
    if rows.size == 0:
        return GramFactor(D, rows, np.zeros((D.r + 2, 0)), 1.0)
    if np.any(np.diff(rows) <= 0):
        raise DimensionError("row subset must be strictly increasing")
    ab = _gram_bands(D, rows)
    try:
        cb = cholesky_banded(ab, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError("Gram matrix is not positive definite") from exc
    diag = cb[0]
    cond = float((diag.max() / diag.min()) ** 2) if diag.min() > 0 else np.inf
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise ConditioningError(f"Gram condition estimate {cond:.3g} exceeds {CONDITION_LIMIT:g}")
    return GramFactor(D, rows, cb, cond)


def gram_solve(D, rows, rhs):
    """Return ``(D_S D_S^T)^{-1} D_S rhs`` for the row subset ``S = rows``.

    This is the quantity behind the interior dual coefficients
    ``a = (D_{-A} D_{-A}^T)^{-1} D_{-A} y`` and, with ``rhs = D_A^T s_A``,
    the slope vector ``b``.
    """
    return factor_gram(D, rows).solve_projected(rhs)


@dataclass(frozen=True)
class SegmentDesign:
    """Polynomial design for the segment ``(lo, hi]`` (1-based samples).

    ``X`` has rows ``(1, t, ..., t^r)`` for ``t = (lo+1)/n, ..., hi/n``.
    A segment with fewer than ``r + 1`` points is flagged ``degenerate``
    and its projection is the identity.
    """

    lo: int
    hi: int
    n: int
    r: int
    X: np.ndarray = field(repr=False)
    P: np.ndarray = field(repr=False)
    degenerate: bool = False

    @property
    def size(self):
        return self.hi - self.lo

    @property
    def rank(self):
        return self.size if self.degenerate else self.r + 1


def segment_design(lo, hi, n, r):
    """Build the design matrix and projection of one segment."""
    if not (0 <= lo < hi <= n):
        raise PartitionError(f"invalid segment ({lo}, {hi}] for n={n}")
    t = np.arange(lo + 1, hi + 1) / n
    X = np.vander(t, r + 1, increasing=True)
    if hi - lo < r + 1:
        return SegmentDesign(lo, hi, n, r, X, np.eye(hi - lo), degenerate=True)
    # Orthonormal basis of the column space keeps P well conditioned.
    Q, _ = np.linalg.qr(X)
    P = Q @ Q.T
    return SegmentDesign(lo, hi, n, r, X, P)


@dataclass(frozen=True)
class BlockProjection:
    """Block-diagonal projection onto piecewise polynomials."""

    segments: tuple
    n: int

    @property
    def rank(self):
        return sum(seg.rank for seg in self.segments)

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for seg in self.segments:
            out[seg.lo:seg.hi] = seg.P @ v[seg.lo:seg.hi]
        return out

    def residual(self, v):
        """``(I - P) v``."""
        return np.asarray(v, dtype=float) - self.apply(v)

    @cached_property
    def dense(self):
        out = np.zeros((self.n, self.n))
        for seg in self.segments:
            out[seg.lo:seg.hi, seg.lo:seg.hi] = seg.P
        return out


def block_projection(segments):
    """Assemble the block-diagonal projection for a partition of ``1..n``.

    Raises
    ------
    PartitionError
        If the segments overlap, leave gaps or do not start at 0.
    """
    segments = tuple(sorted(segments, key=lambda s: s.lo))
    if not segments:
        raise PartitionError("no segments given")
    n = segments[0].n
    expected = 0
    for seg in segments:
        if seg.lo != expected:
            raise PartitionError(f"segment ({seg.lo}, {seg.hi}] does not start at {expected}")
        expected = seg.hi
    if expected != n:
        raise PartitionError(f"segments end at {expected}, expected {n}")
    return BlockProjection(segments, n)


def partition_projection(breaks, n, r):
    """Projection for the partition of ``1..n`` cut after each sample in ``breaks``."""
    edges = [0] + sorted(int(b) for b in breaks) + [n]
    segs = [segment_design(lo, hi, n, r) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]
    return block_projection(segs)
