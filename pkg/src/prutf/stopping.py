"""Bridge-based stopping rule for the dual path."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .exceptions import NumericalError

SERIES_TOL = 1e-14
SERIES_CAP = 10_000


def bridge_series(x, S2, terms=None):
    """Evaluate ``sum_i (-1)^(i+1) exp(-2 i^2 x^2 / S2)``.

    With ``terms=None`` the sum stops at the first term below
    ``SERIES_TOL`` (at most ``SERIES_CAP`` terms); otherwise exactly
    ``terms`` terms are summed.  For ``z = x / sqrt(S2) < 1`` and
    ``terms=None`` the equivalent Jacobi-transformed series
    ``(1 - sqrt(2 pi) / z * sum_i exp(-(2i-1)^2 pi^2 / (8 z^2))) / 2`` is
    used, since the direct terms barely decay near ``z = 0``.
    """
    scale = 2.0 * x * x / S2
    z = np.sqrt(x * x / S2)
    if terms is None and z < 1.0:
        total = 0.0
        for i in range(1, SERIES_CAP + 1):
            term = np.exp(-((2 * i - 1) ** 2) * np.pi ** 2 / (8.0 * z * z))
            total += term
            if term < SERIES_TOL:
                break
        return 0.5 * (1.0 - np.sqrt(2.0 * np.pi) / z * total)
    if terms is not None:
        i = np.arange(1, terms + 1, dtype=float)
        signs = np.where(i % 2 == 1, 1.0, -1.0)
        return float(np.sum(signs * np.exp(-scale * i * i)))
    total = 0.0
    for i in range(1, SERIES_CAP + 1):
        term = np.exp(-scale * i * i)
        total += term if i % 2 else -term
        if term < SERIES_TOL:
            break
    return total


def threshold_x_alpha(S2, alpha):
    """Positive root ``x`` of ``bridge_series(x, S2) = alpha / 2``.

    The series decreases strictly from ``1/2`` (as ``x -> 0``) to ``0``, so
    Brent's method on a geometrically widened bracket always converges.

    Parameters
    ----------
    S2 : float
        Variance scale ``S_r^2(k)``.
    alpha : float
        Level in ``(0, 1)``.

    Raises
    ------
    NumericalError
        If the root cannot be bracketed.
    """
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not S2 > 0:
        raise ValueError(f"S2 must be positive, got {S2}")
    target = alpha / 2.0
    f = lambda x: bridge_series(x, S2) - target
    lo, hi = 1e-8, 10.0 * np.sqrt(S2)
    while f(lo) < 0:
        lo /= 2.0
        if lo < 1e-300:
            raise NumericalError("could not bracket the threshold from below")
    while f(hi) > 0:
        hi *= 2.0
        if hi > 1e300:
            raise NumericalError("could not bracket the threshold from above")
    return float(brentq(f, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps))


@dataclass(frozen=True)
class StopThreshold:
    """Threshold data for one stopping check."""

    alpha: float
    S2: float
    x_alpha: float
    k: int
    r: int
    sigma: float

    @property
    def bound(self):
        """``sigma * x_alpha * (k - r)^((2r + 1) / 2)``."""
        if self.k <= self.r:
            return np.inf
        return self.sigma * self.x_alpha * (self.k - self.r) ** ((2 * self.r + 1) / 2.0)


@dataclass(frozen=True)
class StopCheck:
    """Outcome of one stopping check at a path state."""

    stop: bool
    statistic: float
    threshold: object
    argmax: int
    sign: int
    step: int


SCALES = ("auto", "last-diagonal", "bridge-matched")


def variance_scale(state, scale="auto"):
    """The variance scale ``S^2`` entering the threshold equation.

    ``"last-diagonal"`` takes the ``k``-th (last) diagonal entry of
    ``(D_{-A} D_{-A}^T)^{-1}``.  ``"bridge-matched"`` takes
    ``4 * max_t [(D_{-A} D_{-A}^T)^{-1}]_tt / (k - r)^(2r + 1)``, the scale
    of a Brownian bridge whose peak variance matches the interior process.
    The two agree (both near 1) for ``r = 0`` without change points; for
    ``r >= 1`` the last diagonal stays near 1 while the interior process
    shrinks by orders of magnitude, so ``"auto"`` uses it only for ``r = 0``.
    """
    if scale not in SCALES:
        raise ValueError(f"unknown variance scale {scale!r}")
    k = state.residual_count
    r = state.D.r
    if scale == "auto":
        scale = "last-diagonal" if r == 0 else "bridge-matched"
    diag = state.factor.inverse_diagonal
    if scale == "last-diagonal":
        return float(diag[k - 1])
    return 4.0 * float(diag.max()) / float(k - r) ** (2 * r + 1)


def stop_threshold(state, sigma, alpha, scale="auto"):
    """Threshold for the state's interior coordinates, or ``None`` if ``k <= r``."""
    k = state.residual_count
    r = state.D.r
    if k <= r:
        return None
    S2 = variance_scale(state, scale)
    return StopThreshold(alpha, S2, threshold_x_alpha(S2, alpha), k, r, float(sigma))


def stop_check(state, sigma, alpha, scale="auto"):
    """Evaluate the stopping rule at ``state``.

    The statistic is the largest interior ``|a_i|`` where
    ``a = (D_{-A} D_{-A}^T)^{-1} D_{-A} y``.  When ``k <= r`` no residual
    process remains and the check stops unconditionally.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    thr = stop_threshold(state, sigma, alpha, scale)
    if thr is None:
        return StopCheck(True, 0.0, None, -1, 0, state.step)
    mags = np.abs(state.a)
    i = int(np.argmax(mags))
    stat = float(mags[i])
    sign = 1 if state.a[i] >= 0 else -1
    return StopCheck(stat <= thr.bound, stat, thr, i, sign, state.step)


def should_stop(state, sigma, alpha, scale="auto"):
    """``True`` when no interior coordinate exceeds the bridge threshold."""
    return stop_check(state, sigma, alpha, scale).stop
