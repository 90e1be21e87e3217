"""Truncated normal and truncated location-scale t laws over unions of intervals.

Every mass is handled as a log-probability.  Tail probabilities come from
``scipy.special.log_ndtr`` (normal) and the regularized incomplete beta
function (t), so sets far in the tails keep full relative precision.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import betainc, betaln, log_ndtr

from .exceptions import InputError, InversionError, NumericalError

#: Absolute tolerance in the mean for :func:`invert_mean_tn` / :func:`invert_mean_tt`.
INVERSION_TOL = 1e-8
#: Bracket expansion stops here and reports divergence.
INVERSION_LIMIT = 1e6


class PrecisionError(NumericalError):
    """A probability mass underflows even in log space."""


class ClampWarning(UserWarning):
    """A statistic outside its truncation set was moved to the nearest end."""


@dataclass(frozen=True)
class TruncationSet:
    """Ordered, disjoint intervals ``[(lo_1, hi_1), ..., (lo_k, hi_k)]``.

    Ends may be infinite.  Closed and open ends are not distinguished since
    the laws involved are continuous.
    """

    intervals: tuple

    def __post_init__(self):
        ivs = tuple((float(lo), float(hi)) for lo, hi in self.intervals)
        if not ivs:
            raise InputError("a truncation set needs at least one interval")
        for lo, hi in ivs:
            if np.isnan(lo) or np.isnan(hi) or hi < lo:
                raise InputError(f"invalid interval ({lo}, {hi})")
        for (_, hi), (lo, _) in zip(ivs[:-1], ivs[1:]):
            if not hi < lo:
                raise InputError("intervals must be sorted and disjoint")
        object.__setattr__(self, "intervals", ivs)

    @classmethod
    def interval(cls, lo=-np.inf, hi=np.inf):
        return cls(((lo, hi),))

    @classmethod
    def two_ray(cls, lower, upper):
        """``(-inf, lower] U [upper, inf)``; the whole line when ``lower >= upper``."""
        if lower >= upper:
            return cls.interval()
        return cls(((-np.inf, lower), (upper, np.inf)))

    @property
    def lower(self):
        return self.intervals[0][0]

    @property
    def upper(self):
        return self.intervals[-1][1]

    @property
    def bounded(self):
        """``True`` if either outer end is finite."""
        return bool(np.isfinite(self.lower) or np.isfinite(self.upper))

    def contains(self, x):
        return any(lo <= x <= hi for lo, hi in self.intervals)

    def clamp(self, x):
        """Nearest point of the set to ``x``."""
        if self.contains(x):
            return float(x)
        ends = np.array([e for iv in self.intervals for e in iv])
        ends = ends[np.isfinite(ends)]
        return float(ends[np.argmin(np.abs(ends - x))])

    def shift(self, mu):
        return TruncationSet(tuple((lo - mu, hi - mu) for lo, hi in self.intervals))

    def as_list(self):
        return [[lo, hi] for lo, hi in self.intervals]


def _log1mexp(x):
    """``log(1 - exp(x))`` for ``x <= 0``."""
    if x >= 0:
        return -np.inf
    if x > -np.log(2.0):
        return np.log(-np.expm1(x))
    return np.log1p(-np.exp(x))


def _normal_log_sf(x):
    return float(log_ndtr(-x))


#: Below this the incomplete beta value is recomputed in log space.
BETAINC_FLOOR = 1e-280


def _log_betainc_half(a, x, q):
    """``log I_x(a, 1/2)`` with ``q = 1 - x``, for values that underflow.

    Uses ``I_x(a, b) = x^a (1 - x)^b F(1, a + b; a + 1; x) / (a B(a, b))``
    with the hypergeometric series summed in log space.
    """
    count = int(60.0 / q) + 100
    k = np.arange(count - 1)
    log_terms = np.concatenate([[0.0], np.cumsum(np.log(x) + np.log1p(-0.5 / (a + 1.0 + k)))])
    top = log_terms.max()
    log_sum = top + np.log(np.exp(log_terms - top).sum())
    return a * np.log(x) + 0.5 * np.log(q) - np.log(a) - betaln(a, 0.5) + log_sum


def _t_log_sf_factory(d):
    def log_sf(x):
        if np.isinf(x):
            return 0.0 if x < 0 else -np.inf
        x2 = x * x
        tail = 0.5 * betainc(0.5 * d, 0.5, d / (d + x2))
        if x <= 0:
            return float(np.log1p(-tail))
        if tail > BETAINC_FLOOR:
            return float(np.log(tail))
        return float(np.log(0.5) + _log_betainc_half(0.5 * d, d / (d + x2), x2 / (d + x2)))

    return log_sf


class _Symmetric:
    """Log masses for a law symmetric about zero, given its log survival."""

    def __init__(self, log_sf):
        self.log_sf = log_sf

    def log_cdf(self, x):
        return self.log_sf(-x)

    def log_mass(self, a, b):
        """``log P(a < X < b)``."""
        if not b > a:
            return -np.inf
        if a >= 0:
            la, lb = self.log_sf(a), self.log_sf(b)
            return la + _log1mexp(lb - la) if la > -np.inf else -np.inf
        if b <= 0:
            la, lb = self.log_cdf(a), self.log_cdf(b)
            return lb + _log1mexp(la - lb) if lb > -np.inf else -np.inf
        # Split at the centre so that short intervals keep relative precision.
        return _logsumexp([self.log_mass(a, 0.0), self.log_mass(0.0, b)])


def _logsumexp(values):
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return -np.inf
    top = values.max()
    if not np.isfinite(top):
        return top
    return float(top + np.log(np.sum(np.exp(values - top))))


def _split_masses(law, z, mu, tset):
    """Log masses of the set below and above ``z`` and of the whole set."""
    below, above, total = [], [], []
    for lo, hi in tset.intervals:
        a, b = lo - mu, hi - mu
        x = z - mu
        total.append(law.log_mass(a, b))
        below.append(law.log_mass(a, min(b, x)))
        above.append(law.log_mass(max(a, x), b))
    return _logsumexp(below), _logsumexp(above), _logsumexp(total)


def _clamped(z, tset):
    if tset.contains(z):
        return float(z)
    warnings.warn(f"statistic {z:.6g} lies outside its truncation set; clamped", ClampWarning,
                  stacklevel=3)
    return tset.clamp(z)


def _cdf_sf(law, z, mu, tset):
    z = _clamped(z, tset)
    lb, la, lt = _split_masses(law, z, mu, tset)
    if lt == -np.inf:
        raise PrecisionError(f"truncation set has no representable mass at mean {mu:.6g}")
    return float(np.exp(lb - lt)), float(np.exp(la - lt))


_NORMAL = _Symmetric(_normal_log_sf)


def _t_law(d):
    if not d >= 1:
        raise InputError(f"degrees of freedom must be >= 1, got {d}")
    return _Symmetric(_t_log_sf_factory(float(d)))


def tn_cdf(z, mu, tset):
    """CDF at ``z`` of ``N(mu, 1)`` truncated to ``tset``.

    Raises
    ------
    PrecisionError
        If the mass of the set underflows even in log space.
    """
    return _cdf_sf(_NORMAL, z, mu, tset)[0]


def tn_sf(z, mu, tset):
    """Survival ``1 - tn_cdf`` computed without cancellation."""
    return _cdf_sf(_NORMAL, z, mu, tset)[1]


def tt_cdf(t, mu, d, tset):
    """CDF at ``t`` of the unit-scale t law with ``d`` degrees of freedom and
    location ``mu``, truncated to ``tset``."""
    return _cdf_sf(_t_law(d), t, mu, tset)[0]


def tt_sf(t, mu, d, tset):
    return _cdf_sf(_t_law(d), t, mu, tset)[1]


def _invert(law, z_obs, tset, target):
    """Root ``mu`` of survival ``P_mu(X >= z_obs | X in set) = target``."""
    if not 0 < target < 1:
        raise InputError(f"target must lie in (0, 1), got {target}")
    z_obs = _clamped(z_obs, tset)
    # Compare the smaller tail with its target to avoid cancellation near 1.
    if target <= 0.5:
        g = lambda mu: _cdf_sf(law, z_obs, mu, tset)[1] - target
    else:
        g = lambda mu: (1.0 - target) - _cdf_sf(law, z_obs, mu, tset)[0]

    def safe(mu):
        try:
            return g(mu)
        except PrecisionError:
            # All mass beyond reach: the survival is 0 below and 1 above.
            return -1.0 if mu < z_obs else 1.0

    step = 1.0
    lo, hi = z_obs - step, z_obs + step
    while safe(lo) > 0:
        step *= 2.0
        lo = z_obs - step
        if step > INVERSION_LIMIT:
            raise InversionError(f"no mean below {lo:.3g} reaches survival {target}")
    step = 1.0
    while safe(hi) < 0:
        step *= 2.0
        hi = z_obs + step
        if step > INVERSION_LIMIT:
            raise InversionError(f"no mean above {hi:.3g} reaches survival {target}")
    return float(brentq(safe, lo, hi, xtol=INVERSION_TOL))


def invert_mean_tn(z_obs, tset, target):
    """The mean ``mu`` at which ``tn_sf(z_obs, mu, tset) = target``.

    The survival is increasing in ``mu``, so the root is unique.

    Raises
    ------
    InversionError
        If the bracket has to grow beyond ``INVERSION_LIMIT`` (typical when
        ``z_obs`` sits next to a finite end of the set).
    """
    return _invert(_NORMAL, z_obs, tset, target)


def invert_mean_tt(t_obs, d, tset, target):
    """As :func:`invert_mean_tn` for the truncated t law with ``d`` degrees of freedom."""
    return _invert(_t_law(d), t_obs, tset, target)
