"""Polyhedron-conditioned inference for linear contrasts of the mean.

Known variance uses the truncated normal law of
``Z = eta^T y / (sigma ||eta||)`` given ``(I - P_eta) y`` and the selection
event.  Unknown variance uses the selective t law of
``T = eta^T y / (sigma_hat ||eta||)`` given the fitted component, the
residual sum of squares ``W`` and the residual direction, which reduces
every polyhedron row to a scalar condition on ``T``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .diffops import build_difference_operator, partition_projection
from .dualpath import block_sizes
from .exceptions import DimensionError, InputError, InversionError, NumericalError
from .truncdist import (
    ClampWarning,
    TruncationSet,
    invert_mean_tn,
    invert_mean_tt,
    tn_cdf,
    tn_sf,
    tt_cdf,
    tt_sf,
)

#: Rows with ``|rho_i| <= ZERO_RHO * ||A_i||`` count as orthogonal to ``eta``.
ZERO_RHO = 1e-12
#: Relative slack tolerated before conditioning is declared inconsistent.
CONSISTENCY_TOL = 1e-8
CONTRAST_KINDS = ("spike", "segment", "window", "custom")


class ConditioningMismatchError(NumericalError):
    """The observed data violate their own conditioning event."""


class WindowTooWideError(InputError):
    """A window contrast reaches past a neighbouring change point."""


@dataclass(frozen=True)
class Contrast:
    """A contrast vector ``eta`` aimed at one detected change point.

    ``target`` is the 1-based dual index of the change point and ``location``
    its sample position (dual index plus offset).
    """

    kind: str
    eta: np.ndarray = field(repr=False)
    target: int = -1
    location: int = -1
    h: int = None

    @property
    def norm(self):
        return float(np.linalg.norm(self.eta))


def _leading_coefficient_row(lo, hi, n, r):
    """Row ``w`` with ``w @ y[lo:hi]`` the degree-``r`` coefficient of a
    least-squares polynomial fit in the sample index."""
    t = np.arange(lo + 1, hi + 1, dtype=float)
    t = t - t.mean()
    X = np.vander(t, r + 1, increasing=True)
    return np.linalg.pinv(X)[r]


def _span_contrast(left, mid, right, n, r):
    if mid - left < r + 1 or right - mid < r + 1:
        raise InputError(f"segments around {mid} are too short for degree {r}")
    eta = np.zeros(n)
    eta[left:mid] = -_leading_coefficient_row(left, mid, n, r)
    eta[mid:right] = _leading_coefficient_row(mid, right, n, r)
    return eta


def build_contrast(kind, change_points, j, n, r, h=None, offset=None, eta=None):
    """Contrast for the ``j``-th (0-based) of the detected ``change_points``.

    Parameters
    ----------
    kind : {"spike", "segment", "window", "custom"}
        ``spike`` is the difference-operator row of the change point.
        ``segment`` and ``window`` difference the degree-``r`` coefficient
        of least-squares fits to the right and to the left of the change
        point (the two neighbouring segments, or ``h`` samples on each side);
        for ``r = 0`` these are differences of averages.
    change_points : sequence of int
        Sorted 1-based dual indices.
    j : int
    n, r : int
    h : int, optional
        Window half-width (``window`` only).
    offset : int, optional
        Dual-to-sample offset; defaults to the augmented block size.
    eta : array_like, optional
        The vector itself for ``custom``.

    Raises
    ------
    WindowTooWideError
        If the window overruns a neighbouring change point.
    """
    if kind not in CONTRAST_KINDS:
        raise InputError(f"unknown contrast kind {kind!r}")
    taus = [int(t) for t in change_points]
    if not 0 <= j < len(taus):
        raise InputError(f"change point index {j} out of range for {len(taus)} change points")
    if offset is None:
        offset = block_sizes(r)[1]
    tau = taus[j]
    spots = [0] + [t + offset for t in taus] + [n]
    left, mid, right = spots[j], spots[j + 1], spots[j + 2]
    if kind == "spike":
        vec = build_difference_operator(n, r).row(tau - 1)
    elif kind == "segment":
        vec = _span_contrast(left, mid, right, n, r)
    elif kind == "window":
        if h is None or h < 1:
            raise InputError("window contrast needs a positive half-width h")
        if mid - h < left or mid + h > right:
            raise WindowTooWideError(f"window of half-width {h} at {mid} overruns a neighbour")
        vec = _span_contrast(mid - h, mid, mid + h, n, r)
    else:
        if eta is None:
            raise InputError("custom contrast needs eta")
        vec = np.asarray(eta, dtype=float)
        if vec.shape != (n,):
            raise DimensionError(f"eta must have length {n}")
    if not np.any(vec):
        raise InputError("contrast vector is zero")
    return Contrast(kind, np.asarray(vec, dtype=float), tau, mid, h if kind == "window" else None)


@dataclass(frozen=True)
class NuisanceStats:
    """Statistics that the conditional laws hold fixed.

    ``P`` projects onto piecewise polynomials over the detected partition
    and ``Q`` onto the span of ``P`` and ``eta`` (``Q = P`` when ``eta`` is
    already piecewise polynomial).

    Attributes
    ----------
    orthogonal : numpy.ndarray
        ``(I - P_eta) y``; with known variance this is conditioned on.
    fitted : numpy.ndarray
        ``V = (Q - P_eta) y``.
    W : float
        ``||(I - Q + P_eta) y||^2 = ||y||^2 - ||V||^2``.
    residual : numpy.ndarray
        ``(I - Q) y``.
    dof : int
        ``n - rank(Q)``, the degrees of freedom of ``T``.
    sigma_hat : float
        ``||(I - Q) y|| / sqrt(dof)``.
    pooled_sigma2 : float
        ``||(I - P) y||^2 / (n - rank(P))``, the pooled variance estimate.
    pooled_dof : int
        ``n - rank(P) = n - (J + 1)(r + 1)``.
    rho_scale : float
        ``||eta||``.
    """

    orthogonal: np.ndarray = field(repr=False)
    fitted: np.ndarray = field(repr=False)
    W: float
    residual: np.ndarray = field(repr=False)
    dof: int
    sigma_hat: float
    pooled_sigma2: float
    pooled_dof: int
    rho_scale: float


def nuisance_stats(y, eta, breaks, r):
    """Nuisance statistics for contrast ``eta`` and the partition cut after
    each sample position in ``breaks``.

    Raises
    ------
    InputError
        If no residual degrees of freedom remain.
    """
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    n = y.size
    if eta.shape != (n,):
        raise DimensionError(f"eta must have length {n}")
    proj = partition_projection(breaks, n, r)
    enorm = float(np.linalg.norm(eta))
    unit = eta / enorm
    resid_p = proj.residual(y)
    pooled_dof = n - proj.rank
    if pooled_dof < 1:
        raise InputError(f"no residual degrees of freedom (n={n}, rank={proj.rank})")
    # Extend P by the part of eta it misses.
    extra = proj.residual(unit)
    extra_norm = float(np.linalg.norm(extra))
    rank_q = proj.rank
    residual = resid_p
    if extra_norm > 1e-10:
        extra = extra / extra_norm
        residual = resid_p - extra * (extra @ y)
        rank_q += 1
    dof = n - rank_q
    if dof < 1:
        raise InputError(f"no residual degrees of freedom once eta is added (n={n})")
    along = unit * (unit @ y)
    fitted = y - residual - along
    W = float(residual @ residual + along @ along)
    return NuisanceStats(
        orthogonal=y - along,
        fitted=fitted,
        W=W,
        residual=residual,
        dof=dof,
        sigma_hat=float(np.sqrt(residual @ residual / dof)),
        pooled_sigma2=float(resid_p @ resid_p / pooled_dof),
        pooled_dof=pooled_dof,
        rho_scale=enorm,
    )


def _rho(poly, eta):
    A = poly.A
    rho = A @ (eta / np.linalg.norm(eta))
    zero = np.abs(rho) <= ZERO_RHO * np.linalg.norm(A, axis=1)
    return A, rho, zero


def z_truncation_bounds(poly, eta, sigma, V):
    """Truncation interval of ``Z`` given ``V = (I - P_eta) y``.

    Returns
    -------
    (lower, upper, zero_slack) : tuple of float
        ``zero_slack`` is the smallest slack among rows orthogonal to ``eta``
        (``inf`` if none).

    Raises
    ------
    ConditioningMismatchError
        If ``zero_slack`` is below ``-CONSISTENCY_TOL * max(1, ||V||_inf)``.
    """
    A, rho, zero = _rho(poly, eta)
    slack = A @ V - poly.q
    ratio = np.full(rho.shape, np.nan)
    ratio[~zero] = -slack[~zero] / (sigma * rho[~zero])
    pos, neg = (rho > 0) & ~zero, (rho < 0) & ~zero
    lower = float(ratio[pos].max()) if pos.any() else -np.inf
    upper = float(ratio[neg].min()) if neg.any() else np.inf
    zero_slack = float(slack[zero].min()) if zero.any() else np.inf
    if zero_slack < -CONSISTENCY_TOL * max(1.0, float(np.max(np.abs(V)))):
        raise ConditioningMismatchError(f"rows orthogonal to eta are violated by {zero_slack:.3g}")
    return lower, upper, zero_slack


def _row_function(c, b, e, d, t):
    return c * np.sqrt(d + t * t) + b * t + e


def t_truncation_bounds(poly, eta, stats, y):
    """Truncation interval of ``T`` given the fitted part, ``W`` and the
    residual direction.

    With ``sigma_hat(T) = sqrt(W / (d + T^2))`` the data are
    ``y = V + sigma_hat(T) (T eta / ||eta|| + sqrt(d) u)`` for the unit
    residual direction ``u``.  Row ``i`` of ``A y >= q`` becomes
    ``c_i sqrt(d + T^2) + rho_i T + e_i >= 0`` with
    ``c_i = [A V - q]_i / sqrt(W)`` and ``e_i = sqrt(d) [A u]_i``.  Its
    boundary points solve the quadratic
    ``(rho^2 - c^2) T^2 + 2 rho e T + e^2 - c^2 d = 0``; the returned
    interval is the connected component containing the observed ``T``.

    Raises
    ------
    ConditioningMismatchError
        If the observed ``T`` violates a row beyond tolerance.
    """
    y = np.asarray(y, dtype=float)
    A, rho, _ = _rho(poly, eta)
    d = float(stats.dof)
    rnorm = float(np.linalg.norm(stats.residual))
    if not rnorm > 0 or not stats.W > 0:
        raise NumericalError("degenerate variance: the residual is zero")
    u = stats.residual / rnorm
    c = (A @ stats.fitted - poly.q) / np.sqrt(stats.W)
    b = rho
    e = np.sqrt(d) * (A @ u)
    t0 = float(eta @ y / (stats.sigma_hat * stats.rho_scale))

    f0 = _row_function(c, b, e, d, t0)
    scale = np.abs(c) * np.sqrt(d + t0 * t0) + np.abs(b * t0) + np.abs(e) + 1e-300
    worst = float((f0 / scale).min()) if f0.size else 0.0
    if worst < -CONSISTENCY_TOL * 10:
        raise ConditioningMismatchError(f"observed T violates a row by {worst:.3g} (relative)")
    violated = f0 < 0

    a2 = b * b - c * c
    b2 = 2.0 * b * e
    c2 = e * e - c * c * d
    roots = np.full((c.size, 2), np.nan)
    big = np.abs(a2) > 1e-14 * (b * b + c * c + 1e-300)
    disc = b2 * b2 - 4.0 * a2 * c2
    ok = big & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    qq = -0.5 * (b2 + np.where(b2 >= 0, 1.0, -1.0) * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        roots[ok, 0] = qq[ok] / a2[ok]
        roots[ok, 1] = np.where(qq[ok] != 0, c2[ok] / qq[ok], qq[ok] / a2[ok])
        lin = ~big & (b2 != 0)
        roots[lin, 0] = -c2[lin] / b2[lin]

    lower, upper = -np.inf, np.inf
    for k in range(2):
        rt = roots[:, k]
        has = np.isfinite(rt)
        if not has.any():
            continue
        eps = 1e-9 * np.maximum(1.0, np.abs(rt[has]))
        cc, bb, ee = c[has], b[has], e[has]
        left = _row_function(cc, bb, ee, d, rt[has] - eps)
        right = _row_function(cc, bb, ee, d, rt[has] + eps)
        r_has = rt[has]
        near = violated[has] & (np.abs(r_has - t0) <= 1e-7 * max(1.0, abs(t0)))
        lo_cand = (r_has <= t0) & (left < 0) & (right >= 0) & ~near
        hi_cand = (r_has >= t0) & (right < 0) & (left >= 0) & ~near
        if lo_cand.any():
            lower = max(lower, float(r_has[lo_cand].max()))
        if hi_cand.any():
            upper = min(upper, float(r_has[hi_cand].min()))
    return lower, upper


@dataclass
class InferenceResult:
    """Outcome of one selective test and interval."""

    method: str
    variance: str
    statistic: float
    truncation: TruncationSet
    scale: float
    estimate: float
    dof: float = None
    sign: int = 1
    target: int = -1
    contrast: str = "spike"
    level: float = 0.95
    sided: str = "two"
    p_two: float = np.nan
    p_one: float = np.nan
    ci: tuple = (np.nan, np.nan)
    warnings: list = field(default_factory=list)

    @property
    def family(self):
        return "normal" if self.dof is None else "t"

    def as_dict(self):
        return {
            "method": self.method,
            "variance": self.variance,
            "change_point": self.target,
            "contrast": self.contrast,
            "statistic": self.statistic,
            "estimate": self.estimate,
            "scale": self.scale,
            "dof": self.dof,
            "truncation": self.truncation.as_list(),
            "p_two_sided": self.p_two,
            "p_one_sided": self.p_one,
            "level": self.level,
            "sided": self.sided,
            "ci": list(self.ci),
            "warnings": list(self.warnings),
        }


def _cdf_sf(result, mu=0.0):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ClampWarning)
        if result.dof is None:
            out = tn_cdf(result.statistic, mu, result.truncation), tn_sf(result.statistic, mu, result.truncation)
        else:
            out = (tt_cdf(result.statistic, mu, result.dof, result.truncation),
                   tt_sf(result.statistic, mu, result.dof, result.truncation))
    if caught and "clamped" not in result.warnings:
        result.warnings.append("clamped")
    return out


def pvalue(result, sided="two"):
    """Selective p-value for ``eta^T f = 0``.

    ``sided="two"`` gives ``2 min(F, 1 - F)`` with ``F`` the truncated CDF
    at the observed statistic; ``sided="one"`` tests the alternative in the
    direction of the detected sign.
    """
    cdf, sf = _cdf_sf(result)
    if sided == "two":
        return float(min(1.0, 2.0 * min(cdf, sf)))
    if sided == "one":
        return float(sf if result.sign >= 0 else cdf)
    raise InputError(f"sided must be 'one' or 'two', got {sided!r}")


def _invert(result, target):
    if result.dof is None:
        return invert_mean_tn(result.statistic, result.truncation, target)
    return invert_mean_tt(result.statistic, result.dof, result.truncation, target)


def confidence_interval(result, level=0.95, sided="two"):
    """Selective interval for ``eta^T f`` on its natural scale.

    An end whose inversion diverges is reported as infinite and flagged
    ``"inversion-diverged"`` (the statistic sits next to a finite end of its
    truncation set).
    """
    alpha = 1.0 - level
    if not 0 < alpha < 1:
        raise InputError(f"level must lie in (0, 1), got {level}")
    if sided == "two":
        targets = (alpha / 2.0, 1.0 - alpha / 2.0)
    elif sided == "one":
        targets = (alpha, None) if result.sign >= 0 else (None, 1.0 - alpha)
    else:
        raise InputError(f"sided must be 'one' or 'two', got {sided!r}")
    ends = []
    for k, target in enumerate(targets):
        if target is None:
            ends.append(-np.inf if k == 0 else np.inf)
            continue
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", ClampWarning)
                ends.append(_invert(result, target) * result.scale)
        except InversionError:
            ends.append(-np.inf if k == 0 else np.inf)
            if "inversion-diverged" not in result.warnings:
                result.warnings.append("inversion-diverged")
    return float(ends[0]), float(ends[1])


def finish(result, level=0.95, sided="two"):
    """Fill in p-values and the interval of a result in progress."""
    result.level = level
    result.sided = sided
    result.p_two = pvalue(result, "two")
    result.p_one = pvalue(result, "one")
    result.ci = confidence_interval(result, level, sided)
    return result


def infer_poly(detection, j, contrast="spike", sigma=None, level=0.95, sided="two", h=None,
               poly=None, eta=None):
    """Polyhedron inference for the ``j``-th (0-based) detected change point.

    Parameters
    ----------
    detection : prutf.dualpath.DetectionResult
    contrast : str
        Contrast kind (see :func:`build_contrast`).
    sigma : float, optional
        Known noise level; ``None`` switches to the selective t law.
    poly : Polyhedron, optional
        Precomputed selection event (built from ``detection`` otherwise).
    """
    from .polyhedron import build_polyhedron

    y = detection.record.y
    n, r = y.size, detection.record.D.r
    offset = int(detection.primal_points[0] - detection.dual_points[0]) if detection.dual_points.size else 0
    con = build_contrast(contrast, detection.dual_points, j, n, r, h=h, offset=offset, eta=eta)
    if poly is None:
        poly = build_polyhedron(detection)
    stats = nuisance_stats(y, con.eta, detection.primal_points, r)
    estimate = float(con.eta @ y)
    sign = int(detection.signs[j])
    if sigma is not None:
        lower, upper, _ = z_truncation_bounds(poly, con.eta, sigma, stats.orthogonal)
        scale = sigma * con.norm
        result = InferenceResult("poly", "known", estimate / scale, TruncationSet.interval(lower, upper),
                                 scale, estimate, None, sign, con.target, contrast)
    else:
        lower, upper = t_truncation_bounds(poly, con.eta, stats, y)
        scale = stats.sigma_hat * con.norm
        result = InferenceResult("poly", "pooled", estimate / scale, TruncationSet.interval(lower, upper),
                                 scale, estimate, stats.dof, sign, con.target, contrast)
    if not result.truncation.contains(result.statistic):
        result.warnings.append("clamped")
    return finish(result, level, sided)
