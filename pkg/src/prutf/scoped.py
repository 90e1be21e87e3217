"""Global and local post-detection inference for a single change point.

Global inference conditions only on the target change point being on the
boundary; local inference does the same on the window between its two
neighbours with everything outside the window held fixed.  The statistic
is the difference-operator row at the change point and its null law is a
normal or t law truncated to a two-ray set ``(-inf, V-] U [V+, inf)``.
By default the rays are the exact slice of the event at a fixed
``lambda`` inside the last knot interval (:func:`slice_bounds`).
"""

from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from .diffops import build_difference_operator, partition_projection
from .dualpath import _state, eligible_joins, leave_coefficients, owner
from .exceptions import InputError, PathError
from .inference import InferenceResult, finish
from .truncdist import TruncationSet

#: Normal-consistency constant of the median absolute deviation.
MAD_SCALE = 1.4826
VARIANCE_MODES = ("known", "pooled", "mad")
CONDITIONING_MODES = ("fixed-lambda", "frozen-dual")
#: Rates below this cannot move a coordinate onto its bound.
SLICE_RATE_FLOOR = 1e-12
#: A coordinate that has just joined may not leave within this distance.
SLICE_STEP_FLOOR = 1e-10
#: Walk length cap, relative to the observed difference plus ``lambda ||D_row||^2``.
SLICE_REACH = 50.0
SLICE_MAX_EVENTS = 10000


class UnknownChangePointError(InputError):
    """The requested change point is not part of the detection."""


class SegmentTooShortError(InputError):
    """The local window leaves no residual degrees of freedom."""


class NotApplicableError(InputError):
    """A bound is requested outside the range where it holds."""


def mad_sigma(y, r):
    """Robust noise level from the ``(r + 1)``-th differences of ``y``.

    The median absolute deviation of ``D y`` is scaled by ``MAD_SCALE`` and
    divided by the norm of a row of ``D`` (``sqrt(2)`` for ``r = 0``).
    """
    y = np.asarray(y, dtype=float)
    if y.size < r + 3:
        raise InputError(f"need at least r + 3 = {r + 3} observations")
    D = build_difference_operator(y.size, r)
    dy = D.apply(y)
    mad = np.median(np.abs(dy - np.median(dy)))
    return float(MAD_SCALE * mad / D.row_norm)


@dataclass(frozen=True)
class ScopedBounds:
    """Two-ray truncation data for one change point.

    ``lower``/``upper`` are in units of the statistic; ``knot`` is the
    value of ``lambda`` whose dual vector produced them.
    """

    scope: str
    lower: float
    upper: float
    knot: float
    step: int
    scale: float
    row_norm: float
    dof: int = None
    window: tuple = None
    conditioning: str = "fixed-lambda"
    status: str = "two-ray"

    @property
    def truncation(self):
        if np.isinf(self.lower):
            return TruncationSet.interval(self.upper, np.inf)
        if np.isinf(self.upper):
            return TruncationSet.interval(-np.inf, self.lower)
        return TruncationSet.two_ray(self.lower, self.upper)

    @property
    def gap(self):
        return self.upper - self.lower


def joining_state(record, tau):
    """Path state right after the surviving entry of change point ``tau``.

    ``tau`` is a 1-based dual index.  If it joined, left and joined again,
    the most recent join (the one present at the end of the path) is used.

    Raises
    ------
    UnknownChangePointError
        If ``tau`` is not a change point at the end of the path.
    """
    coord = int(tau) - 1
    if coord not in record.last.change_points:
        raise UnknownChangePointError(f"{tau} is not a detected change point")
    for state in reversed(record.states[1:]):
        if state.event == "join" and state.coordinate == coord:
            return state
    raise UnknownChangePointError(f"no join of {tau} in the path record")


def _sample_positions(detection):
    return [int(p) for p in detection.primal_points]


def _split_sigma(y, cut, r):
    """Noise level and degrees of freedom of a two-piece polynomial fit."""
    n = y.size
    proj = partition_projection([cut], n, r)
    dof = n - proj.rank
    if dof < 1:
        raise SegmentTooShortError(f"no residual degrees of freedom in a window of {n}")
    res = proj.residual(y)
    return float(np.sqrt(res @ res / dof)), dof


def fixed_lambda(record):
    """A ``lambda`` strictly inside the last knot interval of the path."""
    last = record.last
    floor = record.floor if np.isfinite(record.floor) else 0.0
    return 0.5 * (last.knot + max(floor, 0.0))


def _rates(state, w):
    """Derivatives of the interior duals and boundary slacks along ``w``."""
    D = state.D
    da = state.factor.solve_projected(w) if state.interior.size else np.zeros(0)
    u = np.zeros(D.m)
    u[state.interior] = da
    dg = state.boundary_signs * D.apply(w - D.apply_transpose(u))[state.boundary]
    return da, dg


def _hit_distances(state, y, w, lam, direction, fresh, target, track="all"):
    """Distance along ``direction * w`` to the first join and the first leave."""
    da, dg = _rates(state, w)
    best_join, best_leave = (np.inf, None, 0), (np.inf, None)
    if state.interior.size:
        u = state.a - lam * state.b
        rate = direction * da
        ok = eligible_joins(state) & (np.abs(rate) > SLICE_RATE_FLOOR)
        if track == "target":
            ok &= state.interior == target
        for sign in (1.0, -1.0):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (sign * lam - u) / rate
            t[~ok | (t < 0)] = np.inf
            k = int(np.argmin(t))
            if t[k] < best_join[0]:
                best_join = (float(t[k]), int(state.interior[k]), int(sign))
    if state.boundary.size:
        c, d = leave_coefficients(state, y)
        # Only coordinates the path itself could release (d < 0) and the
        # target are constrained; only a crossing from c - lam d > 0 counts.
        g = c - lam * d
        rate = direction * dg
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -g / rate
        owners = np.array([owner(state, int(k)) for k in state.boundary])
        releasable = ((d < 0) & (track == "all")) | (owners == target)
        t[(rate >= -SLICE_RATE_FLOOR) | (t < 0) | ~releasable | (g < 0)] = np.inf
        t[np.isin(owners, list(fresh)) & (t <= SLICE_STEP_FLOOR)] = np.inf
        k = int(np.argmin(t))
        if t[k] < best_leave[0]:
            best_leave = (float(t[k]), owner(state, int(state.boundary[k])))
    return best_join, best_leave


def slice_bounds(D, y, change_points, signs, lam, target, pinning="augmented", track="all"):
    """Two-ray slice of ``{target is a change point at lambda}`` along ``D_target^T``.

    Holds ``lam`` fixed and moves ``y`` along ``w = D_target^T / ||D_target||^2``
    so that ``D_target y`` changes at unit rate.  Active-set changes are
    tracked exactly: interior duals hitting ``+-lam`` join and boundary
    coordinates whose signed primal difference reaches zero leave.  Walking
    from the observed value towards zero, the target leaves at the inner
    end of its ray; walking on, it rejoins with the opposite sign at the
    inner end of the other ray.

    With ``track="target"`` every other coordinate keeps its role.

    Returns
    -------
    (lower, upper, status) : (float, float, str)
        Ends of ``(-inf, lower] U [upper, inf)`` in units of ``D_target y``.
        ``status`` is ``"two-ray"``; ``"not-two-ray"`` when the target
        re-entered with its own sign along the way (the slice then also
        holds part of the gap and the rays are a subset of it); or ``"untruncated"`` when the target never
        left within reach, in which case ``lower == upper``.
    """
    y = np.asarray(y, dtype=float).copy()
    taus, sgns = list(change_points), list(signs)
    s = sgns[taus.index(target)]
    drow = D.row(target)
    w = drow / (drow @ drow)
    direction = -float(s)
    value = float(D.apply(y)[target])
    inner = outer = None
    status = "two-ray"
    fresh = set()
    reach = SLICE_REACH * (abs(value) + lam * float(drow @ drow) + 1.0)
    travelled = 0.0
    for _ in range(SLICE_MAX_EVENTS):
        state = _state(D, y, 0, lam, "start", None, 0, taus, sgns, pinning)
        (tj, cj, sj), (tl, cl) = _hit_distances(state, y, w, lam, direction, fresh, target, track)
        t = min(tj, tl)
        if not np.isfinite(t) or travelled + t > reach:
            break
        y += direction * t * w
        value += direction * t
        travelled += t
        fresh = set()
        if tj <= tl:
            pos = int(np.searchsorted(taus, cj))
            taus.insert(pos, cj)
            sgns.insert(pos, sj)
            fresh.add(cj)
            if cj == target:
                if sj == s:
                    status = "not-two-ray"
                else:
                    outer = value
                    break
        else:
            pos = taus.index(cl)
            del taus[pos]
            del sgns[pos]
            if cl == target and inner is None:
                inner = value
    else:
        raise PathError("slice walk did not settle")
    if inner is None:
        # The target stays on the boundary everywhere the walk reached:
        # no usable truncation.
        return value, value, "untruncated"
    if outer is None:
        outer = -s * np.inf
    if s > 0:
        return outer, inner, status
    return inner, outer, status


def scoped_bounds(detection, j, scope="global", variance="known", sigma=None,
                  conditioning="fixed-lambda", knot="join", track="all"):
    """Statistic and two-ray bounds for the ``j``-th (0-based) change point.

    Parameters
    ----------
    detection : prutf.dualpath.DetectionResult
    scope : {"global", "local"}
        ``local`` works on the samples between the two neighbouring change
        points (series ends at the extremes) with every dual coordinate
        outside that window held at its fitted value.
    variance : {"known", "pooled", "mad"}
        ``known`` needs ``sigma``; ``pooled`` fits two pieces split at the
        change point (over the whole series or over the local window);
        ``mad`` uses :func:`mad_sigma` of the whole series in the statistic
        and the bounds, with the pooled degrees of freedom.
    conditioning : {"fixed-lambda", "frozen-dual"}
        ``fixed-lambda`` (default) computes the exact slice of the event
        that the change point is on the boundary at a fixed ``lambda``
        inside the last knot interval, see :func:`slice_bounds`.
        ``frozen-dual`` holds every other dual coordinate at its value at
        ``knot`` and reads the bounds off the KKT contact directly.
    knot : {"join", "final"}
        Knot used by ``frozen-dual``: where the change point joined, or the
        last knot of the path.
    track : {"all", "target"}
        Active-set changes followed by the ``fixed-lambda`` walk: every join
        and leave, or only those of the target with the rest frozen.

    Returns
    -------
    (statistic, estimate, ScopedBounds)
    """
    if variance not in VARIANCE_MODES:
        raise InputError(f"unknown variance mode {variance!r}")
    if scope not in ("global", "local"):
        raise InputError(f"unknown scope {scope!r}")
    if conditioning not in CONDITIONING_MODES:
        raise InputError(f"unknown conditioning {conditioning!r}")
    record = detection.record
    y = record.y
    n, r = y.size, record.D.r
    taus = [int(t) for t in detection.dual_points]
    if not 0 <= j < len(taus):
        raise UnknownChangePointError(f"change point index {j} out of range")
    tau = taus[j]
    if conditioning == "fixed-lambda":
        state, lam = record.last, fixed_lambda(record)
    elif knot == "join":
        state = joining_state(record, tau)
        lam = float(state.knot)
    else:
        state = record.last
        lam = float(state.knot)
    dual = state.dual(lam)
    spots = [0] + _sample_positions(detection) + [n]

    if scope == "global":
        lo, hi = 0, n
    else:
        lo, hi = spots[j], spots[j + 2]
    Dw = build_difference_operator(hi - lo, r) if hi - lo >= r + 2 else None
    row = tau - 1 - lo
    if Dw is None or not 0 <= row < Dw.m:
        raise SegmentTooShortError(f"change point {tau} has no difference row in its window")
    inside = np.zeros(record.D.m, dtype=bool)
    inside[lo:lo + Dw.m] = True
    outside = np.where(inside, 0.0, dual)
    ywin = y[lo:hi]
    yeff = (y - record.D.apply_transpose(outside))[lo:hi]
    drow = Dw.row(row)
    norm2 = float(drow @ drow)
    norm = np.sqrt(norm2)
    estimate = float(drow @ ywin)

    status = "two-ray"
    if conditioning == "fixed-lambda":
        r_b, r_a = state.blocks
        local = [(t - lo, sg) for t, sg in zip(state.change_points, state.change_signs)
                 if t - r_b >= lo and t + r_a < lo + Dw.m]
        lower, upper, status = slice_bounds(Dw, yeff, [t for t, _ in local], [sg for _, sg in local],
                                             lam, row, state.pinning, track)
        # The slice is in units of D_row y_eff; shift to D_row y.
        shift = estimate - float(drow @ yeff)
        lower, upper = lower + shift, upper + shift
    else:
        uw = dual[lo:lo + Dw.m].copy()
        uw[row] = 0.0
        cross = float(drow @ Dw.apply_transpose(uw))
        lower = -lam * norm2 + cross
        upper = lam * norm2 + cross

    cut = spots[j + 1] - lo
    dof = None
    if variance == "known":
        if sigma is None or not sigma > 0:
            raise InputError("known variance needs a positive sigma")
        scale = float(sigma)
    elif variance == "pooled":
        scale, dof = _split_sigma(ywin, cut, r)
    else:
        scale = mad_sigma(y, r)
        dof = _split_sigma(ywin, cut, r)[1]
    if not scale > 0:
        raise InputError("the noise estimate is zero")
    unit = scale * norm
    bounds = ScopedBounds(scope, float(lower / unit), float(upper / unit), lam, state.step, scale,
                          float(norm), dof, (lo, hi), conditioning, status)
    return estimate / unit, estimate, bounds


def scoped_inference(detection, j, scope="global", variance="known", sigma=None, level=0.95,
                     sided="two", conditioning="fixed-lambda", knot="join", track="all"):
    """Global or local selective test and interval for ``D_tau f``.

    See :func:`scoped_bounds` for the arguments.
    """
    stat, estimate, bounds = scoped_bounds(detection, j, scope, variance, sigma, conditioning, knot, track)
    result = InferenceResult(
        scope, variance, float(stat), bounds.truncation, bounds.scale * bounds.row_norm, estimate,
        bounds.dof, int(detection.signs[j]), int(detection.dual_points[j]), "spike",
    )
    if bounds.status != "two-ray":
        result.warnings.append(f"slice-{bounds.status}")
    if not result.truncation.contains(result.statistic):
        result.warnings.append("clamped")
    return finish(result, level, sided)


def global_inference(detection, j, variance="known", sigma=None, level=0.95, sided="two", **kwargs):
    """Inference conditioning only on the target change point being detected."""
    return scoped_inference(detection, j, "global", variance, sigma, level, sided, **kwargs)


def local_inference(detection, j, variance="known", sigma=None, level=0.95, sided="two", **kwargs):
    """Inference conditioning on the target and its two neighbours."""
    return scoped_inference(detection, j, "local", variance, sigma, level, sided, **kwargs)


def ci_length_upper_bound(bounds, alpha=0.05, family="normal"):
    """Upper bound on the length of a scoped two-sided interval.

    Lengths are in units of the statistic; multiply by
    ``bounds.scale * bounds.row_norm`` for the scale of ``D_tau f``.

    Returns
    -------
    (bound, condition) : (float, bool)
        For the normal family the bound ``2 z_(1-alpha/2) + gap`` always
        holds.  For the t family with ``d`` degrees of freedom the bound
        ``2 t_(d, 1-alpha/2) + gap`` is asserted when
        ``alpha G_d(-gap/2) >= G_d(G_d^{-1}(alpha/2) - gap/2)``.

    Raises
    ------
    NotApplicableError
        For the t family with fewer than 3 degrees of freedom.
    """
    gap = max(bounds.gap, 0.0)
    if family == "normal":
        return 2.0 * float(sps.norm.ppf(1.0 - alpha / 2.0)) + gap, True
    d = bounds.dof
    if d is None or d < 3:
        raise NotApplicableError("the t bound needs at least 3 degrees of freedom")
    law = sps.t(d)
    flag = alpha * law.cdf(-gap / 2.0) >= law.cdf(law.ppf(alpha / 2.0) - gap / 2.0)
    return 2.0 * float(law.ppf(1.0 - alpha / 2.0)) + gap, bool(flag)
