"""Dual solution path of trend filtering with block-pinned boundary sets.

Each detected change point ``tau`` (a 0-based row of ``D``) contributes a
boundary block ``tau - r_b .. tau`` and an augmented block
``tau - r_b .. tau + r_a``.  Every augmented coordinate is held at
``lambda * s``; the remaining (interior) coordinates follow the affine
trajectory ``a - lambda * b``.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .diffops import build_difference_operator, factor_gram
from .exceptions import DimensionError, PathError

#: Denominators smaller than this make a hitting time unavailable.
DENOMINATOR_FLOOR = 1e-12
#: Relative tolerance (times ``lambda_1``) for knot comparisons.
KNOT_RTOL = 1e-9


def block_sizes(r, pinning="augmented"):
    """Return ``(r_b, r_a)`` for degree ``r``.

    ``pinning="boundary"`` gives single-coordinate blocks, which turns the
    algorithm into the plain trend-filtering dual path.
    """
    if pinning == "boundary":
        return 0, 0
    if pinning != "augmented":
        raise ValueError(f"unknown pinning mode {pinning!r}")
    r_b = -(-(r + 1) // 2) - 1
    r_a = (r + 1) // 2
    return r_b, r_a


@dataclass(frozen=True)
class Candidate:
    """A proposed join or leave.

    ``coordinate`` is the change point that joins or leaves; ``index`` is the
    dual coordinate whose hitting time won (they differ only when boundary
    blocks hold more than one coordinate).
    """

    coordinate: int
    sign: int
    knot: float
    index: int = -1


@dataclass
class PathStep:
    """State of the path on the knot interval that starts at ``knot``.

    Attributes
    ----------
    step : int
        Step counter; ``0`` is the empty state before any join.
    knot : float
        The knot ``lambda_j`` at which this state was entered.
    event : str
        ``"start"``, ``"join"`` or ``"leave"``.
    coordinate : int or None
        Change point (0-based dual row) that joined or left.
    sign : int
        Sign of the joining or leaving change point.
    change_points, change_signs : tuple of int
        Sorted dual change points and their signs.
    augmented, augmented_signs : numpy.ndarray
        Pinned coordinates (sorted) and their signs.
    boundary, boundary_signs : numpy.ndarray
        Subset of ``augmented`` whose KKT sign condition is tracked.
    interior : numpy.ndarray
        Complement of ``augmented`` in ``0..m-1``.
    a, b : numpy.ndarray
        Interior trajectory coefficients.
    """

    D: object = field(repr=False)
    step: int
    knot: float
    event: str
    coordinate: object
    sign: int
    change_points: tuple
    change_signs: tuple
    augmented: np.ndarray = field(repr=False)
    augmented_signs: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    boundary_signs: np.ndarray = field(repr=False)
    interior: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    b: np.ndarray = field(repr=False)
    factor: object = field(repr=False)
    pinning: str = "augmented"

    @property
    def blocks(self):
        """``(r_b, r_a)`` for this state's pinning mode."""
        return block_sizes(self.D.r, self.pinning)

    @property
    def residual_count(self):
        """Number of interior coordinates ``k = m - |A|``."""
        return int(self.interior.size)

    @cached_property
    def pinned_direction(self):
        """``D_A^T s_A`` as a length-``n`` vector."""
        u = np.zeros(self.D.m)
        u[self.augmented] = self.augmented_signs
        return self.D.apply_transpose(u)

    @cached_property
    def interior_operator(self):
        """Dense ``(D_{-A} D_{-A}^T)^{-1} D_{-A}``, one row per interior coordinate."""
        return self.factor.operator

    def dual(self, lam):
        """Dual vector at ``lam`` under this state's affine trajectory."""
        u = np.empty(self.D.m)
        u[self.augmented] = lam * self.augmented_signs
        u[self.interior] = self.a - lam * self.b
        return u


def _state(D, y, step, knot, event, coordinate, sign, change_points, change_signs,
           pinning="augmented"):
    r_b, r_a = block_sizes(D.r, pinning)
    aug, aug_s, bnd, bnd_s = [], [], [], []
    for tau, s in zip(change_points, change_signs):
        aug.extend(range(tau - r_b, tau + r_a + 1))
        aug_s.extend([s] * (r_b + r_a + 1))
        bnd.extend(range(tau - r_b, tau + 1))
        bnd_s.extend([s] * (r_b + 1))
    aug = np.asarray(aug, dtype=int)
    order = np.argsort(aug, kind="stable")
    aug, aug_s = aug[order], np.asarray(aug_s, dtype=float)[order]
    bnd = np.asarray(bnd, dtype=int)
    order = np.argsort(bnd, kind="stable")
    bnd, bnd_s = bnd[order], np.asarray(bnd_s, dtype=float)[order]
    if np.any(np.diff(aug) <= 0):
        raise PathError("augmented blocks overlap")
    mask = np.ones(D.m, dtype=bool)
    mask[aug] = False
    interior = np.flatnonzero(mask)
    factor = factor_gram(D, interior)
    a = factor.solve_projected(y)
    state = PathStep(
        D=D, step=step, knot=float(knot), event=event, coordinate=coordinate, sign=int(sign),
        change_points=tuple(int(t) for t in change_points),
        change_signs=tuple(int(s) for s in change_signs),
        augmented=aug, augmented_signs=aug_s, boundary=bnd, boundary_signs=bnd_s,
        interior=interior, a=a, b=np.zeros_like(a), factor=factor, pinning=pinning,
    )
    if aug.size:
        state.b = factor.solve_projected(state.pinned_direction)
    return state


def start_state(y, D, pinning="augmented"):
    """The empty state (no change points) from which the path begins."""
    y = _check_y(y, D)
    return _state(D, y, 0, np.inf, "start", None, 0, (), (), pinning)


def _check_y(y, D):
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size != D.n:
        raise DimensionError(f"y must have length {D.n}, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise DimensionError("y contains non-finite values")
    return y


def eligible_joins(state):
    """Interior coordinates whose whole augmented block is free.

    A coordinate ``i`` can join only when ``i - r_b .. i + r_a`` lies inside
    ``0..m-1`` and avoids every existing augmented block.
    """
    D = state.D
    r_b, r_a = state.blocks
    free = np.ones(D.m + D.r + 1, dtype=bool)
    free[state.augmented] = False
    free[D.m:] = False
    ok = np.ones(state.interior.size, dtype=bool)
    for off in range(-r_b, r_a + 1):
        idx = state.interior + off
        inside = (idx >= 0) & (idx < D.m)
        ok &= inside
        ok[inside] &= free[idx[inside]]
    return ok


def join_times(state):
    """Hitting times ``a_i / (s + b_i)`` for both signs.

    Returns
    -------
    times : numpy.ndarray, shape (k, 2)
        Column 0 for ``s = +1`` and column 1 for ``s = -1``; unavailable
        entries are ``-inf``.
    """
    a, b = state.a, state.b
    times = np.full((a.size, 2), -np.inf)
    for col, s in enumerate((1.0, -1.0)):
        den = s + b
        good = np.abs(den) >= DENOMINATOR_FLOOR
        times[good, col] = a[good] / den[good]
    times[~eligible_joins(state)] = -np.inf
    return times


def next_join_candidate(state, y=None, tol=0.0):
    """Best join below the current knot, or ``None``.

    The ratio ``a_i / (s + b_i)`` is maximised over eligible interior ``i``
    and ``s`` in ``{+1, -1}``, restricted to ``(0, knot - tol)``.  Ties go
    to the smallest coordinate and then to ``s = +1``.
    """
    if state.interior.size == 0:
        return None
    times = join_times(state)
    upper = state.knot - tol if np.isfinite(state.knot) else np.inf
    times[(times <= 0) | (times >= upper)] = -np.inf
    best = times.max()
    if not np.isfinite(best):
        return None
    # Row-major flat argmax gives smallest index, then s = +1.
    row, col = divmod(int(np.argmax(times)), 2)
    i = int(state.interior[row])
    return Candidate(i, 1 if col == 0 else -1, float(best), i)


def leave_coefficients(state, y):
    """Vectors ``c`` and ``d`` over the boundary set.

    ``c - lambda * d`` is the signed primal difference at each boundary
    coordinate; it must stay nonnegative while the coordinate is pinned.
    """
    D = state.D
    u = np.zeros(D.m)
    u[state.interior] = state.a
    c = state.boundary_signs * D.apply(y - D.apply_transpose(u))[state.boundary]
    u[state.interior] = state.b
    d = state.boundary_signs * D.apply(state.pinned_direction - D.apply_transpose(u))[state.boundary]
    return c, d


def owner(state, coordinate):
    """Change point whose boundary block contains ``coordinate``."""
    r_b, _ = state.blocks
    for tau in state.change_points:
        if tau - r_b <= coordinate <= tau:
            return tau
    raise PathError(f"coordinate {coordinate} is not on the boundary")


def next_leave_candidate(state, y, tol=0.0):
    """Best leave below the current knot, or ``None``.

    Maximises ``c_i / d_i`` over boundary ``i`` with ``c_i <= 0`` and
    ``d_i < 0``.  The returned coordinate is the owning change point.
    """
    if state.boundary.size == 0:
        return None
    c, d = leave_coefficients(state, _check_y(y, state.D))
    times = np.full(c.size, -np.inf)
    ok = (c <= 0) & (d < 0)
    times[ok] = c[ok] / d[ok]
    times[(times <= 0) | (times >= state.knot - tol)] = -np.inf
    best = times.max()
    if not np.isfinite(best):
        return None
    i = int(np.argmax(times))
    tau = owner(state, int(state.boundary[i]))
    return Candidate(tau, int(state.boundary_signs[i]), float(best), int(state.boundary[i]))


def initialize_path(y, D, pinning="augmented"):
    """First step: the coordinate of largest ``|(D D^T)^{-1} D y|``.

    Returns
    -------
    PathStep or None
        ``None`` when ``D y`` vanishes (no change point can join).
    """
    state = start_state(y, D, pinning)
    return _first_step(state, y)


def _first_step(state, y):
    mag = np.abs(state.a)
    mag[~eligible_joins(state)] = -np.inf
    i = int(np.argmax(mag))
    lam = float(mag[i])
    if not lam > 0:
        return None
    tau = int(state.interior[i])
    s = 1 if state.a[i] > 0 else -1
    return _state(state.D, np.asarray(y, dtype=float), 1, lam, "join", tau, s, (tau,), (s,),
                  state.pinning)


def decide(join, leave, tol=0.0):
    """Pick the larger hitting time; join wins ties within ``tol``."""
    if join is None and leave is None:
        return None, None
    if leave is None:
        return "join", join
    if join is None:
        return "leave", leave
    if join.knot >= leave.knot - tol:
        return "join", join
    return "leave", leave


def advance_step(state, y, tol=0.0):
    """Move to the next knot.

    Returns
    -------
    (PathStep or None, Candidate or None, Candidate or None)
        The new state (``None`` when the path has reached ``lambda = 0``),
        and the join and leave candidates that were compared.
    """
    y = _check_y(y, state.D)
    if state.step == 0:
        new = _first_step(state, y)
        join = None if new is None else Candidate(new.coordinate, new.sign, new.knot, new.coordinate)
        return new, join, None
    join = next_join_candidate(state, y, tol)
    leave = next_leave_candidate(state, y, tol)
    kind, cand = decide(join, leave, tol)
    if kind is None:
        return None, join, leave
    taus = list(state.change_points)
    signs = list(state.change_signs)
    if kind == "join":
        pos = int(np.searchsorted(taus, cand.coordinate))
        taus.insert(pos, cand.coordinate)
        signs.insert(pos, cand.sign)
    else:
        pos = taus.index(cand.coordinate)
        del taus[pos]
        del signs[pos]
    knot = min(cand.knot, state.knot)
    new = _state(state.D, y, state.step + 1, knot, kind, cand.coordinate, cand.sign, taus, signs,
                 state.pinning)
    return new, join, leave


@dataclass
class StepEvent:
    """Everything needed to rebuild the selection event of one transition."""

    before: PathStep = field(repr=False)
    after: object = field(repr=False)
    join: object
    leave: object
    kind: str


@dataclass
class PathRecord:
    """Sequence of path states plus the transitions between them."""

    y: np.ndarray = field(repr=False)
    D: object = field(repr=False)
    states: list = field(default_factory=list, repr=False)
    events: list = field(default_factory=list, repr=False)
    floor: float = 0.0

    @property
    def knots(self):
        return np.array([s.knot for s in self.states[1:]])

    @property
    def last(self):
        return self.states[-1]


@dataclass(frozen=True)
class PathConfig:
    """Run settings for :func:`run_path`.

    Attributes
    ----------
    max_steps : int or None
        Hard cap on steps; ``None`` means ``min(m, 2n)``.
    sigma, alpha : float or None
        Enable the bridge stopping rule when both are given.
    offset : int or None
        Shift from dual to primal locations; ``None`` means ``r_a``.
    pinning : {"augmented", "boundary"}
        ``"augmented"`` pins ``r + 1`` coordinates per change point;
        ``"boundary"`` pins only the coordinates that hit the boundary,
        reproducing the exact trend-filtering dual path.
    stop_scale : str
        Variance scale of the stopping threshold, see
        :func:`prutf.stopping.variance_scale`.
    """

    max_steps: object = None
    sigma: object = None
    alpha: object = None
    offset: object = None
    pinning: str = "augmented"
    stop_scale: str = "auto"

    @property
    def uses_stopping(self):
        return self.sigma is not None and self.alpha is not None


@dataclass
class DetectionResult:
    """Detected change points.

    ``dual_points`` are 1-based rows of ``D``; ``primal_points`` are the
    sample indices ``t`` such that a segment ends at ``t``.
    """

    dual_points: np.ndarray
    primal_points: np.ndarray
    signs: np.ndarray
    steps: int
    stop_reason: str
    record: PathRecord = field(repr=False)
    stop_checks: list = field(default_factory=list, repr=False)

    @property
    def n_change_points(self):
        return int(self.dual_points.size)

    def as_dict(self):
        return {
            "dual_points": self.dual_points.tolist(),
            "primal_points": self.primal_points.tolist(),
            "signs": self.signs.tolist(),
            "steps": self.steps,
            "stop_reason": self.stop_reason,
            "knots": self.record.knots.tolist(),
        }


def run_path(y, r, config=None, **kwargs):
    """Run the dual path until a step cap, the stopping rule or ``lambda = 0``.

    Parameters
    ----------
    y : array_like, shape (n,)
        Observations.
    r : int
        Polynomial degree.
    config : PathConfig, optional
        Run settings; keyword arguments build one when omitted.

    Returns
    -------
    DetectionResult
    """
    from .stopping import stop_check

    if config is None:
        config = PathConfig(**kwargs)
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < r + 3:
        raise DimensionError(f"need at least r + 3 = {r + 3} observations")
    D = build_difference_operator(y.size, r)
    _, r_a = block_sizes(r)
    block_sizes(r, config.pinning)
    offset = r_a if config.offset is None else int(config.offset)
    cap = min(D.m, 2 * D.n) if config.max_steps is None else int(config.max_steps)

    state = start_state(y, D, config.pinning)
    record = PathRecord(y=y, D=D, states=[state])
    checks = []
    reason = "max-steps"
    tol = 0.0
    while True:
        if config.uses_stopping:
            check = stop_check(state, config.sigma, config.alpha, config.stop_scale)
            checks.append(check)
            if check.stop:
                reason = "stopping-rule"
                break
        if state.step >= cap:
            reason = "max-steps"
            break
        new, join, leave = advance_step(state, y, tol)
        record.events.append(StepEvent(state, new, join, leave, "none" if new is None else new.event))
        if new is None:
            reason = "lambda-zero"
            break
        if new.step == 1:
            tol = KNOT_RTOL * new.knot
        if new.knot > state.knot:
            raise PathError("knots increased along the path")
        state = new
        record.states.append(state)

    if reason == "lambda-zero":
        record.floor = 0.0
    elif state.step > 0:
        nxt = _peek_next_knot(state, y, tol)
        record.floor = nxt
    else:
        record.floor = np.inf
    taus = np.array(state.change_points, dtype=int) + 1
    return DetectionResult(
        dual_points=taus,
        primal_points=taus + offset,
        signs=np.array(state.change_signs, dtype=int),
        steps=state.step,
        stop_reason=reason,
        record=record,
        stop_checks=checks,
    )


def _peek_next_knot(state, y, tol):
    kind, cand = decide(next_join_candidate(state, y, tol), next_leave_candidate(state, y, tol), tol)
    return 0.0 if cand is None else min(cand.knot, state.knot)


def dual_at(record, lam):
    """Dual vector at ``lam`` from the recorded piecewise-linear path.

    Raises
    ------
    ValueError
        If ``lam`` is outside the range covered by the record.
    """
    lam = float(lam)
    states = record.states[1:]
    if not states:
        raise ValueError("the path has no knots")
    lam1 = states[0].knot
    if lam > lam1 * (1 + 1e-12) or lam < record.floor * (1 - 1e-12) or lam < 0:
        raise ValueError(f"lambda={lam} outside the recorded range [{record.floor}, {lam1}]")
    # States are ordered by decreasing knot; pick the last one with knot >= lam.
    chosen = states[0]
    for s in states:
        if s.knot >= lam:
            chosen = s
        else:
            break
    return chosen.dual(lam)


def primal_at(record, lam):
    """Primal fit ``y - D^T u(lam)``."""
    return record.y - record.D.apply_transpose(dual_at(record, lam))
