"""Affine description ``{y : A y >= q}`` of the detection event.

Every row is stored densely over ``R^n`` together with its offset and a
provenance tag.  Ratio conditions are cleared of their (``y``-free)
denominators, so each stored row is exactly affine in ``y``.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dualpath import DENOMINATOR_FLOOR
from .exceptions import DimensionError

TAGS = (
    "first-step",
    "join",
    "leave-sign",
    "leave-compare",
    "join-vs-leave",
    "stopping",
    "stopping-continue",
)

#: Slack below ``-SLACK_RTOL * ||y||_inf`` counts as a violation.
SLACK_RTOL = 1e-8


@dataclass
class Polyhedron:
    """Accumulated rows of ``A y >= q``."""

    n: int
    blocks: list = field(default_factory=list, repr=False)
    offsets: list = field(default_factory=list, repr=False)
    tags: list = field(default_factory=list, repr=False)

    def add(self, rows, tag, offset=0.0):
        """Append rows (``(k, n)`` or ``(n,)``) with a common tag."""
        if tag not in TAGS:
            raise ValueError(f"unknown provenance tag {tag!r}")
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[0] == 0:
            return self
        if rows.shape[1] != self.n:
            raise DimensionError(f"rows must have {self.n} columns, got {rows.shape[1]}")
        q = np.broadcast_to(np.asarray(offset, dtype=float), (rows.shape[0],))
        self.blocks.append(rows)
        self.offsets.append(np.array(q))
        self.tags.extend([tag] * rows.shape[0])
        self.__dict__.pop("_cache", None)
        return self

    def _stacked(self):
        cache = self.__dict__.get("_cache")
        if cache is None:
            if self.blocks:
                cache = (np.vstack(self.blocks), np.concatenate(self.offsets))
            else:
                cache = (np.zeros((0, self.n)), np.zeros(0))
            self.__dict__["_cache"] = cache
        return cache

    @property
    def A(self):
        return self._stacked()[0]

    @property
    def q(self):
        return self._stacked()[1]

    @property
    def n_rows(self):
        return len(self.tags)

    def count(self, tag):
        return sum(t == tag for t in self.tags)

    def slack(self, y):
        """``A y - q``."""
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n,):
            raise DimensionError(f"y must have length {self.n}, got shape {y.shape}")
        A, q = self._stacked()
        return A @ y - q

    def contains(self, y, rtol=SLACK_RTOL):
        """Membership test with a report of the tightest row.

        Returns
        -------
        inside : bool
            ``True`` iff every slack is at least ``-rtol * ||y||_inf``.
        report : dict
            ``min_slack``, ``row`` (index of the tightest row) and ``tag``.
        """
        s = self.slack(y)
        if s.size == 0:
            return True, {"min_slack": np.inf, "row": -1, "tag": None}
        i = int(np.argmin(s))
        scale = float(np.max(np.abs(y))) if np.size(y) else 0.0
        inside = bool(s[i] >= -rtol * scale)
        return inside, {"min_slack": float(s[i]), "row": i, "tag": self.tags[i]}

    def to_csv(self, stream=None):
        """Write ``n,rows`` then one line per row: tag, offset, coefficients."""
        out = io.StringIO() if stream is None else stream
        w = csv.writer(out, lineterminator="\n")
        A, q = self._stacked()
        w.writerow([self.n, self.n_rows])
        for tag, qi, row in zip(self.tags, q, A):
            w.writerow([tag, repr(float(qi))] + [repr(float(v)) for v in row])
        return out.getvalue() if stream is None else None

    @classmethod
    def from_csv(cls, text):
        """Inverse of :meth:`to_csv`."""
        rows = list(csv.reader(io.StringIO(text)))
        n, k = int(rows[0][0]), int(rows[0][1])
        poly = cls(n)
        for line in rows[1:k + 1]:
            poly.add(np.array([float(v) for v in line[2:]]), line[0], float(line[1]))
        return poly


def append_first_step_rows(poly, start, step1):
    """Rows ``s_1 M_tau -/+ M_i >= 0`` that make ``tau`` the argmax of ``|M y|``.

    ``M = (D D^T)^{-1} D`` and ``i`` runs over the coordinates eligible to
    join (all of them for the default block layout when ``r = 0``).

    Returns
    -------
    numpy.ndarray
        The knot functional ``kappa`` with ``lambda_1 = kappa @ y``.
    """
    from .dualpath import eligible_joins

    M = start.interior_operator
    pos = int(np.searchsorted(start.interior, step1.coordinate))
    others = np.flatnonzero(eligible_joins(start))
    others = others[others != pos]
    lead = step1.sign * M[pos]
    poly.add(np.concatenate([lead - M[others], lead + M[others]]), "first-step")
    return lead


def _block_rows(state, change_point):
    """Positions (in ``state.interior``) of a change point's former block."""
    r_b, r_a = state.blocks
    members = np.arange(change_point - r_b, change_point + r_a + 1)
    return np.flatnonzero(np.isin(state.interior, members))


def _leave_operator(state):
    """Rows ``C`` with ``C y = c`` over the boundary, plus the vector ``d``."""
    D = state.D
    DB = D.dense[state.boundary]
    M = state.interior_operator
    cross = DB @ D.dense[state.interior].T
    C = state.boundary_signs[:, None] * (DB - cross @ M)
    u = np.zeros(D.m)
    u[state.interior] = state.b
    d = state.boundary_signs * D.apply(state.pinned_direction - D.apply_transpose(u))[state.boundary]
    return C, d


def append_event_rows(poly, event, y, knot_row):
    """Rows encoding one transition of the path after the first step.

    Parameters
    ----------
    poly : Polyhedron
    event : prutf.dualpath.StepEvent
        The transition (state before, candidates compared, outcome).
    y : array_like
        Observations that generated the path.  They decide, for every
        competitor, which side of the comparison it falls on.
    knot_row : numpy.ndarray
        Functional ``kappa`` with ``kappa @ y`` equal to the knot at which
        ``event.before`` was entered.

    Returns
    -------
    numpy.ndarray
        Functional of the new knot.

    Notes
    -----
    Every competing hitting time (both signs of every other eligible join,
    every viable leave) either lies below the winner or at or above the
    previous knot, where the path ignores it.  The side taken by ``y`` is
    conditioned on; for ``r = 0`` the second case never arises.  With
    single-coordinate blocks, hitting times that equal the previous knot by
    construction (the change point that just left, for joins; the one that
    just joined, for leaves) carry no information and are skipped.
    """
    from .dualpath import eligible_joins

    state = event.before
    join, leave = event.join, event.leave
    y = np.asarray(y, dtype=float)
    M = state.interior_operator
    a = state.a
    # With single-coordinate blocks the dual is continuous at every knot, so
    # the change point that just moved sits exactly at the previous knot.
    exact = state.blocks == (0, 0)
    new_knot_row = None
    if join is not None:
        pos = int(np.searchsorted(state.interior, join.index))
        p = join.sign + state.b[pos]
        sp, ap = np.sign(p), abs(p)
        join_knot_row = M[pos] / p
        poly.add(sp * M[pos], "join")
        elig = eligible_joins(state)
        if state.event == "leave" and exact:
            elig[_block_rows(state, state.coordinate)] = False
        below, above = [], []
        for s in (1.0, -1.0):
            qv = s + state.b
            use = elig & (np.abs(qv) >= DENOMINATOR_FLOOR)
            if s == join.sign:
                use[pos] = False
            elif not (abs(qv[pos]) >= DENOMINATOR_FLOOR and np.sign(qv[pos]) == sp):
                # Opposite sign of the winner with opposite-signed denominator:
                # its ratio has the wrong sign and is implied by the sign row.
                use[pos] = False
            idx = np.flatnonzero(use)
            # Anything above the winner was ignored for reaching the previous knot.
            high = a[idx] / qv[idx] > join.knot
            lo_idx, hi_idx = idx[~high], idx[high]
            below.append((sp * np.abs(qv[lo_idx]))[:, None] * M[pos] - (np.sign(qv[lo_idx]) * ap)[:, None] * M[lo_idx])
            if hi_idx.size:
                sh = np.sign(qv[hi_idx])
                above.append(sh[:, None] * (M[hi_idx] - qv[hi_idx][:, None] * knot_row))
        poly.add(np.vstack(below), "join")
        if above:
            poly.add(np.vstack(above), "join")
        new_knot_row = join_knot_row

    if state.boundary.size:
        C, d = _leave_operator(state)
        c = C @ y
        keep = d < 0
        if state.event == "join" and exact:
            r_b, _ = state.blocks
            fresh = (state.boundary >= state.coordinate - r_b) & (state.boundary <= state.coordinate)
            keep &= ~fresh
        viable = keep & (c < 0)
        other = keep & ~(c < 0)
        poly.add(-C[viable], "leave-sign")
        poly.add(C[other], "leave-sign")
        cand = np.flatnonzero(viable)
        times = c[cand] / d[cand]
        if leave is not None:
            ell = int(np.searchsorted(state.boundary, leave.index))
            high = (times > leave.knot) & (cand != ell)
        else:
            high = np.ones(cand.size, dtype=bool)
        hi_idx = cand[high]
        # Leave times at or beyond the previous knot: c_i <= d_i * lambda_prev.
        poly.add(d[hi_idx][:, None] * knot_row - C[hi_idx], "leave-compare")
        if leave is not None:
            rest = cand[~high]
            rest = rest[rest != ell]
            poly.add(d[rest][:, None] * C[ell] - d[ell] * C[rest], "leave-compare")
            if join is not None:
                row = abs(d[ell]) * sp * M[pos] + ap * C[ell]
                poly.add(row if event.kind == "join" else -row, "join-vs-leave")
            if event.kind == "leave":
                new_knot_row = C[ell] / d[ell]
    return new_knot_row


def _transition_parts(event, y):
    """Winner functional and competitor index sets for one transition.

    Returns
    -------
    dict
        ``new_row`` (functional of the new knot, zero when the path ended),
        ``C``/``d`` (leave operator or ``None``), ``joins`` as a list of
        ``(sign, q, lo, hi)`` index arrays into the interior and ``leaves``
        as ``(lo, hi)`` index arrays into the boundary, where ``hi`` holds
        the competitors ignored for hitting at or above the previous knot.
    """
    from .dualpath import eligible_joins

    state = event.before
    M = state.interior_operator
    exact = state.blocks == (0, 0)
    kind = event.kind
    winner = {"join": event.join, "leave": event.leave}.get(kind)
    C = d = None
    if state.boundary.size:
        C, d = _leave_operator(state)
    pos = ell = None
    if kind == "join":
        pos = int(np.searchsorted(state.interior, winner.index))
        new_row = M[pos] / (winner.sign + state.b[pos])
    elif kind == "leave":
        ell = int(np.searchsorted(state.boundary, winner.index))
        new_row = C[ell] / d[ell]
    else:
        new_row = np.zeros(state.D.n)
    lam_new = float(new_row @ y)

    elig = eligible_joins(state)
    if state.event == "leave" and exact:
        elig[_block_rows(state, state.coordinate)] = False
    joins = []
    for s in (1.0, -1.0):
        qv = s + state.b
        use = elig & (np.abs(qv) >= DENOMINATOR_FLOOR)
        if kind == "join" and s == winner.sign:
            use[pos] = False
        idx = np.flatnonzero(use)
        # Nothing hits strictly between the two knots, so the side is read
        # off the new knot alone.
        high = np.sign(qv[idx]) * (M[idx] @ y) > np.abs(qv[idx]) * lam_new
        joins.append((s, qv, idx[~high], idx[high]))

    leaves = (np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    if C is not None:
        keep = d < 0
        if state.event == "join" and exact:
            r_b, _ = state.blocks
            fresh = (state.boundary >= state.coordinate - r_b) & (state.boundary <= state.coordinate)
            keep &= ~fresh
        if ell is not None:
            keep[ell] = False
        idx = np.flatnonzero(keep)
        high = C[idx] @ y < d[idx] * lam_new
        leaves = (idx[~high], idx[high])
    return {"kind": kind, "pos": pos, "ell": ell, "new_row": new_row, "C": C, "d": d,
            "joins": joins, "leaves": leaves}


def append_transition_rows(poly, event, y, knot_row):
    """Rows for one transition, describing exactly the observed outcome.

    Unlike :func:`append_event_rows`, which also fixes the sign of every
    boundary residual and the runner-up of the losing event type, these
    rows only certify that the winning ``(event, coordinate, sign)`` beat
    every competing hitting time.

    Every competitor must hit at or below the new knot ``lambda_new`` (a
    nonpositive time counts as below) or at or above the previous knot.
    Both alternatives are linear in ``y`` given the knot functionals:

    * join ``(i, s)`` with ``q = s + b_i``:
      ``|q| lambda_new - sign(q) a_i >= 0`` or
      ``sign(q) (a_i - q lambda_prev) >= 0``;
    * leave ``i`` with ``d_i < 0``:
      ``c_i - d_i lambda_new >= 0`` or ``d_i lambda_prev - c_i >= 0``.

    A leave with ``c_i >= 0`` falls under the first form, so the rows do
    not depend on which event type would have come second.  The side taken
    by ``y`` is conditioned on; it is part of
    ``selection_signature(..., refined=True)``.

    Parameters and return value are those of :func:`append_event_rows`.
    When the path ended (no event), ``lambda_new = 0`` and ``None`` is
    returned.
    """
    state = event.before
    M = state.interior_operator
    parts = _transition_parts(event, np.asarray(y, dtype=float))
    new_row, C, d = parts["new_row"], parts["C"], parts["d"]
    if parts["kind"] == "join":
        pos = parts["pos"]
        poly.add(np.sign(event.join.sign + state.b[pos]) * M[pos], "join")
        poly.add(knot_row - new_row, "join")
    elif parts["kind"] == "leave":
        poly.add(-C[parts["ell"]], "leave-sign")
        poly.add(knot_row - new_row, "leave-compare")
    for _, qv, lo, hi in parts["joins"]:
        poly.add(np.abs(qv[lo])[:, None] * new_row - np.sign(qv[lo])[:, None] * M[lo], "join")
        poly.add(np.sign(qv[hi])[:, None] * (M[hi] - qv[hi][:, None] * knot_row), "join")
    lo, hi = parts["leaves"]
    if C is not None:
        poly.add(C[lo] - d[lo][:, None] * new_row, "leave-compare")
        poly.add(d[hi][:, None] * knot_row - C[hi], "leave-compare")
    return new_row if parts["kind"] in ("join", "leave") else None


def append_stopping_rows(poly, state, threshold):
    """Rows ``+/- M_t y >= -bound`` for every interior ``t``: the rule fired."""
    M = state.interior_operator
    bound = threshold.bound
    return poly.add(np.concatenate([M, -M]), "stopping", -bound)


def append_continuation_rows(poly, state, check):
    """Rows certifying that the stopping rule did *not* fire at ``state``.

    The coordinate ``t*`` attaining ``max_t |M_t y|`` with sign ``s*`` is
    conditioned on: ``s* M_t* y >= bound`` together with
    ``s* M_t* y >= +/- M_t y`` for the other interior ``t``.  Conditioning
    on the argmax keeps the events for different ``(t*, s*)`` disjoint.
    """
    M = state.interior_operator
    lead = check.sign * M[check.argmax]
    poly.add(lead, "stopping-continue", check.threshold.bound)
    others = np.arange(M.shape[0]) != check.argmax
    return poly.add(np.concatenate([lead - M[others], lead + M[others]]), "stopping-continue")


ROW_STYLES = ("transition", "sign-split")


def build_polyhedron(result, continuation=True, style="transition"):
    """Polyhedron for a finished :class:`~prutf.dualpath.DetectionResult`.

    Parameters
    ----------
    result : DetectionResult
    continuation : bool
        Also condition on the stopping rule not having fired before the
        final step (only relevant when the stopping rule was used).
    style : {"transition", "sign-split"}
        ``"transition"`` (:func:`append_transition_rows`) describes exactly
        the sequence of path transitions.  ``"sign-split"``
        (:func:`append_event_rows`) also fixes the sign of each boundary
        residual, a finer partition with the classical row layout.
    """
    if style not in ROW_STYLES:
        raise ValueError(f"unknown row style {style!r}")
    rows_for = append_transition_rows if style == "transition" else append_event_rows
    record = result.record
    y = record.y
    poly = Polyhedron(record.D.n)
    knot_row = None
    for ev in record.events:
        if ev.after is None:
            break
        if ev.before.step == 0:
            knot_row = append_first_step_rows(poly, ev.before, ev.after)
        else:
            knot_row = rows_for(poly, ev, y, knot_row)
    if result.stop_checks:
        last = result.stop_checks[-1]
        if continuation:
            for state, check in zip(record.states, result.stop_checks[:-1]):
                append_continuation_rows(poly, state, check)
        if result.stop_reason == "stopping-rule" and last.threshold is not None:
            append_stopping_rows(poly, record.states[-1], last.threshold)
    return poly


def selection_signature(result, refined=False):
    """Hashable summary of the event a polyhedron describes.

    The sequence of ``(event, change point, sign)`` transitions, followed
    by the final number of steps.  With ``refined=True`` each transition
    also lists the competitors the path ignored for hitting at or above
    the previous knot; this is exactly the event of the ``"transition"``
    rows (the extra sets are always empty for single-coordinate blocks)
    together with the argmax and sign of every stopping check that did
    not fire, which the continuation rows condition on.
    """
    states = result.record.states
    steps = tuple((s.event, s.coordinate, s.sign) for s in states[1:])
    if not refined:
        return steps, result.steps
    y = result.record.y
    ignored = []
    for ev in result.record.events[1:]:
        if ev.after is None:
            break
        parts = _transition_parts(ev, y)
        st = ev.before
        joins = tuple(sorted((int(st.interior[i]), int(s)) for s, _, _, hi in parts["joins"] for i in hi))
        leaves = tuple(int(st.boundary[i]) for i in parts["leaves"][1])
        ignored.append((joins, leaves))
    checks = tuple((c.argmax, c.sign) for c in result.stop_checks[:-1])
    return steps, result.steps, tuple(ignored), checks
