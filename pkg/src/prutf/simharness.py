"""Monte Carlo harness: signals, empirical power, coverage and pivot samples.

Every repetition draws from its own generator spawned from the master
seed, so results do not depend on the order in which repetitions run.
Set ``PRUTF_WORKERS`` to run repetitions in several processes.
"""

import csv
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats as sps

from .dualpath import run_path
from .exceptions import InputError, NumericalError
from .inference import build_contrast, infer_poly
from .scoped import mad_sigma, scoped_inference
from .truncdist import ClampWarning, tn_sf, tt_sf

FAMILIES = ("constant", "linear")
METHODS = ("poly", "global", "global-mad", "local")
#: Environment variable holding the number of worker processes.
WORKERS_ENV = "PRUTF_WORKERS"


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell.

    Attributes
    ----------
    family : {"constant", "linear"}
    delta : float
        Jump size (constant) or slope scale (linear); ``0`` gives pure noise.
    n : int
    change_points : tuple of int
        True change points; block ``k`` covers samples
        ``change_points[k-1] + 1 .. change_points[k]`` (1-based).
    sigma : float
        Noise level.
    reps : int
    alpha : float
        Test level; intervals have level ``1 - alpha``.
    methods : tuple of str
        Any of ``METHODS``.  ``global-mad`` only differs from ``global``
        when the variance is unknown.
    variance : {"known", "unknown"}
    seed : int
    contrast : str, optional
        Contrast of the polyhedron method; ``spike`` for the constant and
        ``window`` for the linear family when omitted.  The scoped methods
        always use the spike.
    h : int
        Window half-width.
    target : int
        True change point whose detection is studied.
    steps : int, optional
        Fixed number of path steps; the stopping rule is used when omitted
        (with ``sigma`` if known, else the MAD estimate).
    """

    family: str = "constant"
    delta: float = 2.0
    n: int = 500
    change_points: tuple = (100, 200, 300, 400)
    sigma: float = 1.0
    reps: int = 2000
    alpha: float = 0.05
    methods: tuple = ("poly", "global", "local")
    variance: str = "known"
    seed: int = 0
    contrast: str = None
    h: int = 15
    target: int = 200
    steps: int = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InputError(f"unknown signal family {self.family!r}")
        if not self.delta >= 0:
            raise InputError("delta must be nonnegative")
        if self.reps < 1:
            raise InputError("reps must be at least 1")
        if self.variance not in ("known", "unknown"):
            raise InputError(f"unknown variance mode {self.variance!r}")
        for m in self.methods:
            if m not in METHODS:
                raise InputError(f"unknown method {m!r}")
        if not 0 < self.alpha < 1:
            raise InputError("alpha must lie in (0, 1)")
        cps = tuple(int(c) for c in self.change_points)
        if any(not 0 < c < self.n for c in cps) or list(cps) != sorted(set(cps)):
            raise InputError("change points must be sorted and inside 1..n-1")
        object.__setattr__(self, "change_points", cps)
        object.__setattr__(self, "methods", tuple(self.methods))

    @property
    def degree(self):
        return 0 if self.family == "constant" else 1

    @property
    def poly_contrast(self):
        if self.contrast is not None:
            return self.contrast
        return "spike" if self.family == "constant" else "window"


def generate_signal(config):
    """Mean vector of the configured family.

    ``constant`` alternates ``0`` and ``delta`` across blocks.  ``linear``
    alternates ``delta (t - 1/2)`` and ``delta (1/2 - t)`` with ``t`` the
    position within the block scaled to ``(0, 1]``, which keeps the signal
    continuous with slope changes at the change points.
    """
    n, delta = config.n, float(config.delta)
    edges = [0, *config.change_points, n]
    f = np.zeros(n)
    for k, (lo, hi) in enumerate(zip(edges[:-1], edges[1:])):
        if config.family == "constant":
            f[lo:hi] = delta if k % 2 else 0.0
        else:
            t = np.arange(1, hi - lo + 1) / (hi - lo)
            f[lo:hi] = delta * (0.5 - t) if k % 2 else delta * (t - 0.5)
    return f


@dataclass
class MethodOutcome:
    """One method applied to one repetition."""

    method: str
    truth: float
    p_two: float
    ci: tuple
    covered: bool
    truncation: list
    warnings: list = field(default_factory=list)

    @property
    def whole_line(self):
        """``True`` when the truncation set has no finite end."""
        return all(np.isinf(e) for iv in self.truncation for e in iv)


@dataclass
class RepOutcome:
    """Everything recorded for one repetition."""

    rep: int
    detected: bool
    location: int = -1
    n_change_points: int = 0
    methods: dict = field(default_factory=dict)
    error: str = ""


def _detect(y, config):
    r = config.degree
    if config.steps is not None:
        return run_path(y, r, max_steps=config.steps)
    sigma = config.sigma if config.variance == "known" else mad_sigma(y, r)
    return run_path(y, r, sigma=sigma, alpha=config.alpha)


def _match(detection, config):
    """Index of the detection that counts as finding the target, or ``None``."""
    if config.family == "constant":
        hits = np.flatnonzero(detection.dual_points == config.target)
        return int(hits[0]) if hits.size else None
    dist = np.abs(detection.primal_points - config.target)
    if dist.size == 0 or dist.min() > config.h:
        return None
    return int(np.argmin(dist))


def _window_half_width(detection, j, config):
    spots = [0, *(int(p) for p in detection.primal_points), config.n]
    return min(config.h, spots[j + 1] - spots[j], spots[j + 2] - spots[j + 1])


def _apply(method, detection, j, config, f):
    level = 1.0 - config.alpha
    known = config.variance == "known"
    sigma = config.sigma if known else None
    if method == "poly":
        kind = config.poly_contrast
        h = _window_half_width(detection, j, config) if kind == "window" else None
        offset = int(detection.primal_points[0] - detection.dual_points[0])
        con = build_contrast(kind, detection.dual_points, j, config.n, config.degree, h=h, offset=offset)
        res = infer_poly(detection, j, contrast=kind, sigma=sigma, level=level, h=h)
        truth = float(con.eta @ f)
    else:
        scope = "local" if method == "local" else "global"
        if known:
            variance = "known"
        else:
            variance = "mad" if method == "global-mad" else "pooled"
        res = scoped_inference(detection, j, scope, variance, sigma, level)
        row = detection.record.D.row(int(detection.dual_points[j]) - 1)
        truth = float(row @ f)
    lo, hi = res.ci
    return MethodOutcome(method, truth, res.p_two, res.ci, bool(lo <= truth <= hi),
                         res.truncation.as_list(), list(res.warnings))


def run_rep(config, rep, seed_seq):
    """Simulate one repetition with its own generator."""
    rng = np.random.default_rng(seed_seq)
    f = generate_signal(config)
    y = f + config.sigma * rng.standard_normal(config.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        detection = _detect(y, config)
        out = RepOutcome(rep, False, n_change_points=int(detection.dual_points.size))
        j = _match(detection, config)
        if j is None:
            return out
        out.detected = True
        out.location = int(detection.primal_points[j])
        for m in config.methods:
            try:
                out.methods[m] = _apply(m, detection, j, config, f)
            except (InputError, NumericalError) as exc:
                out.error = f"{m}: {exc}"
    return out


def _seeds(config):
    return np.random.SeedSequence(config.seed).spawn(config.reps)


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def simulate(config):
    """Run every repetition of ``config``; results are ordered by repetition."""
    seeds = _seeds(config)
    workers = _workers()
    if workers == 1:
        return [run_rep(config, k, s) for k, s in enumerate(seeds)]
    with ProcessPoolExecutor(workers) as pool:
        outs = list(pool.map(run_rep, [config] * config.reps, range(config.reps), seeds,
                             chunksize=max(1, config.reps // (4 * workers))))
    return sorted(outs, key=lambda o: o.rep)


@dataclass(frozen=True)
class CellSummary:
    """Aggregated counts for one (configuration, method) pair."""

    family: str
    variance: str
    delta: float
    method: str
    reps: int
    detected: int
    rejected: int
    covered: int
    failed: int
    unbounded: int

    @property
    def evaluated(self):
        return self.detected - self.failed

    @property
    def power(self):
        return self.rejected / self.evaluated if self.evaluated else float("nan")

    @property
    def coverage(self):
        return self.covered / self.evaluated if self.evaluated else float("nan")

    @property
    def undefined(self):
        return self.evaluated == 0

    def as_row(self):
        row = asdict(self)
        row.update(power=self.power, coverage=self.coverage, undefined=self.undefined)
        return row


def summarize(config, outcomes):
    """Per-method counts over the repetitions that detected the target.

    ``unbounded`` counts truncation sets with no finite end.
    """
    rows = []
    for m in config.methods:
        det = [o for o in outcomes if o.detected]
        got = [o.methods[m] for o in det if m in o.methods]
        rows.append(CellSummary(
            config.family, config.variance, float(config.delta), m, len(outcomes), len(det),
            sum(g.p_two < config.alpha for g in got), sum(g.covered for g in got),
            len(det) - len(got), sum(g.whole_line for g in got),
        ))
    return rows


def empirical_power(config, deltas=None):
    """Power of each method across ``deltas`` (``config.delta`` if omitted).

    Power is the fraction of repetitions with ``p < alpha`` among those
    that detected the target.  A cell with no detections is flagged
    ``undefined`` and reports ``nan``.
    """
    deltas = [config.delta] if deltas is None else list(deltas)
    rows = []
    for d in deltas:
        cfg = replace(config, delta=float(d))
        rows.extend(summarize(cfg, simulate(cfg)))
    return rows


def coverage_study(config, deltas=(2.0, 3.0, 4.0, 5.0)):
    """Coverage of each method's interval for ``eta^T f`` across ``deltas``."""
    return empirical_power(config, deltas)


@dataclass
class PivotSample:
    """Pivot values of the first detected change point."""

    truncated_z: np.ndarray
    untruncated_z: np.ndarray
    truncated_t: np.ndarray
    untruncated_t: np.ndarray

    def ks_pvalues(self):
        return {k: float(sps.kstest(v, "uniform").pvalue) for k, v in asdict(self).items()}

    def quantiles(self):
        """Sorted pivots against plotting positions ``(i - 0.5) / N``."""
        out = {}
        for k, v in asdict(self).items():
            v = np.sort(v)
            out[k] = (v, (np.arange(1, v.size + 1) - 0.5) / v.size)
        return out


def _pivot_rep(config, seed_seq):
    rng = np.random.default_rng(seed_seq)
    f = generate_signal(config)
    y = f + config.sigma * rng.standard_normal(config.n)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        det = run_path(y, config.degree, max_steps=config.steps or 1)
        if det.dual_points.size == 0:
            return None
        first = det.record.states[1].coordinate + 1
        j = int(np.flatnonzero(det.dual_points == first)[0]) if first in det.dual_points else 0
        z = infer_poly(det, j, sigma=config.sigma)
        t = infer_poly(det, j)
    mu = float(det.record.D.row(int(det.dual_points[j]) - 1) @ f)
    zs = z.statistic - mu / z.scale
    return (tn_sf(z.statistic, mu / z.scale, z.truncation), float(sps.norm.sf(zs)),
            tt_sf(t.statistic, mu / t.scale, t.dof, t.truncation), float(sps.t.sf(t.statistic - mu / t.scale, t.dof)))


def pivot_qq(config=None):
    """Survival pivots of the first detected change point.

    The default configuration is pure noise of length 100 with a nominal
    change point at 50 (``delta = 0``), 1000 repetitions and one path step.
    Each pivot is the truncated (or untruncated) survival function at the
    true ``eta^T f``; the t pivots are exact only when ``eta^T f = 0``.
    """
    if config is None:
        config = SimConfig(delta=0.0, n=100, change_points=(50,), reps=1000, target=50, steps=1)
    vals = [v for v in (_pivot_rep(config, s) for s in _seeds(config)) if v is not None]
    arr = np.array(vals, dtype=float).reshape(-1, 4)
    return PivotSample(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


SUMMARY_FIELDS = ("family", "variance", "delta", "method", "reps", "detected", "rejected", "covered",
                  "failed", "unbounded", "power", "coverage", "undefined")


def write_summary_csv(rows, path):
    """Write :class:`CellSummary` rows with the columns ``SUMMARY_FIELDS``."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            d = row.as_row()
            w.writerow({k: (repr(d[k]) if isinstance(d[k], float) else d[k]) for k in SUMMARY_FIELDS})


def write_qq_csv(sample, path):
    """Write ``series,index,pivot,uniform`` rows for every pivot series."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series", "index", "pivot", "uniform"])
        for name, (v, u) in sample.quantiles().items():
            for i, (a, b) in enumerate(zip(v, u)):
                w.writerow([name, i, repr(float(a)), repr(float(b))])
