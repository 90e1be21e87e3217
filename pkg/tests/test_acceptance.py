"""Acceptance criteria, one test each, printing a PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed even
without ``-s``.  Simulation cells are cached for the module so that the
coverage, power and interval-shape checks share one sweep.
"""

import functools
import time
import warnings

import mpmath
import numpy as np
import pytest
from scipy import integrate, optimize, stats

from prutf.dualpath import primal_at, run_path
from prutf.inference import InferenceResult, finish
from prutf.polyhedron import build_polyhedron, selection_signature
from prutf.scoped import (NotApplicableError, SegmentTooShortError, ci_length_upper_bound, scoped_bounds,
                          scoped_inference)
from prutf.simharness import SimConfig, empirical_power, pivot_qq
from prutf.stopping import threshold_x_alpha
from prutf.truncdist import ClampWarning, TruncationSet, tn_cdf, tt_cdf

pytestmark = pytest.mark.acceptance

REPS = 2000


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({elapsed:.1f} s)")
        assert ok, detail
    return emit


# -- oracle path equivalence ------------------------------------------------

def _box_qp_fit(y, D, lam):
    """Primal fit from the box-constrained dual QP solved by scipy."""
    if lam == 0:
        u = np.zeros(D.shape[0])
    else:
        u = optimize.lsq_linear(D.T, y, bounds=(-lam, lam), method="bvls", tol=1e-14).x
    return y - D.T @ u


def test_oracle_path_equivalence(report):
    t0 = time.time()
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    for r in (0, 1):
        for _ in range(50):
            n = int(rng.integers(8, 41))
            y = rng.standard_normal(n) + np.repeat(rng.normal(0, 2, 3), [n // 3, n // 3, n - 2 * (n // 3)])
            det = run_path(y, r, pinning="boundary")
            rec = det.record
            D = rec.D.dense
            knots = list(rec.knots) + [rec.floor]
            lams = knots + [0.5 * (a + b) for a, b in zip(knots[:-1], knots[1:])]
            for lam in lams:
                err = np.max(np.abs(primal_at(rec, lam) - _box_qp_fit(y, D, lam)))
                worst = max(worst, err / np.max(np.abs(y)))
                checked += 1
    elapsed = time.time() - t0
    ok = worst < 1e-6 and elapsed < 120
    report("oracle path equivalence", ok, f"{checked} fits, worst relative error {worst:.2e}", elapsed)


# -- polyhedron characterization ------------------------------------------------

def test_polyhedron_characterization(report):
    t0 = time.time()
    rng = np.random.default_rng(7)
    n = 60
    f = 1.5 * (np.arange(n) >= 30)
    y0 = f + rng.standard_normal(n)
    base = run_path(y0, 0, max_steps=2)
    poly = build_polyhedron(base)
    sig = selection_signature(base, refined=True)
    agree = total = inside_count = 0
    for _ in range(500):
        y = y0 + 0.3 * rng.standard_normal(n)
        slack = poly.slack(y)
        if slack.size and np.min(np.abs(slack)) < 1e-8 * np.max(np.abs(y)):
            continue
        inside, _ = poly.contains(y)
        same = selection_signature(run_path(y, 0, max_steps=2), refined=True) == sig
        agree += inside == same
        inside_count += inside
        total += 1
    elapsed = time.time() - t0
    rate = agree / total
    ok = rate >= 0.995 and elapsed < 120
    report("polyhedron characterization", ok,
           f"agreement {agree}/{total} = {rate:.4f} ({inside_count} inside)", elapsed)


# -- truncated-distribution accuracy ------------------------------------------

def _quad_cdf(pdf, z, tset):
    def mass(a, b):
        if not b > a:
            return 0.0
        return integrate.quad(pdf, a, b, epsabs=0.0, epsrel=1e-13, limit=200)[0]
    total = sum(mass(lo, hi) for lo, hi in tset.intervals)
    below = sum(mass(lo, min(hi, z)) for lo, hi in tset.intervals)
    return below / total


def _random_set(rng):
    cuts = np.sort(rng.uniform(-4, 4, 2 * int(rng.integers(1, 4))))
    ivs = [list(p) for p in cuts.reshape(-1, 2)]
    if rng.random() < 0.3:
        ivs[0][0] = -np.inf
    if rng.random() < 0.3:
        ivs[-1][1] = np.inf
    return TruncationSet(tuple(tuple(iv) for iv in ivs))


def test_truncated_distribution_accuracy(report):
    t0 = time.time()
    rng = np.random.default_rng(11)
    err_n = err_t = 0.0
    for _ in range(200):
        tset = _random_set(rng)
        mu = rng.uniform(-2, 2)
        d = float(rng.integers(1, 60))
        lo, hi = tset.intervals[int(rng.integers(len(tset.intervals)))]
        z = rng.uniform(max(lo, -6), min(hi, 6))
        oracle_n = _quad_cdf(lambda x: stats.norm.pdf(x - mu), z, tset)
        oracle_t = _quad_cdf(lambda x: stats.t.pdf(x - mu, d), z, tset)
        err_n = max(err_n, abs(tn_cdf(z, mu, tset) - oracle_n))
        err_t = max(err_t, abs(tt_cdf(z, mu, d, tset) - oracle_t))
    elapsed = time.time() - t0
    ok = err_n < 1e-9 and err_t < 1e-8 and elapsed < 30
    report("truncated-distribution accuracy", ok, f"max error normal {err_n:.1e}, t {err_t:.1e}", elapsed)


# -- pivot uniformity ----------------------------------------------------------

def test_pivot_uniformity(report):
    t0 = time.time()
    p = pivot_qq().ks_pvalues()
    elapsed = time.time() - t0
    ok = (p["truncated_z"] > 0.01 and p["truncated_t"] > 0.01 and p["untruncated_z"] < 1e-4
          and p["untruncated_t"] < 1e-4 and elapsed < 300)
    detail = ", ".join(f"{k} KS p={v:.3g}" for k, v in p.items())
    report("pivot uniformity", ok, detail, elapsed)


# -- simulation sweep -------------------------------------------------------------

CELLS = {
    ("constant", "known", 2.0): ("poly", "global", "local"),
    ("constant", "known", 3.0): ("poly", "global", "local"),
    ("constant", "known", 4.0): ("poly", "global", "local"),
    ("constant", "known", 5.0): ("poly", "global", "local"),
    ("constant", "unknown", 5.0): ("poly", "global", "global-mad"),
    ("linear", "known", 4.0): ("poly", "local"),
}


@functools.lru_cache(maxsize=None)
def _cell(family, variance, delta):
    t0 = time.time()
    cfg = SimConfig(family=family, variance=variance, delta=delta, reps=REPS, seed=20240,
                    methods=CELLS[(family, variance, delta)])
    rows = {row.method: row for row in empirical_power(cfg)}
    return rows, time.time() - t0


def _sweep_seconds():
    return sum(_cell(*key)[1] for key in CELLS)


COVERAGE_TARGETS = [
    (("constant", "known", 2.0), "poly", 0.9515),
    (("constant", "known", 2.0), "global", 0.9527),
    (("constant", "known", 2.0), "local", 0.9515),
    (("constant", "unknown", 5.0), "poly", None),
    (("constant", "unknown", 5.0), "global", 0.9889),
    (("constant", "unknown", 5.0), "global-mad", 0.9553),
    (("linear", "known", 4.0), "local", 0.9453),
]


def test_coverage_table(report):
    parts, ok = [], True
    keys = {key for key, _, _ in COVERAGE_TARGETS}
    for key in sorted(keys):
        _cell(*key)
    for key, method, target in COVERAGE_TARGETS:
        if target is None:
            continue
        row = _cell(*key)[0][method]
        hit = abs(row.coverage - target) <= 0.02
        ok &= hit
        parts.append(f"{key[0]}/{key[1]}/d={key[2]:g} {method} {row.coverage:.4f} "
                     f"vs {target} (n={row.evaluated}){'' if hit else ' MISS'}")
    elapsed = sum(_cell(*key)[1] for key in keys)
    ok &= elapsed < 1800
    report("coverage table", ok, "; ".join(parts), elapsed)


def test_power_ordering(report):
    deltas = (3.0, 4.0, 5.0)
    power = {m: [_cell("constant", "known", d)[0][m].power for d in deltas] for m in ("poly", "global", "local")}
    ordered = all(l >= p - 0.02 for l, p in zip(power["local"], power["poly"]))
    monotone = all(b >= a - 0.02 for v in power.values() for a, b in zip(v[:-1], v[1:]))
    detail = "; ".join(f"{m} " + "/".join(f"{v:.3f}" for v in vals) for m, vals in power.items())
    elapsed = sum(_cell("constant", "known", d)[1] for d in deltas)
    report("power ordering", ordered and monotone, f"power at delta 3/4/5: {detail}", elapsed)


def test_poly_interval_never_whole_line(report):
    whole = evaluated = 0
    for key in CELLS:
        row = _cell(*key)[0]["poly"]
        whole += row.unbounded
        evaluated += row.evaluated
    report("poly truncation never whole line", whole == 0,
           f"{whole} whole-line sets in {evaluated} poly intervals over {len(CELLS)} cells", _sweep_seconds())


# -- interval length near a finite end ------------------------------------------

def _ci_length(z, tset):
    res = InferenceResult("poly", "known", z, tset, 1.0, z)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        lo, hi = finish(res).ci
    return hi - lo


def test_interval_length_near_boundary(report):
    t0 = time.time()
    box = TruncationSet.interval(-3.0, 3.0)
    near, far = _ci_length(3 - 1e-4, box), _ci_length(3 - 1e-1, box)
    dyadic = [_ci_length(3 - 2.0 ** -k, box) for k in range(1, 14)]
    growing = all(b > a for a, b in zip(dyadic[:-1], dyadic[1:]))
    rays = TruncationSet.two_ray(-1.0, 1.0)
    lengths = {z: _ci_length(z, rays) for z in (4, 6, 10, 20, -4, -6, -10, -20)}
    finite = all(np.isfinite(v) for v in lengths.values())
    close = abs(lengths[20] / (2 * stats.norm.ppf(0.975)) - 1) < 0.05
    elapsed = time.time() - t0
    ok = near / far > 10 and growing and finite and close and elapsed < 10
    report("interval length near a finite end", ok,
           f"ratio {near / far:.1f}, dyadic monotone {growing}, two-ray length at 20: {lengths[20]:.4f}",
           elapsed)


# -- scoped interval length bound -------------------------------------------------

def test_scoped_length_bound(report):
    t0 = time.time()
    rng = np.random.default_rng(5)
    n, flagged, violations, worst = 200, 0, 0, -np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        while flagged < 500:
            delta = rng.uniform(0, 3)
            f = np.zeros(n)
            f[50:100] = delta
            f[150:] = -delta
            det = run_path(f + rng.standard_normal(n), 0, sigma=1.0, alpha=0.05)
            for j in range(det.dual_points.size):
                for scope in ("global", "local"):
                    for variance in ("known", "pooled", "mad"):
                        try:
                            _, _, b = scoped_bounds(det, j, scope, variance, 1.0)
                            bound, flag = ci_length_upper_bound(
                                b, 0.05, "normal" if variance == "known" else "t")
                        except (SegmentTooShortError, NotApplicableError):
                            continue
                        if not flag:
                            continue
                        res = scoped_inference(det, j, scope, variance, 1.0)
                        length = (res.ci[1] - res.ci[0]) / res.scale
                        flagged += 1
                        worst = max(worst, length - bound)
                        violations += length > bound * (1 + 1e-9)
    elapsed = time.time() - t0
    ok = violations == 0 and elapsed < 300
    report("scoped interval length bound", ok,
           f"{violations} violations in {flagged} flagged instances, worst excess {worst:.3g}", elapsed)


# -- stopping threshold -------------------------------------------------------------

def _dense_series_threshold(alpha, S2=1.0, terms=400):
    mpmath.mp.dps = 30
    series = lambda x: mpmath.fsum((-1) ** (i + 1) * mpmath.exp(-2 * i * i * x * x / S2) for i in range(1, terms))
    return float(mpmath.findroot(lambda x: series(x) - alpha / 2, 1.3))


def test_stopping_threshold(report):
    t0 = time.time()
    ours = threshold_x_alpha(1.0, 0.05)
    elapsed = time.time() - t0
    oracle = _dense_series_threshold(0.05)
    ok = abs(ours - oracle) < 1e-3 and abs(ours - 1.3581) < 1e-3 and elapsed < 1
    report("stopping threshold", ok, f"x_alpha(1, 0.05) = {ours:.7f}, dense-series oracle {oracle:.7f}", elapsed)
