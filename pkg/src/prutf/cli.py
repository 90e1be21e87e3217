"""Command-line front end: ``prutf detect | infer | simulate``.

Exit codes: 0 success, 2 input error, 3 numerical error.
"""

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace

import numpy as np

from .dualpath import run_path
from .exceptions import InputError, NumericalError
from .inference import infer_poly
from .scoped import mad_sigma, scoped_inference
from . import simharness

DETECT_SCHEMA = "prutf.detect/1"
INFER_SCHEMA = "prutf.infer/1"
SIMULATE_SCHEMA = "prutf.simulate/1"
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3
INFER_METHODS = ("poly", "global", "local")
#: Report labels for the internal stop reasons.
STOP_LABELS = {"lambda-zero": "λ=0", "max-steps": "max-steps", "stopping-rule": "stopping-rule"}
INFER_COLUMNS = ("change_point", "primal", "method", "variance", "contrast", "statistic", "estimate",
                 "scale", "dof", "p_two_sided", "p_one_sided", "ci_lower", "ci_upper", "truncation",
                 "warnings")


def _parse_float(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(text)
    return value


def read_series(path):
    """Read one numeric series from a CSV file (``-`` for standard input).

    Each line holds a value or a ``time,value`` pair; blank lines and lines
    starting with ``#`` are skipped.  A first line that does not parse as
    numbers is taken as a header.

    Raises
    ------
    InputError
        Naming the 1-based line of the first malformed row.
    """
    if path == "-":
        text = sys.stdin.read()
    else:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from None
    values, width, seen = [], None, False
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        fields = [f.strip() for f in stripped.split(",")]
        try:
            numbers = [_parse_float(f) for f in fields]
        except ValueError:
            if not seen:
                seen = True
                width = len(fields)
                continue
            raise InputError(f"line {lineno}: cannot parse {stripped!r} as numbers") from None
        seen = True
        if width is None:
            width = len(fields)
        if len(fields) != width or width not in (1, 2):
            raise InputError(f"line {lineno}: expected {width if width in (1, 2) else '1 or 2'} "
                             f"column(s), found {len(fields)}")
        values.append(numbers[-1])
    if not values:
        raise InputError(f"{path}: no numeric rows")
    return np.array(values)


def _jsonable(obj):
    """Convert numpy scalars and non-finite floats for strict JSON.

    Non-finite floats become the strings ``"inf"``, ``"-inf"`` and ``"nan"``.
    """
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _emit(text, output):
    if output in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(output, "w", newline="") as fh:
            fh.write(text)


def _dump_json(payload):
    return json.dumps(_jsonable(payload), indent=2, allow_nan=False) + "\n"


# -- detect -----------------------------------------------------------------

def _policy(args):
    if args.steps is not None and args.stop:
        raise InputError("choose either --steps or --stop")
    if args.steps is None and not args.stop:
        raise InputError("a step policy is required: --steps K or --stop")
    if args.steps is not None:
        if args.steps < 1:
            raise InputError("--steps must be positive")
        return {"kind": "steps", "steps": int(args.steps)}
    if (args.sigma is None) == (not args.sigma_mad):
        raise InputError("--stop needs exactly one of --sigma S or --sigma-mad")
    return {"kind": "stop", "alpha": float(args.alpha), "sigma": args.sigma, "sigma_mad": bool(args.sigma_mad)}


def detect_series(y, order, policy):
    """Run detection under a step policy dictionary (see :func:`_policy`)."""
    if y.size < order + 3:
        raise InputError(f"series too short: need at least {order + 3} values, got {y.size}")
    if policy["kind"] == "steps":
        return run_path(y, order, max_steps=policy["steps"]), None
    sigma = mad_sigma(y, order) if policy.get("sigma_mad") else policy["sigma"]
    if not sigma > 0:
        raise InputError("the noise level for the stopping rule must be positive")
    return run_path(y, order, sigma=sigma, alpha=policy["alpha"]), sigma


def detection_report(detection, order, policy, source, sigma_used):
    """Versioned dictionary describing one detection."""
    record = detection.record
    joined = {}
    for state in record.states[1:]:
        if state.event == "join":
            joined[state.coordinate] = state.knot
    points = []
    for tau, p, s in zip(detection.dual_points, detection.primal_points, detection.signs):
        points.append({"dual": int(tau), "primal": int(p), "sign": int(s), "knot": joined.get(int(tau) - 1)})
    return {
        "schema": DETECT_SCHEMA,
        "input": source,
        "n": int(record.y.size),
        "order": int(order),
        "policy": policy,
        "sigma_used": sigma_used,
        "change_points": points,
        "knots": [float(k) for k in record.knots],
        "steps": int(detection.steps),
        "stop_reason": STOP_LABELS.get(detection.stop_reason, detection.stop_reason),
    }


def _detect_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dual", "primal", "sign", "knot"])
    for p in report["change_points"]:
        w.writerow([p["dual"], p["primal"], p["sign"], repr(float(p["knot"]))])
    return buf.getvalue()


def detect_cmd(args):
    y = read_series(args.input)
    policy = _policy(args)
    detection, sigma_used = detect_series(y, args.order, policy)
    report = detection_report(detection, args.order, policy, args.input, sigma_used)
    _emit(_dump_json(report) if args.format == "json" else _detect_csv(report), args.output)
    return EXIT_OK


# -- infer ------------------------------------------------------------------

def _contrast(text):
    if text in ("spike", "segment"):
        return text, None
    if text.startswith("window:"):
        try:
            h = int(text.split(":", 1)[1])
        except ValueError:
            raise InputError(f"bad window size in {text!r}") from None
        return "window", h
    raise InputError(f"unknown contrast {text!r}; use spike, segment or window:h")


def _variance_for(method, requested, sigma):
    """Variance mode for one method; ``auto`` picks the documented defaults."""
    if requested == "known" or (requested == "auto" and sigma is not None):
        if sigma is None:
            raise InputError("known variance needs --sigma")
        return "known"
    if requested == "auto":
        return "mad" if method == "global" else "pooled"
    if method == "poly" and requested == "mad":
        raise InputError("the polyhedron method supports known or pooled variance only")
    return requested


def infer_detection(detection, methods, variance="auto", sigma=None, level=0.95, sided="two",
                    contrast="spike", h=None):
    """Run every requested method on every detected change point.

    Returns
    -------
    list of dict
        One :meth:`InferenceResult.as_dict` per (change point, method),
        with the primal location added.
    """
    out = []
    for j in range(detection.dual_points.size):
        for method in methods:
            mode = _variance_for(method, variance, sigma)
            if method == "poly":
                res = infer_poly(detection, j, contrast=contrast, h=h, level=level, sided=sided,
                                 sigma=sigma if mode == "known" else None)
            else:
                if contrast != "spike":
                    raise InputError(f"the {method} method supports the spike contrast only")
                res = scoped_inference(detection, j, method, mode, sigma, level, sided)
            row = res.as_dict()
            row["primal"] = int(detection.primal_points[j])
            out.append(row)
    return out


def _infer_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INFER_COLUMNS)
    for r in results:
        lo, hi = r["ci"]
        w.writerow([r["change_point"], r["primal"], r["method"], r["variance"], r["contrast"],
                    repr(r["statistic"]), repr(r["estimate"]), repr(r["scale"]),
                    "" if r["dof"] is None else r["dof"], repr(r["p_two_sided"]), repr(r["p_one_sided"]),
                    repr(lo), repr(hi), json.dumps(_jsonable(r["truncation"])), ";".join(r["warnings"])])
    return buf.getvalue()


def _load_detection_report(path):
    try:
        with open(path) as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read detection report {path}: {exc}") from None
    if report.get("schema") != DETECT_SCHEMA:
        raise InputError(f"{path}: expected schema {DETECT_SCHEMA}, found {report.get('schema')!r}")
    return report


def infer_cmd(args):
    y = read_series(args.input)
    if args.detection is not None:
        report = _load_detection_report(args.detection)
        order, policy = int(report["order"]), report["policy"]
        detection, sigma_used = detect_series(y, order, policy)
        found = [int(t) for t in detection.dual_points]
        if found != [p["dual"] for p in report["change_points"]]:
            raise InputError("the detection report does not match the input series")
    else:
        order, policy = args.order, _policy(args)
        detection, sigma_used = detect_series(y, order, policy)
        report = detection_report(detection, order, policy, args.input, sigma_used)
    methods = INFER_METHODS if args.method == "all" else (args.method,)
    kind, h = _contrast(args.contrast)
    results = infer_detection(detection, methods, args.variance, args.sigma, args.level, args.sided, kind, h)
    payload = {"schema": INFER_SCHEMA, "detection": report, "results": results}
    _emit(_dump_json(payload) if args.format == "json" else _infer_csv(results), args.output)
    return EXIT_OK


# -- simulate ---------------------------------------------------------------

def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"cannot parse {text!r} as a comma-separated list of numbers") from None


def simulate_cmd(args):
    methods = tuple(m.strip() for m in args.methods.split(",") if m.strip())
    config = simharness.SimConfig(
        family=args.family, delta=0.0, n=args.n, sigma=args.sigma, reps=args.reps, alpha=args.alpha,
        methods=methods, variance=args.variance, seed=args.seed, h=args.h, target=args.target,
    )
    os.makedirs(args.out_dir, exist_ok=True)
    files = []
    if args.study == "qq":
        qq = replace(config, delta=args.qq_delta, n=100, change_points=(50,), target=50, steps=1,
                     reps=args.reps)
        sample = simharness.pivot_qq(qq)
        path = os.path.join(args.out_dir, "qq.csv")
        simharness.write_qq_csv(sample, path)
        files.append(path)
        extra = {"ks_pvalues": sample.ks_pvalues(), "reps_used": int(sample.truncated_z.size)}
    else:
        rows = simharness.empirical_power(config, _float_list(args.delta_grid))
        path = os.path.join(args.out_dir, f"{args.study}.csv")
        simharness.write_summary_csv(rows, path)
        files.append(path)
        extra = {"rows": [r.as_row() for r in rows]}
    summary = {
        "schema": SIMULATE_SCHEMA,
        "study": args.study,
        "config": {k: getattr(config, k) for k in ("family", "n", "sigma", "reps", "alpha", "methods",
                                                   "variance", "seed", "h", "target")},
        "delta_grid": _float_list(args.delta_grid),
        "workers": simharness._workers(),
        "tolerance": "binomial standard error sqrt(p(1-p)/detected) per cell",
        "files": files,
        **extra,
    }
    path = os.path.join(args.out_dir, "summary.json")
    with open(path, "w") as fh:
        fh.write(_dump_json(summary))
    return EXIT_OK


# -- entry point -------------------------------------------------------------

def _add_policy(p):
    p.add_argument("--order", "-r", type=int, default=0, help="polynomial degree r (default 0)")
    p.add_argument("--steps", type=int, help="run exactly K path steps")
    p.add_argument("--stop", action="store_true", help="use the stopping rule")
    p.add_argument("--alpha", type=float, default=0.05, help="stopping-rule level (default 0.05)")
    p.add_argument("--sigma", type=float, help="known noise level")
    p.add_argument("--sigma-mad", action="store_true", help="estimate the noise level by MAD")


def build_parser():
    parser = argparse.ArgumentParser(prog="prutf", description="Change-point detection on the "
                                     "trend-filtering dual path with selective inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="detect change points")
    p.add_argument("--input", "-i", required=True, help="CSV file, or - for standard input")
    _add_policy(p)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", "-o", help="output file (default standard output)")
    p.set_defaults(func=detect_cmd)

    p = sub.add_parser("infer", help="p-values and intervals for detected change points")
    p.add_argument("--input", "-i", required=True, help="CSV file, or - for standard input")
    p.add_argument("--detection", help="detection report from `prutf detect` to reuse")
    _add_policy(p)
    p.add_argument("--method", choices=(*INFER_METHODS, "all"), default="all")
    p.add_argument("--variance", choices=("auto", "known", "pooled", "mad"), default="auto",
                   help="auto: known with --sigma, else pooled (poly, local) and MAD (global)")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--sided", choices=("two", "one"), default="two")
    p.add_argument("--contrast", default="spike", help="spike, segment or window:h")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--output", "-o", help="output file (default standard output)")
    p.set_defaults(func=infer_cmd)

    p = sub.add_parser("simulate", help="Monte Carlo power, coverage or pivot study")
    p.add_argument("--study", choices=("power", "coverage", "qq"), default="coverage")
    p.add_argument("--family", choices=simharness.FAMILIES, default="constant")
    p.add_argument("--delta-grid", default="2,3,4,5")
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--methods", default="poly,global,local")
    p.add_argument("--variance", choices=("known", "unknown"), default="known")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--h", type=int, default=15)
    p.add_argument("--target", type=int, default=200)
    p.add_argument("--qq-delta", type=float, default=0.0, help="jump size for the pivot study")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=simulate_cmd)
    return parser


def main(argv=None):
    """Console entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"prutf: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"prutf: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
