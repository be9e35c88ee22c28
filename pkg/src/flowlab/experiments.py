"""Experiment configurations, orchestration and artifact output.

A config is a JSON object validated against ``config.schema.json``.  Keys at
the top level act as defaults for every entry of ``cases``; each case is run
by the runner registered for ``kind`` and yields metric rows and named checks.
``run_experiment`` writes ``metrics.csv``, ``report.json`` and, for sweeps,
``plot.svg``.
"""

import copy
import csv
import io
import json
import math
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .analytic import (
    AtomCloud,
    grad_trace_hessian,
    log_marginal_density,
    score,
    score_divergence,
    score_jacobian,
)
from .errors import FlowlabError, InputError
from .forward import (
    MarginalLaw,
    build_grid,
    forward_spec,
    grid_with_steps,
    make_rng,
    prior,
    validate_grid,
)
from .samplers import interpolant, invert_interpolant, start_law
from .scores import ExactField, field_from_dict

KINDS = (
    "convergence",
    "counterexample",
    "bounds",
    "lemma1",
    "theorem3",
    "prior-decay",
    "schedule-info",
    "identities",
    "oracles",
)

__all__ = [
    "KINDS",
    "Check",
    "FitResult",
    "RunReport",
    "load_schema",
    "validate_config",
    "load_config",
    "fit_order",
    "fit_slope",
    "run_experiment",
    "write_metrics_csv",
    "read_metrics_csv",
    "emit_plot",
    "fixture_path",
    "fixture_names",
]


# ---------------------------------------------------------------------------
# configuration


def load_schema():
    text = resources.files("flowlab").joinpath("config.schema.json").read_text()
    return json.loads(text)


def fixture_path(name):
    """Path of a shipped fixture config, e.g. ``fixture_path("convergence_vp_ei")``."""
    path = resources.files("flowlab").joinpath("fixtures", f"{name}.json")
    if not path.is_file():
        raise InputError(f"no fixture named {name!r}")
    return Path(str(path))


def fixture_names():
    folder = resources.files("flowlab").joinpath("fixtures")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def _ascending(values):
    return len(values) > 0 and all(b > a for a, b in zip(values, values[1:]))


def _semantic_errors(cfg, base_dir):
    errors = []
    scopes = [("config", cfg)] + [(f"cases[{i}]", c) for i, c in enumerate(cfg.get("cases", []))]
    for where, scope in scopes:
        cloud = scope.get("cloud")
        if isinstance(cloud, dict) and "file" in cloud:
            path = Path(cloud["file"])
            if not path.is_absolute() and base_dir is not None:
                path = Path(base_dir) / path
            if not path.is_file():
                errors.append(f"{where}.cloud.file: {cloud['file']!r} does not exist")
        for key, values in (scope.get("sweep") or {}).items():
            if not _ascending(values):
                errors.append(f"{where}.sweep.{key}: must be a nonempty ascending list")
        if "times" in scope and not _ascending(scope["times"]):
            errors.append(f"{where}.times: must be a nonempty ascending list")
        if "deltas" in scope and not _ascending(sorted(scope["deltas"])):
            errors.append(f"{where}.deltas: values must be distinct")
    return errors


REQUIRED = {
    "convergence": ("forward", "scheme", "cloud", "grid", "sweep"),
    "counterexample": ("field",),
    "bounds": ("certificates",),
    "lemma1": ("cloud", "field", "grid", "times", "levels"),
    "theorem3": ("forward", "scheme", "cloud", "grid"),
    "prior-decay": ("forward", "cloud", "sweep"),
    "schedule-info": ("grid",),
    "identities": ("cloud", "grid"),
    "oracles": ("clouds", "grid"),
}

_NEEDS = {
    ("convergence", "sweep"): "N",
    ("prior-decay", "sweep"): "T",
    ("counterexample", "field"): "n",
}


def _case_errors(cfg):
    errors = []
    for case in _cases(cfg):
        where = case["label"]
        for key in REQUIRED[cfg["kind"]]:
            if key not in case:
                errors.append(f"{where}: missing {key!r} for a {cfg['kind']} experiment")
            elif (cfg["kind"], key) in _NEEDS and _NEEDS[(cfg["kind"], key)] not in case[key]:
                errors.append(f"{where}.{key}: needs {_NEEDS[(cfg['kind'], key)]!r}")
        grid = case.get("grid")
        if grid is not None and cfg["kind"] != "convergence" and "eta" not in grid and "N" not in grid:
            errors.append(f"{where}.grid: needs 'eta' or 'N'")
        if cfg["kind"] == "bounds" and "cloud" not in case and "clouds" not in case:
            errors.append(f"{where}: bounds need 'cloud' or 'clouds'")
    return errors


def validate_config(cfg, base_dir=None):
    """Every violation in ``cfg`` as a list of messages (empty when valid)."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = []
    for err in sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path))):
        where = ".".join(str(p) for p in err.absolute_path) or "config"
        errors.append(f"{where}: {err.message}")
    if not errors:
        errors.extend(_semantic_errors(cfg, base_dir))
        errors.extend(_case_errors(cfg))
    return errors


def load_config(path):
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    errors = validate_config(cfg, base_dir=path.parent)
    if errors:
        raise InputError("invalid config:\n  " + "\n  ".join(errors))
    return cfg


# ---------------------------------------------------------------------------
# slope fitting


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    half_width: float
    residual: float
    count: int

    def as_dict(self):
        return {"slope": self.slope, "intercept": self.intercept, "half_width": self.half_width,
                "residual": self.residual, "count": self.count}


def fit_slope(x, y):
    """Least-squares line through ``(x, y)`` with the standard error of the slope."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    A = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    rss = float(resid @ resid)
    sxx = float(np.sum((x - x.mean()) ** 2))
    se = math.sqrt(rss / (n - 2) / sxx) if n > 2 and sxx > 0 else float("inf")
    return FitResult(float(coef[0]), float(coef[1]), se, math.sqrt(rss / n), n)


def fit_order(pairs):
    """Slope of ``log error`` against ``log x`` from at least four positive pairs."""
    pairs = list(pairs)
    if len(pairs) < 4:
        raise InputError(f"need at least 4 pairs to fit an order, got {len(pairs)}")
    x = np.array([p[0] for p in pairs], dtype=float)
    y = np.array([p[1] for p in pairs], dtype=float)
    if np.any(~np.isfinite(x)) or np.any(~np.isfinite(y)) or np.any(x <= 0) or np.any(y <= 0):
        raise InputError("order fits need finite positive values")
    return fit_slope(np.log(x), np.log(y))


# ---------------------------------------------------------------------------
# reports


@dataclass
class Check:
    name: str
    passed: bool
    detail: dict = dc_field(default_factory=dict)

    def as_dict(self):
        return {"name": self.name, "pass": bool(self.passed), "detail": self.detail}


@dataclass
class RunReport:
    config: dict
    rows: list
    fits: dict
    checks: list
    wall_clock: float

    @property
    def passed(self):
        return bool(self.checks) and all(c.passed for c in self.checks)

    def as_dict(self):
        return {
            "config": self.config,
            "rows": self.rows,
            "fits": self.fits,
            "checks": [c.as_dict() for c in self.checks],
            "pass": self.passed,
            "wall_clock": self.wall_clock,
        }


def _all_finite(obj):
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return True
    if isinstance(obj, (int, float, np.floating, np.integer)):
        return math.isfinite(float(obj))
    if isinstance(obj, dict):
        return all(_all_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(_all_finite(v) for v in obj)
    return True


def _format(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if value is None:
        return ""
    return str(value)


def write_metrics_csv(rows, path=None):
    """Write rows as CSV (RFC 4180: CRLF line ends, minimal quoting).

    Columns are the union of row keys in first-seen order.  Returns the text.
    """
    columns = []
    for row in rows:
        for key in row:
            if key not in columns:
                columns.append(key)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_format(row.get(c)) for c in columns])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: empty CSV")
        return list(reader.fieldnames), list(reader)


# ---------------------------------------------------------------------------
# resolving config pieces


def _cloud(spec, seed, base_dir=None):
    if spec is None:
        raise InputError("this experiment needs a cloud")
    if "file" in spec:
        path = Path(spec["file"])
        if not path.is_absolute() and base_dir is not None:
            path = Path(base_dir) / path
        return AtomCloud.from_json(path.read_text())
    if "random" in spec:
        return _random_clouds(spec["random"], seed)[0]
    return AtomCloud.from_dict(spec)


def _random_clouds(spec, seed):
    """Clouds with atoms at radii in ``[radius_min, radius_max]`` along random directions."""
    clouds = []
    for i in range(spec.get("count", 1)):
        for d in spec.get("dims", [1]):
            rng = make_rng(seed, 17, i, d)
            n = spec.get("atoms", 3)
            dirs = rng.standard_normal((n, d))
            dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
            radii = rng.uniform(spec.get("radius_min", 0.0), spec.get("radius_max", 2.0), size=(n, 1))
            weights = rng.dirichlet(np.ones(n))
            clouds.append(AtomCloud(dirs * radii, weights))
    return clouds


def _grid(spec):
    if "eta" in spec:
        return build_grid(spec["T"], spec["delta"], spec["eta"])
    if "N" in spec:
        return grid_with_steps(spec["T"], spec["delta"], spec["N"])
    raise InputError("grid needs eta or N")


def _cases(cfg):
    base = {k: v for k, v in cfg.items() if k not in ("cases", "out")}
    overrides = cfg.get("cases") or [{}]
    out = []
    for i, over in enumerate(overrides):
        case = copy.deepcopy(base)
        for key, value in over.items():
            if isinstance(value, dict) and isinstance(case.get(key), dict) and key not in ("cloud", "field"):
                case[key] = {**case[key], **value}
            else:
                case[key] = copy.deepcopy(value)
        case.setdefault("label", f"case{i}")
        out.append(case)
    return out


def _pool_map(fn, items, jobs):
    items = list(items)
    if jobs and jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def _acc(case, key, default):
    return (case.get("acceptance") or {}).get(key, default)


# ---------------------------------------------------------------------------
# convergence


def _convergence_point(args):
    case, N, base_dir = args
    from .tv import law_window, pushforward_log_density, tv_monte_carlo, _tv_from_values

    seed = case["seed"]
    fs = forward_spec(case["forward"])
    cloud = _cloud(case["cloud"], seed, base_dir)
    field = field_from_dict(case.get("field", {"variant": "exact"}), cloud, fs)
    g = case["grid"]
    grid = grid_with_steps(g["T"], g["delta"], N)
    start = start_law(case.get("start", "marginal"), fs, grid.T, cloud)
    target = MarginalLaw(cloud, fs, grid.delta)
    quad = case.get("quadrature", {})
    row = {"label": case["label"], "forward": fs.kind, "scheme": case["scheme"], "N": grid.N, "eta": grid.eta,
           "seed": seed}
    if cloud.dim == 1:
        lo, hi = law_window(target, width=quad.get("width", 12.0))
        x = np.linspace(lo, hi, quad.get("points", 8001))
        p = np.exp(pushforward_log_density(case["scheme"], fs, field, grid, start, grid.N, x[:, None]))
        q = target.density(x[:, None])
        row["tv"] = _tv_from_values(x, p, q)
        row["tv_error"] = abs(row["tv"] - _tv_from_values(x[::2], p[::2], q[::2]))
    else:
        ms = fs.scaling(grid.delta)
        mean = ms.f * cloud.mean()
        var = ms.f**2 * cloud.variance() / cloud.dim + ms.g**2
        p = lambda y: np.exp(pushforward_log_density(case["scheme"], fs, field, grid, start, grid.N, y))
        tv, se = tv_monte_carlo(p, target.density, ((mean, var), (mean, var)), case.get("samples", 100_000),
                                make_rng(seed, N).integers(2**62))
        row["tv"], row["tv_error"] = tv, se
    return row


def _run_convergence(case, jobs, base_dir):
    Ns = case["sweep"]["N"]
    rows = _pool_map(_convergence_point, [(case, N, base_dir) for N in Ns], jobs)
    fit = fit_order([(r["N"], r["tv"]) for r in rows])
    target = _acc(case, "slope", -1.0)
    tol = _acc(case, "slope_tolerance", 0.15)
    ok = abs(fit.slope - target) <= tol
    return rows, {case["label"]: fit.as_dict()}, [
        Check(f"{case['label']}: slope", ok, {"slope": fit.slope, "target": target, "tolerance": tol,
                                             "half_width": fit.half_width})
    ]


# ---------------------------------------------------------------------------
# counterexample


def _run_counterexample(case, jobs, base_dir):
    from .tv import counterexample_report

    fld = case["field"]
    n, T = fld["n"], fld["T"]
    t0 = time.perf_counter()
    rep = counterexample_report(n, T)
    elapsed = time.perf_counter() - t0
    row = {"label": case["label"], "seed": case["seed"], **{k: v for k, v in rep.items()}}
    checks = [
        Check("sup score error <= 1/(T n pi)", rep["sup_score_error"] <= rep["sup_score_bound"],
              {"value": rep["sup_score_error"], "bound": rep["sup_score_bound"]}),
        Check("final TV >= 1/(4 pi)", rep["tv_final"] >= rep["tv_lower_bound"],
              {"value": rep["tv_final"], "bound": rep["tv_lower_bound"]}),
        Check("Fokker-Planck residual", rep["fp_residual"] <= _acc(case, "fp_tolerance", 1e-8),
              {"value": rep["fp_residual"]}),
        Check("transport cross-check", rep["transport_rel_error"] <= _acc(case, "transport_tolerance", 1e-6),
              {"value": rep["transport_rel_error"]}),
    ]
    limit = _acc(case, "max_seconds", None)
    if limit is not None:
        checks.append(Check("runtime", elapsed <= limit, {"seconds": elapsed, "limit": limit}))
    return [row], {}, checks


# ---------------------------------------------------------------------------
# bound certificates


def _taus(spec, lo=None):
    lo = spec["min"] if lo is None else max(lo, spec["min"])
    return np.geomspace(lo, spec["max"], spec["count"])


def _bounds_task(args):
    from . import operators as ops

    name, cloud_dict, kind, case = args
    cloud = AtomCloud.from_dict(cloud_dict)
    fs = forward_spec(kind)
    seed = case["seed"]
    probes = case.get("probes", {})
    taus_spec = probes.get("taus", {"min": 0.02, "max": 5.0, "count": 20})
    count = probes.get("points", 500)
    cap = _acc(case, "cap", 10.0)
    certs = []
    if name == "score":
        taus = _taus(taus_spec)
        certs = ops.certify_score_bounds(cloud, fs, taus, ops.probe_points(cloud, fs, taus, count, seed))
    elif name == "tweedie":
        certs = [ops.tweedie_certificate(cloud, fs, _taus(taus_spec), case.get("samples", 20_000), seed)]
    elif name == "gaussian_ratio":
        for delta, h in probes.get("ratio_pairs", [[0.5, 0.25], [1.0, 1.0], [0.1, 0.4]]):
            pts = ops.probe_points(cloud, forward_spec("VE"), [delta], count, seed)[0]
            pts = np.concatenate([pts, cloud.atoms])  # the peaks sit at the atoms
            certs.append(ops.gaussian_ratio_certificate(cloud, delta, h, pts))
    elif name == "pinsker":
        certs = [ops.pinsker_certificate(cloud, probes.get("horizons", [2.0, 4.0, 8.0, 16.0, 32.0]))]
    elif name in ("time_derivative", "moment"):
        per_delta = []
        for delta in case.get("deltas", [0.5, 0.2, 0.1, 0.05, 0.02]):
            taus = _taus(taus_spec, lo=delta)
            if name == "time_derivative":
                got = ops.certify_time_derivative_bounds(cloud, fs, taus, ops.probe_points(cloud, fs, taus, count, seed),
                                                         cap)
            else:
                got = ops.moment_certificates(cloud, fs, taus, samples=case.get("samples", 20_000), seed=seed, cap=cap)
            for c in got:
                c.params["delta"] = float(delta)
            per_delta.extend(got)
        certs = per_delta
    else:
        raise InputError(f"unknown certificate family {name!r}")
    return [c.as_dict() for c in certs]


def _run_bounds(case, jobs, base_dir):
    from . import operators as ops

    seed = case["seed"]
    if "clouds" in case:
        clouds = _random_clouds(case["clouds"]["random"], seed) if "random" in case["clouds"] else [
            AtomCloud.from_dict(c) for c in case["clouds"]["list"]]
    else:
        clouds = [_cloud(case["cloud"], seed, base_dir)]
    forwards = case.get("forwards", [case.get("forward", "VP")])
    tasks = []
    for name in case["certificates"]:
        for ci, cloud in enumerate(clouds):
            if name == "pinsker" and cloud.dim > 2:
                continue
            kinds = ["VE"] if name in ("pinsker", "gaussian_ratio") else forwards
            for kind in kinds:
                tasks.append((name, cloud.to_dict(), kind, {**case, "cloud_index": ci}))
    results = _pool_map(_bounds_task, tasks, jobs)

    rows, checks = [], []
    by_name = {}
    for (name, cloud_dict, kind, task_case), certs in zip(tasks, results):
        for cert in certs:
            row = {"label": case["label"], "family": name, "cloud": task_case["cloud_index"], "forward": kind,
                   "bound_name": cert["bound_name"], "dim": len(cloud_dict["atoms"][0]),
                   "radius": AtomCloud.from_dict(cloud_dict).radius, "delta": cert["params"].get("delta", ""),
                   "probes": cert["probes"], "max_ratio": cert["max_ratio"], "pass": cert["pass"],
                   "exact_constant": cert["exact_constant"], "cap": cert["cap"], "seed": seed}
            rows.append(row)
            by_name.setdefault((cert["bound_name"], cert["exact_constant"]), []).append(row)

    for (bound, exact), group in by_name.items():
        worst = max(r["max_ratio"] for r in group)
        probes = sum(r["probes"] for r in group)
        checks.append(Check(f"{bound} ({'exact' if exact else 'order-only'})", all(r["pass"] for r in group),
                            {"max_ratio": worst, "probes": probes}))
    min_probes = _acc(case, "min_probes", None)
    if min_probes is not None:
        for (bound, exact), group in by_name.items():
            if exact and bound not in ("ve_prior_pinsker", "tweedie_second_moment", "moment_2"):
                total = sum(r["probes"] for r in group)
                checks.append(Check(f"{bound}: probe count", total >= min_probes, {"probes": total}))

    # ratios must not blow up as the cutoff shrinks
    fits = {}
    growth_min = _acc(case, "growth_slope_min", None)
    if growth_min is not None:
        series = {}
        for r in rows:
            if r["delta"] != "" and not r["exact_constant"]:
                key = (r["bound_name"], r["forward"])
                series.setdefault(key, {}).setdefault(r["delta"], 0.0)
                series[key][r["delta"]] = max(series[key][r["delta"]], r["max_ratio"])
        for (bound, kind), per in sorted(series.items()):
            pairs = sorted(per.items())
            if len(pairs) >= 4 and all(v > 0 for _, v in pairs):
                fit = fit_order(pairs)
                # ratio ~ delta^slope; exploding means a strongly negative slope
                fits[f"{bound}/{kind}"] = fit.as_dict()
                checks.append(Check(f"{bound}/{kind}: non-exploding", fit.slope >= growth_min,
                                    {"slope": fit.slope, "min": growth_min}))

    if case.get("continuous"):
        spec = case["continuous"]
        cloud = _cloud(spec["cloud"], seed, base_dir)
        base = ExactField(cloud, forward_spec("VP"))
        previous = None
        for amp in spec.get("amplitudes", [0.0, 0.05, 0.1]):
            fld = base if amp == 0 else field_from_dict(
                {"variant": "perturbed", "amplitude": amp, "wavenumber": spec.get("wavenumber", 2.0)}, cloud,
                forward_spec("VP"))
            rep = ops.continuous_flow_certificate(cloud, fld, spec["T"], spec["delta"])
            rows.append({"label": case["label"], "family": "continuous", "amplitude": amp, "seed": seed,
                         **{k: v for k, v in rep.items() if k not in ("T", "delta")}})
            checks.append(Check(f"continuous certificate a={amp}", rep["holds"], {"ratio": rep["ratio"]}))
            if previous is not None and previous[0] > 0:
                scale = amp / previous[0]
                linear = abs(rep["score_term"] - scale * previous[1]["score_term"]) <= 1e-9 * max(1.0, rep["score_term"])
                growth = rep["measured_tv"] <= scale * previous[1]["measured_tv"] + rep["quadrature_tolerance"]
                checks.append(Check(f"continuous certificate scaling a={amp}", linear and growth,
                                    {"score_term": rep["score_term"], "measured_tv": rep["measured_tv"]}))
            previous = (amp, rep)
    return rows, fits, checks


# ---------------------------------------------------------------------------
# TV derivative identity


def _run_lemma1(case, jobs, base_dir):
    from .tv import Drift, law_window, lemma1_check

    seed = case["seed"]
    fs = forward_spec(case.get("forward", "VP"))
    if fs.kind != "VP":
        raise InputError("the TV-derivative check is set up for the VP flow")
    cloud = _cloud(case["cloud"], seed, base_dir)
    T = case["grid"]["T"]
    exact = ExactField(cloud, fs)
    field = field_from_dict(case["field"], cloud, fs)
    make = lambda f: Drift(lambda t, y: y + f.score(T - t, y), lambda t, y: 1.0 + f.divergence(T - t, y))
    b, b_star = make(field), make(exact)
    q0 = MarginalLaw(cloud, fs, T)
    p0 = prior(fs, T, 1) if case.get("start", "prior") == "prior" else q0
    times = case["times"]
    window = law_window(p0, q0, MarginalLaw(cloud, fs, T - max(times)), width=8.0)

    rows, worst = [], []
    for level, (dx, dt) in enumerate(case["levels"]):
        n = int(round((window[1] - window[0]) / dx)) + 1
        got = lemma1_check(b, b_star, q0.log_density, p0.log_density, times, window, n, dt)
        for r in got:
            rows.append({"label": case["label"], "level": level, "dx": dx, "dt": dt, "seed": seed, **r})
        worst.append((max(r["residual"] for r in got), max(r["relative"] for r in got)))

    rel_tol = _acc(case, "relative_tolerance", 0.05)
    ratio_min = _acc(case, "refinement_ratio", 1.5)
    checks = [Check(f"relative residual at level {i}", rel <= rel_tol, {"max_relative": rel, "tolerance": rel_tol})
              for i, (_, rel) in enumerate(worst) if i >= 1]
    for i in range(1, len(worst)):
        prev, cur = worst[i - 1][0], worst[i][0]
        ratio = prev / cur if cur > 0 else float("inf")
        checks.append(Check(f"refinement {i - 1}->{i}", ratio >= ratio_min or cur <= 1e-12,
                            {"ratio": ratio if math.isfinite(ratio) else 1e300, "min": ratio_min}))
    return rows, {}, checks


# ---------------------------------------------------------------------------
# five-term inequality


def _theorem3_task(args):
    from .operators import theorem3_terms

    case, base_dir = args
    seed = case["seed"]
    fs = forward_spec(case["forward"])
    cloud = _cloud(case["cloud"], seed, base_dir)
    field = field_from_dict(case.get("field", {"variant": "exact"}), cloud, fs)
    quad = case.get("quadrature", {})
    grid = _grid(case["grid"])
    rep = theorem3_terms(case["scheme"], fs, field, cloud, grid, n_x=quad.get("points", 4001),
                         order=quad.get("order", 8))
    out = {"main": rep}
    if case.get("halving"):
        g = dict(case["grid"])
        g["eta"] = g["eta"] / 2
        out["halved"] = theorem3_terms(case["scheme"], fs, field, cloud, _grid(g), n_x=quad.get("points", 4001),
                                       order=quad.get("order", 8))
    return out


def _run_theorem3(case, jobs, base_dir):
    # one case per config entry; parallelism happens across cases in run_experiment
    res = _theorem3_task((case, base_dir))
    rep = res["main"]
    label, seed = case["label"], case["seed"]
    exact = case.get("field", {"variant": "exact"})["variant"] == "exact"
    row = {"label": label, "forward": case["forward"], "scheme": case["scheme"], "field": case.get("field", {}).get("variant", "exact"),
           "eta": case["grid"]["eta"], "steps": len(rep["rows"]), "lhs": rep["lhs"], "prior_tv": rep["prior_tv"],
           **{f"term_{k}": v for k, v in rep["totals"].items()}, "rhs": rep["rhs"], "slack": rep["slack"],
           "quadrature_tolerance": rep["quadrature_tolerance"], "clipped_mass": rep["clipped_mass"],
           "eta_L": rep["eta_L"], "seed": seed}
    checks = [
        Check(f"{label}: eta L < 1/2", rep["eta_L"] < 0.5, {"eta_L": rep["eta_L"]}),
        Check(f"{label}: inequality", rep["holds"], {"lhs": rep["lhs"], "rhs": rep["rhs"],
                                                     "tolerance": rep["quadrature_tolerance"]}),
    ]
    if exact:
        tol = _acc(case, "terms_tolerance", 1e-8)
        if (case["forward"], case["scheme"]) == ("VP", "ei"):
            checks.append(Check(f"{label}: terms I, II vanish", rep["totals"]["I"] <= tol and rep["totals"]["II"] <= tol,
                                {"I": rep["totals"]["I"], "II": rep["totals"]["II"], "tolerance": tol}))
    rows = [row]
    if "halved" in res:
        half = res["halved"]
        before = rep["totals"]["III"] + rep["totals"]["IV"]
        after = half["totals"]["III"] + half["totals"]["IV"]
        ratio = before / after if after > 0 else float("inf")
        lo, hi = _acc(case, "halving_range", [1.6, 2.4])
        rows.append({**row, "eta": case["grid"]["eta"] / 2, "steps": len(half["rows"]), "lhs": half["lhs"],
                     **{f"term_{k}": v for k, v in half["totals"].items()}, "rhs": half["rhs"],
                     "slack": half["slack"], "quadrature_tolerance": half["quadrature_tolerance"],
                     "clipped_mass": half["clipped_mass"], "eta_L": half["eta_L"]})
        checks.append(Check(f"{label}: halving eta shrinks III+IV", lo <= ratio <= hi, {"ratio": ratio}))
        checks.append(Check(f"{label} (eta/2): inequality", half["holds"], {"slack": half["slack"]}))
    return rows, {}, checks


# ---------------------------------------------------------------------------
# prior decay


def _run_prior_decay(case, jobs, base_dir):
    from .tv import law_window, tv_quadrature

    seed = case["seed"]
    fs = forward_spec(case["forward"])
    cloud = _cloud(case["cloud"], seed, base_dir)
    if cloud.dim != 1:
        raise InputError("prior decay uses one-dimensional quadrature")
    rows = []
    for T in case["sweep"]["T"]:
        q, pi = MarginalLaw(cloud, fs, T), prior(fs, T, 1)
        res = tv_quadrature(q.density, pi.density, law_window(q, pi), n=case.get("quadrature", {}).get("points", 4001))
        rows.append({"label": case["label"], "forward": fs.kind, "T": T, "tv": res.value,
                     "tv_error": res.refinement_error, "seed": seed})
    if fs.kind == "VP":
        fit = fit_slope([r["T"] for r in rows], np.log([r["tv"] for r in rows]))
        target, axis = -1.0, "T"
    else:
        fit = fit_order([(r["T"], r["tv"]) for r in rows])
        target, axis = -0.5, "log T"
    target = _acc(case, "slope", target)
    tol = _acc(case, "slope_tolerance", 0.1 if fs.kind == "VP" else 0.05)
    return rows, {case["label"]: {**fit.as_dict(), "axis": axis}}, [
        Check(f"{case['label']}: slope of log TV vs {axis}", abs(fit.slope - target) <= tol,
              {"slope": fit.slope, "target": target, "tolerance": tol})]


# ---------------------------------------------------------------------------
# schedule info


def _run_schedule(case, jobs, base_dir):
    grid = _grid(case["grid"])
    check = validate_grid(grid)
    rows = [{"label": case["label"], "k": k, "t": float(t), "step": float(grid.nodes[k + 1] - t) if k < grid.N else 0.0,
             "seed": case["seed"]} for k, t in enumerate(grid.nodes)]
    checks = [Check(f"{case['label']}: schedule valid", check.ok, {"index": check.index, "reason": check.reason,
                                                                    "N": grid.N})]
    expected = _acc(case, "steps", None)
    if expected is not None:
        checks.append(Check(f"{case['label']}: step count", grid.N == expected, {"N": grid.N, "expected": expected}))
    return rows, {}, checks


# ---------------------------------------------------------------------------
# operator identities


def _run_identities(case, jobs, base_dir):
    from .operators import (
        divergence_error_closed_form,
        divergence_error_operator,
        estimation_error_closed_form,
        estimation_error_operator,
    )

    seed = case["seed"]
    cloud = _cloud(case["cloud"], seed, base_dir)
    probes = case.get("probes", {}).get("points", 1000)
    tol = _acc(case, "max_error", 1e-10)
    rows, checks = [], []
    for combo in case.get("combos", [["VP", "ei"], ["VE", "ddim"]]):
        kind, scheme = combo
        fs = forward_spec(kind)
        grid = _grid(case["grid"])
        for fname in ("exact", "perturbed"):
            field = ExactField(cloud, fs) if fname == "exact" else field_from_dict(
                case.get("field", {"variant": "perturbed", "amplitude": 0.1, "wavenumber": 3}), cloud, fs)
            rng = make_rng(seed, len(rows))
            ks = rng.integers(0, grid.N, size=probes)
            us = rng.random(probes)
            us2 = rng.random(probes)
            err_phi = err_psi = err_t = 0.0
            for k, u, u2 in zip(ks, us, us2):
                t_k, t_next = grid.nodes[k], grid.nodes[k + 1]
                tau = grid.T - t_k
                ms = fs.scaling(tau)
                z = ms.f * cloud.atoms[rng.integers(cloud.size)] + ms.g * rng.standard_normal(cloud.dim) * 2.0
                z = z[None, :]
                t = t_k + u * (t_next - t_k)
                t2 = t_k + u2 * (t_next - t_k)
                phi = estimation_error_operator(scheme, fs, field, cloud, grid.T, t_k, t_next, t, z)
                phi2 = estimation_error_operator(scheme, fs, field, cloud, grid.T, t_k, t_next, t2, z)
                psi = divergence_error_operator(scheme, fs, field, cloud, grid.T, t_k, t_next, t, z)
                cphi = estimation_error_closed_form(scheme, fs, field, cloud, grid.T, t_k, t_next, z)
                cpsi = divergence_error_closed_form(scheme, fs, field, cloud, grid.T, t_k, t_next, z)
                err_phi = max(err_phi, float(np.max(np.abs(phi - cphi))))
                err_psi = max(err_psi, float(np.max(np.abs(psi - cpsi))))
                err_t = max(err_t, float(np.max(np.abs(phi - phi2))))
            rows.append({"label": case["label"], "forward": kind, "scheme": scheme, "field": fname, "probes": probes,
                         "phi_error": err_phi, "psi_error": err_psi, "phi_time_spread": err_t, "seed": seed})
            checks.append(Check(f"{kind}+{scheme} {fname}: Phi, Psi closed forms",
                                max(err_phi, err_psi, err_t) <= tol,
                                {"phi": err_phi, "psi": err_psi, "time_spread": err_t, "tolerance": tol}))
    return rows, {}, checks


# ---------------------------------------------------------------------------
# oracle suite


def _fd5(fun, x, h, axis):
    # five-point central difference along one coordinate
    e = np.zeros(x.shape[-1])
    e[axis] = h
    return (-fun(x + 2 * e) + 8 * fun(x + e) - 8 * fun(x - e) + fun(x - 2 * e)) / (12 * h)


def _rel(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1.0)))


def _derivative_errors(cloud, fs, taus, count, seed):
    worst = {"score": 0.0, "jacobian": 0.0, "divergence": 0.0, "grad_trace": 0.0}
    d = cloud.dim
    per = max(1, count // len(taus))
    for i, tau in enumerate(taus):
        ms = fs.scaling(tau)
        rng = make_rng(seed, 91, i)
        x = ms.f * cloud.atoms[rng.integers(cloud.size, size=per)] + 2.0 * ms.g * rng.standard_normal((per, d))
        h = 1e-3 * ms.g
        s = score(cloud, ms, x)
        J = score_jacobian(cloud, ms, x)
        div = score_divergence(cloud, ms, x)
        gt = grad_trace_hessian(cloud, ms, x)
        fd_s = np.stack([_fd5(lambda y: log_marginal_density(cloud, ms, y), x, h, j) for j in range(d)], axis=-1)
        fd_J = np.stack([_fd5(lambda y: score(cloud, ms, y), x, h, j) for j in range(d)], axis=-1)
        fd_div = np.trace(fd_J, axis1=-2, axis2=-1)
        fd_gt = np.stack([_fd5(lambda y: score_divergence(cloud, ms, y), x, h, j) for j in range(d)], axis=-1)
        # scale-free comparison: divide by the natural size of each quantity
        worst["score"] = max(worst["score"], _rel(s * ms.g, fd_s * ms.g))
        worst["jacobian"] = max(worst["jacobian"], _rel(J * ms.g**2, fd_J * ms.g**2))
        worst["divergence"] = max(worst["divergence"], _rel(div * ms.g**2, fd_div * ms.g**2))
        worst["grad_trace"] = max(worst["grad_trace"], _rel(gt * ms.g**3, fd_gt * ms.g**3))
    return worst


def _roundtrip_error(cloud, fs, scheme, grid, field, count, seed):
    rng = make_rng(seed, 92)
    worst = 0.0
    for k in rng.integers(0, grid.N, size=max(1, count // 50)):
        t_k, t_next = grid.nodes[k], grid.nodes[k + 1]
        t = t_k + rng.random() * (t_next - t_k)
        ms = fs.scaling(grid.T - t_k)
        z = ms.f * cloud.atoms[rng.integers(cloud.size, size=50)] + 2.0 * ms.g * rng.standard_normal((50, cloud.dim))
        x = interpolant(scheme, fs, field, grid.T, t_k, t_next, t, z)
        back = invert_interpolant(scheme, fs, field, grid.T, t_k, t_next, t, x)
        worst = max(worst, float(np.max(np.abs(back - z) / np.maximum(1.0, np.abs(z)))))
    return worst


def _run_oracles(case, jobs, base_dir):
    seed = case["seed"]
    count = case.get("probes", {}).get("points", 1000)
    tol = _acc(case, "max_error", 1e-5)
    rows, checks = [], []
    clouds = _random_clouds(case["clouds"]["random"], seed)
    for ci, cloud in enumerate(clouds):
        for kind in ("VP", "VE"):
            fs = forward_spec(kind)
            worst = _derivative_errors(cloud, fs, np.geomspace(0.05, 3.0, 10), count, seed + ci)
            rows.append({"label": case["label"], "check": "derivatives", "cloud": ci, "dim": cloud.dim,
                         "forward": kind, **worst, "seed": seed})
            checks.append(Check(f"derivatives cloud {ci} (d={cloud.dim}) {kind}", max(worst.values()) <= tol, worst))

    rt_tol = _acc(case, "roundtrip_tolerance", 1e-10)
    grid = _grid(case["grid"])
    for ci, cloud in enumerate(clouds):
        for kind, scheme in (("VP", "ei"), ("VP", "euler"), ("VE", "ddim"), ("VE", "euler")):
            fs = forward_spec(kind)
            err = _roundtrip_error(cloud, fs, scheme, grid, ExactField(cloud, fs), count, seed + ci)
            rows.append({"label": case["label"], "check": "roundtrip", "cloud": ci, "dim": cloud.dim,
                         "forward": kind, "scheme": scheme, "error": err, "seed": seed})
            checks.append(Check(f"round trip cloud {ci} {kind}+{scheme}", err <= rt_tol, {"error": err}))

    if case.get("determinism"):
        inner = json.loads(fixture_path(case["determinism"]["fixture"]).read_text())
        blobs = []
        with tempfile.TemporaryDirectory() as tmp:
            for i, worker_count in enumerate(case["determinism"].get("jobs", [1, 2, 1])):
                out = Path(tmp) / f"run{i}"
                run_experiment(inner, out=out, jobs=worker_count)
                blobs.append((out / "metrics.csv").read_bytes())
        same = all(b == blobs[0] for b in blobs)
        rows.append({"label": case["label"], "check": "determinism", "runs": len(blobs), "identical": same,
                     "seed": seed})
        checks.append(Check("metrics.csv identical across runs and worker counts", same, {"runs": len(blobs)}))
    return rows, {}, checks


RUNNERS = {
    "convergence": _run_convergence,
    "counterexample": _run_counterexample,
    "bounds": _run_bounds,
    "lemma1": _run_lemma1,
    "theorem3": _run_theorem3,
    "prior-decay": _run_prior_decay,
    "schedule-info": _run_schedule,
    "identities": _run_identities,
    "oracles": _run_oracles,
}


def _case_task(args):
    case, jobs, base_dir = args
    try:
        return RUNNERS[case["kind"]](case, jobs, base_dir)
    except FlowlabError as exc:
        raise type(exc)(f"case {case['label']!r}: {exc}") from exc


def run_experiment(cfg, out=None, jobs=1, seed=None, base_dir=None, plot=True):
    """Validate ``cfg``, run every case and write artifacts into ``out`` (if given)."""
    cfg = copy.deepcopy(cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    errors = validate_config(cfg, base_dir)
    if errors:
        raise InputError("invalid config:\n  " + "\n  ".join(errors))
    env_jobs = os.environ.get("LAB_JOBS")
    if env_jobs:
        jobs = int(env_jobs)
    jobs = max(1, int(jobs or 1))

    t0 = time.perf_counter()
    cases = _cases(cfg)
    if len(cases) > 1 and jobs > 1:
        # spread whole cases over the pool; each case then runs serially
        results = _pool_map(_case_task, [(c, 1, base_dir) for c in cases], jobs)
    else:
        results = [_case_task((c, jobs, base_dir)) for c in cases]
    rows, fits, checks = [], {}, []
    for r, f, c in results:
        rows.extend(r)
        fits.update(f)
        checks.extend(c)
    finite = _all_finite(rows) and _all_finite(fits) and all(_all_finite(c.detail) for c in checks)
    checks.append(Check("all reported numbers finite", finite))
    report = RunReport(cfg, rows, fits, checks, time.perf_counter() - t0)

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(rows, out / "metrics.csv")
        (out / "report.json").write_text(json.dumps(report.as_dict(), indent=2, default=_json_default) + "\n")
        axes = cfg.get("plot")
        if plot and axes:
            emit_plot(out / "metrics.csv", axes["x"], axes["y"], out / "plot.svg", group=axes.get("group"),
                      log_x=axes.get("log", True), log_y=axes.get("log", True))
    return report


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------------------
# SVG plots

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _ticks(lo, hi, log):
    if log:
        return [10.0**k for k in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= k <= hi + 1e-9]
    step = 10 ** math.floor(math.log10((hi - lo) or 1.0))
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def emit_plot(csv_path, x, y, out_path, group=None, log_x=True, log_y=True, width=640, height=440):
    """Static SVG line plot of column ``y`` against ``x``, one polyline per value of ``group``.

    The output depends only on the CSV contents and the arguments.
    """
    columns, records = read_metrics_csv(csv_path)
    for col in (x, y) + ((group,) if group else ()):
        if col not in columns:
            raise InputError(f"column {col!r} not in {csv_path}")
    if group is None:
        group = "label" if "label" in columns else None
    series = {}
    for rec in records:
        try:
            xv, yv = float(rec[x]), float(rec[y])
        except ValueError:
            continue
        if (log_x and xv <= 0) or (log_y and yv <= 0) or not (math.isfinite(xv) and math.isfinite(yv)):
            continue
        series.setdefault(rec[group] if group else y, []).append((xv, yv))
    if not series:
        raise InputError("nothing to plot: the series list is empty")

    tx = (lambda v: math.log10(v)) if log_x else (lambda v: v)
    ty = (lambda v: math.log10(v)) if log_y else (lambda v: v)
    pts = [(tx(a), ty(b)) for s in series.values() for a, b in s]
    x0, x1 = min(p[0] for p in pts), max(p[0] for p in pts)
    y0, y1 = min(p[1] for p in pts), max(p[1] for p in pts)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    left, right, top, bottom = 70, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom
    sx = lambda v: left + (v - x0) / (x1 - x0) * pw
    sy = lambda v: top + (1 - (v - y0) / (y1 - y0)) * ph

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>']
    for v in _ticks(x0, x1, log_x):
        label = f"1e{round(v)}" if log_x else f"{v:g}"
        parts.append(f'<line x1="{sx(v):.2f}" y1="{top + ph}" x2="{sx(v):.2f}" y2="{top + ph + 4}" stroke="#000"/>')
        parts.append(f'<text x="{sx(v):.2f}" y="{top + ph + 16}" text-anchor="middle">{label}</text>')
    for v in _ticks(y0, y1, log_y):
        label = f"1e{round(v)}" if log_y else f"{v:g}"
        parts.append(f'<line x1="{left - 4}" y1="{sy(v):.2f}" x2="{left}" y2="{sy(v):.2f}" stroke="#000"/>')
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.2f}" text-anchor="end">{label}</text>')
    parts.append(f'<text x="{left + pw / 2:.2f}" y="{height - 8}" text-anchor="middle">{x}</text>')
    parts.append(f'<text x="14" y="{top + ph / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {top + ph / 2:.2f})">{y}</text>')
    for i, name in enumerate(sorted(series)):
        color = _COLORS[i % len(_COLORS)]
        pts = sorted(series[name])
        coords = " ".join(f"{sx(tx(a)):.2f},{sy(ty(b)):.2f}" for a, b in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<text x="{left + pw + 10}" y="{ly}" fill="{color}">{_escape(name)}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    with open(out_path, "w", newline="\n") as fh:
        fh.write(text)
    return text


def _escape(text):
    return str(text).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
