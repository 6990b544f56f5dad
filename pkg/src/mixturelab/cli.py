"""Command-line front end.

Subcommands: fit, simulate, theory-check, causal, contour.

Reports are JSON with sorted keys and floats written with 17 significant
digits (NaN and infinities as null). Per-phase runtimes go to a separate
``<output>.timing.json`` so that the main outputs are byte-identical across
reruns with the same inputs and seed. Exit codes: 0 success, 2 input error,
3 numeric failure, 4 theory-check gate failure.
"""

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from mixturelab import __version__
from mixturelab.causal import (
    IvFitConfig,
    IvSample,
    cace_report,
    iv_fit_multistart,
    mom_mixing_probs,
    omega_distance,
    select_ele,
)
from mixturelab.errors import MixtureLabError, MonotonicityViolationError, SingularMatrixError
from mixturelab.estimation import (
    FitConfig,
    best_permutation,
    best_root,
    default_starts,
    multi_start_fit,
    permute,
)
from mixturelab.information import ESTIMATORS, information, labeled_allocation
from mixturelab.model import MixtureModel, Sample, bivariate_covariance, log_density
from mixturelab import simgen, theory

logger = logging.getLogger("mixturelab")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4


class InputError(Exception):
    pass


# ---------------------------------------------------------------- output


def _fmt_float(v: float) -> str:
    if not math.isfinite(v):
        return "null"
    return format(v, ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """Deterministic JSON: sorted keys, 17 significant digits, NaN as null."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [
            f"{pad}{json.dumps(str(k))}: {dumps(obj[k], indent, _level + 1)}"
            for k in sorted(obj, key=str)
        ]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist(), indent, _level)
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    return json.dumps(str(obj))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return "" if not math.isfinite(v) else format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str]):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(row.get(c)) for c in columns])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _emit(report: dict, out: Optional[str], timings: Dict[str, float]):
    text = dumps(report) + "\n"
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.write_text(text, encoding="utf-8")
    Path(str(path) + ".timing.json").write_text(dumps(timings) + "\n", encoding="utf-8")


def _header(args, command: str) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {"tool": "mixturelab", "version": __version__, "command": command, "flags": flags}


# ---------------------------------------------------------------- input


def read_csv(path: str):
    """Header plus rows of strings; raises InputError with the line number."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise InputError(f"{path}: cannot read ({exc})") from None
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise InputError(f"{path}: empty file, a header row is required") from None
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise InputError(f"{path}: line 1: duplicate column names")
    rows = []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(
                f"{path}: line {reader.line_num}: expected {len(header)} fields, got {len(row)}"
            )
        rows.append((reader.line_num, [c.strip() for c in row]))
    if not rows:
        raise InputError(f"{path}: no data rows")
    return header, rows


def _column(path, header, rows, name, kind=float):
    if name not in header:
        raise InputError(f"{path}: no column named {name!r}; have {header}")
    j = header.index(name)
    out = []
    for line, row in rows:
        try:
            v = kind(row[j])
        except ValueError:
            raise InputError(f"{path}: line {line}, column {name!r}: cannot parse {row[j]!r}") from None
        if kind is float and not math.isfinite(v):
            raise InputError(f"{path}: line {line}, column {name!r}: non-finite value")
        out.append(v)
    return out


def _split(text: Optional[str]) -> List[str]:
    return [t.strip() for t in text.split(",") if t.strip()] if text else []


def _floats(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        return [float(t) for t in _split(text)]
    except ValueError:
        raise InputError(f"cannot parse number list {text!r}") from None


# ---------------------------------------------------------------- fit


def _root_entry(fit, sample, labels) -> dict:
    entry = {
        "loglik": fit.loglik,
        "iterations": fit.iterations,
        "converged": fit.converged,
        "spurious": fit.spurious,
        "spurious_reason": fit.spurious_reason,
        "weights": fit.model.weights,
        "means": fit.model.means,
        "covariances": fit.model.covariances,
    }
    try:
        rep = information(fit, sample)
    except (SingularMatrixError, np.linalg.LinAlgError) as exc:
        entry["information_error"] = str(exc)
        return entry
    entry["allocation_rate"] = rep.allocation_rate
    entry["i2_indefinite"] = rep.i2_indefinite
    entry["standard_errors"] = {
        e: None if rep.se[e] is None else dict(zip(rep.names, rep.se[e])) for e in ESTIMATORS
    }
    entry["weight_standard_errors"] = {e: rep.weight_se[e] for e in ESTIMATORS}
    if labels is not None:
        # label codes are mapped to components by nearest class means
        k = fit.model.k
        if len(np.unique(labels)) == k:
            class_means = np.array([sample.data[labels == c].mean(axis=0) for c in range(k)])
            perm = best_permutation(fit.model.means, class_means)
            aligned = permute(fit, perm)
            entry["label_to_component"] = list(perm)
            entry["labeled_allocation"] = labeled_allocation(aligned, Sample(sample.data, labels))
        else:
            entry["labeled_allocation_error"] = f"label column has {len(np.unique(labels))} classes, K = {k}"
    return entry


def cmd_fit(args) -> int:
    start = time.perf_counter()
    header, rows = read_csv(args.data)
    columns = _split(args.columns) or [h for h in header if h != args.label_column]
    data = np.column_stack([_column(args.data, header, rows, c) for c in columns])
    labels, label_names = None, None
    if args.label_column:
        raw = _column(args.data, header, rows, args.label_column, kind=str)
        label_names = sorted(set(raw))
        labels = np.array([label_names.index(v) for v in raw])
    try:
        sample = Sample(data, labels)
    except (ValueError, MixtureLabError) as exc:
        raise InputError(str(exc)) from None
    k = args.components
    fix_w = np.array(args.fix_weights) if args.fix_weights else None
    fix_cov = None
    if args.fix_cov:
        try:
            fix_cov = np.array(json.loads(Path(args.fix_cov).read_text(encoding="utf-8")), dtype=float)
        except (OSError, ValueError) as exc:
            raise InputError(f"{args.fix_cov}: {exc}") from None
    try:
        config = FitConfig(
            k=k,
            fix_weights=fix_w,
            fix_covariances=fix_cov,
            starts=default_starts(sample, k, n_random=args.starts),
            seed=args.seed,
            max_iterations=args.max_iterations,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    report = _header(args, "fit")
    report.update(columns=columns, n=sample.n, labels=label_names, seed=args.seed)
    code = EXIT_OK
    try:
        roots = multi_start_fit(sample, config)
    except MixtureLabError as exc:
        report["error"] = str(exc)
        report["roots"] = []
        code = EXIT_NUMERIC
    else:
        report["roots"] = [_root_entry(r, sample, labels) for r in roots]
        best = best_root(roots)
        report["best_root"] = None if best is None else roots.index(best)
        if best is None:
            report["error"] = "no non-spurious root"
            code = EXIT_NUMERIC
    _emit(report, args.out, {"fit": time.perf_counter() - start})
    return code


# ---------------------------------------------------------------- simulate

_PROFILES = {"desk": (500, 2000), "paper": (1000, 10000)}
_CSV_COLUMNS = [
    "setting", "cell", "model", "d2", "rho", "estimator", "abs_bias", "mean_se", "rmse",
    "star_count", "star_compared", "n_used", "true_se", "mean_mu11", "allocation_rate",
    "truth_failures", "study_failures", "unreliable", "screened",
]


def cmd_simulate(args) -> int:
    start = time.perf_counter()
    replicates, truth = _PROFILES[args.profile]
    kwargs = dict(
        kind=args.setting.upper(),
        n=args.n,
        replicates=args.replicates or replicates,
        mc_truth_replicates=args.truth_replicates or truth,
        seed=args.seed,
    )
    if args.d2_grid is not None:
        kwargs["d2_grid"] = tuple(_floats(args.d2_grid))
    if args.rho_grid is not None:
        kwargs["rho_grid"] = tuple(_floats(args.rho_grid))
    try:
        setting = simgen.SimSetting(**kwargs)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    report = simgen.run_study(setting)
    prefix = Path(args.out_prefix)
    body = _header(args, "simulate")
    body.update(report.to_dict())
    body["seed"] = args.seed
    Path(str(prefix) + ".json").write_text(dumps(body) + "\n", encoding="utf-8")
    write_csv(Path(str(prefix) + ".csv"), simgen.report_rows(report), _CSV_COLUMNS)
    timings = dict(report.timings, total=time.perf_counter() - start)
    Path(str(prefix) + ".timing.json").write_text(dumps(timings) + "\n", encoding="utf-8")
    total = setting.replicates + setting.mc_truth_replicates
    dead = all(c.truth_failures + c.study_failures >= total for c in report.cells)
    return EXIT_NUMERIC if dead else EXIT_OK


# ---------------------------------------------------------------- theory


def _check(name, ok, **detail) -> dict:
    return dict(detail, name=name, passed=bool(ok))


def theory_checks(tolerance: float, mc_draws: int, seed: int, scenarios=None) -> List[dict]:
    """All theory oracles; each entry has ``name`` and ``passed``."""
    checks = []
    rng = np.random.default_rng(seed)

    # minimisers of the standardized distance
    worst = 0.0
    for _ in range(200):
        d1, s1, s2 = rng.uniform(-3, 3), rng.uniform(0.3, 3), rng.uniform(0.3, 3)
        rho = rng.uniform(-0.95, 0.95)
        closed = theory.argmin_d2(d1, s1, s2, rho)
        num = theory.numeric_argmin_d2(d1, s1, s2, rho)
        worst = max(worst, abs(closed[0] - num[0]), abs(closed[1] - num[1]))
    checks.append(_check("argmin_d2 closed form vs numeric", worst < tolerance, max_error=worst))
    worst = 0.0
    for _ in range(200):
        d1 = rng.uniform(0.2, 3) * rng.choice([-1, 1])
        d2 = rng.uniform(0.2, 3) * rng.choice([-1, 1])
        s1, s2 = rng.uniform(0.3, 3), rng.uniform(0.3, 3)
        feasible = [c for c in theory.argmin_rho(d1, d2, s1, s2) if c.feasible]
        if not feasible or abs(feasible[0].rho) > 0.99:
            continue
        num = theory.numeric_argmin_rho(d1, d2, s1, s2)
        worst = max(worst, abs(feasible[0].rho - num[0]), abs(feasible[0].min_value - num[1]))
    checks.append(_check("argmin_rho closed form vs numeric", worst < tolerance, max_error=worst))

    # correct allocation probability
    p = 0.4
    values = [
        theory.correct_allocation_probability(theory.TheoryScenario(p=p, d1=g, d2=0.0))
        for g in np.linspace(0.0, 6.0, 25)
    ]
    ok = abs(values[0] - p) < tolerance and all(b > a for a, b in zip(values, values[1:]))
    checks.append(_check("correct allocation probability from p, increasing", ok, values=values))

    # allocation limits
    s1 = theory.TheoryScenario(p=0.4, d1=1.0, d2=0.0)
    levels = [0.0, 1.0, 3.0, 5.0, 50.0]
    table = theory.allocation_limit_check(s1, "d2", levels, n_draws=mc_draws, seed=seed)
    quad = [theory.expected_correct_allocation(theory.TheoryScenario(p=0.4, d1=1.0, d2=v)) for v in levels]
    agree = all(abs(e - q) <= 3.0 * se + 1e-12 for e, q, se in zip(table.estimates, quad, table.mc_se))
    checks.append(
        _check(
            "allocation limit along d2",
            table.nondecreasing and table.estimates[-1] > 0.999 and agree,
            levels=levels, monte_carlo=table.estimates, mc_se=table.mc_se, quadrature=quad,
        )
    )
    rho_levels = [0.0, 0.5, 0.9, 0.99, 0.999]
    table = theory.allocation_limit_check(s1, "rho", rho_levels, n_draws=mc_draws, seed=seed)
    checks.append(
        _check(
            "allocation limit along rho",
            table.nondecreasing and table.estimates[-1] > 0.99,
            levels=rho_levels, monte_carlo=table.estimates, mc_se=table.mc_se,
        )
    )
    for own, other in ((0.7, 1.5), (1.5, 0.7)):
        het = theory.TheoryScenario(p=0.4, d1=1.0, d2=0.0, sigma2=own, sigma2_k2=other)
        table = theory.allocation_limit_check(het, "d2", levels, n_draws=mc_draws, seed=seed)
        checks.append(
            _check(
                f"heteroscedastic allocation limit, sigma2 = ({own}, {other})",
                table.nondecreasing and table.estimates[-1] > 0.999,
                levels=levels, monte_carlo=table.estimates, mc_se=table.mc_se,
            )
        )

    # quadratic interval sign conditions
    bad = 0
    for _ in range(200):
        d2, so, sk = rng.uniform(-5, 5), rng.uniform(0.3, 3), rng.uniform(0.3, 3)
        iv = theory.allocation_interval(d2, so, sk)
        for x in rng.uniform(-20, 20, size=20):
            log_ratio = (-0.5 * (x - d2) ** 2 / sk**2 - math.log(sk)) - (-0.5 * x**2 / so**2 - math.log(so))
            q = iv.a * x * x + iv.b * x + iv.c
            if abs(q - log_ratio) > 1e-9 * max(1.0, abs(q)):
                bad += 1
            inside = iv.x_inf < x < iv.x_sup
            if abs(q) > 1e-9 and (q < 0) != (inside if iv.a > 0 else not inside):
                bad += 1
    checks.append(_check("quadratic interval sign conditions", bad == 0, violations=bad))

    # information integrals
    one = theory.info_integral_univariate(1.0, 1.0, 1.0)
    closed = math.sqrt(2 * math.pi)
    checks.append(_check("I with p = 1 equals sqrt(2 pi)/sigma1", abs(one - closed) < 1e-9, value=one))
    scenarios = scenarios or [
        (d1, d2, 1.0, s2, p)
        for d1 in (0.0, 1.0, 3.0, 5.0)
        for d2 in (0.0, 1.0, 3.0, 5.0)
        for s2 in (0.8, 1.0, 2.0)
        for p in (0.3, 0.4, 0.5)
    ]
    rows = theory.dominance_table(scenarios)
    separation = all(
        abs(r.normalized_ratio - 1.0) < 1e-7 for r in rows if r.d2 == 0.0
    )
    checks.append(_check("II equals sqrt(2 pi) sigma2 I when d2 = 0", separation))
    checks.append(
        _check(
            "II exceeds sqrt(2 pi) sigma2 / 2 * I",
            all(r.exceeds_bound for r in rows),
            table=[asdict(r) for r in rows],
        )
    )
    halving = max(
        abs(
            theory.info_integral_bivariate(d1, d2, s1_, s2, p_, tol=1e-8)
            - theory.info_integral_bivariate(d1, d2, s1_, s2, p_, tol=5e-9)
        )
        for d1, d2, s1_, s2, p_ in scenarios[:: max(1, len(scenarios) // 12)]
    )
    checks.append(_check("II stable under tolerance halving", halving < 1e-8, max_change=halving))
    sweep = (0.5, 0.8, 1.0, 2.0)
    literal_all, normalized_ok = True, True
    sweeps = []
    for d2 in (0.0, 1.0, 3.0, 5.0):
        literal, normalized = theory.sigma2_sweep(1.0, d2, 1.0, 0.4, sweep)
        lit_dec = theory.is_decreasing(literal, strict=True)
        norm_dec = theory.is_decreasing(normalized, strict=False, slack=1e-9)
        literal_all &= lit_dec
        normalized_ok &= norm_dec
        sweeps.append({"d2": d2, "sigma2": sweep, "literal": literal, "normalized": normalized})
    checks.append(
        _check(
            "normalized information II / (sqrt(2 pi) sigma2) non-increasing in sigma2",
            normalized_ok, sweeps=sweeps,
        )
    )
    # informational: the un-normalized II grows with sigma2 through its kernel mass
    checks.append(
        dict(
            name="un-normalized II decreasing in sigma2 (informational, not gated)",
            passed=bool(literal_all),
            gated=False,
        )
    )
    return checks


def cmd_theory(args) -> int:
    start = time.perf_counter()
    scenarios = None
    if args.scenario_file:
        try:
            raw = json.loads(Path(args.scenario_file).read_text(encoding="utf-8"))
            scenarios = [
                (float(s["d1"]), float(s["d2"]), float(s.get("sigma1", 1.0)), float(s["sigma2"]), float(s["p"]))
                for s in raw
            ]
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise InputError(f"{args.scenario_file}: {exc}") from None
    checks = theory_checks(args.tolerance, args.mc_draws, args.seed, scenarios)
    gated = [c for c in checks if c.get("gated", True)]
    report = _header(args, "theory-check")
    report.update(seed=args.seed, checks=checks, all_passed=all(c["passed"] for c in gated))
    _emit(report, args.out, {"theory-check": time.perf_counter() - start})
    for c in checks:
        status = "PASS" if c["passed"] else "FAIL"
        if not c.get("gated", True):
            status = "INFO " + ("yes" if c["passed"] else "no")
        logger.info("%s  %s", status, c["name"])
    return EXIT_OK if report["all_passed"] else EXIT_GATE


# ---------------------------------------------------------------- causal


def _iv_analysis(sample: IvSample, args) -> dict:
    out: dict = {"identification_warning": sample.identification_warning}
    try:
        mom = mom_mixing_probs(sample)
        no_compliers = False
    except MonotonicityViolationError as exc:
        mom = mom_mixing_probs(sample, strict=False)
        no_compliers = True
        out["note"] = (
            f"{exc}; fitted without compliers, so every (d, z) cell is a single Gaussian"
        )
    out["mom"] = dict(zip(("pi", "omega_a", "omega_n", "omega_c"), mom))
    config = IvFitConfig(n_random=args.starts, seed=args.seed, no_compliers=no_compliers)
    roots = iv_fit_multistart(sample, config)
    ele = select_ele(roots, mom)
    out["roots"] = [
        {
            "start": r.start,
            "loglik": r.loglik,
            "converged": r.converged,
            "spurious": r.spurious,
            "spurious_reason": r.spurious_reason,
            "omega": r.model.omega,
            "omega_distance_to_mom": omega_distance(r.model, mom),
            "means": r.model.means,
            "covariances": r.model.covariances,
        }
        for r in roots
    ]
    out["ele_root"] = roots.index(ele)
    out["max_loglik_root"] = 0
    rep = cace_report(ele, sample)
    out["i2_indefinite"] = rep.i2_indefinite
    out["table"] = [
        {"name": r.name, "estimate": r.estimate, "se": r.se, "p_value": r.p_value} for r in rep.rows
    ]
    return out


def cmd_causal(args) -> int:
    start = time.perf_counter()
    header, rows = read_csv(args.data)
    x = _column(args.data, header, rows, args.outcome)
    d = _column(args.data, header, rows, args.treatment)
    z = _column(args.data, header, rows, args.instrument)
    for name, col in ((args.treatment, d), (args.instrument, z)):
        if any(v not in (0.0, 1.0) for v in col):
            raise InputError(f"{args.data}: column {name!r} must be 0/1")
    report = _header(args, "causal")
    report["seed"] = args.seed
    try:
        univ = IvSample(np.array(x), np.array(d, dtype=int), np.array(z, dtype=int))
        if univ.identification_warning:
            logger.warning("IDENTIFICATION: %s", univ.identification_warning)
        report["univariate"] = _iv_analysis(univ, args)
        if args.bivariate:
            if not args.aux:
                raise InputError("--bivariate needs --aux naming the auxiliary outcome column")
            x2 = _column(args.data, header, rows, args.aux)
            biv = IvSample(np.column_stack([x, x2]), univ.d, univ.z)
            report["bivariate"] = _iv_analysis(biv, args)
    except (MixtureLabError, ValueError) as exc:
        if isinstance(exc, InputError):
            raise
        report["error"] = str(exc)
        _emit(report, args.out, {"causal": time.perf_counter() - start})
        return EXIT_NUMERIC
    _emit(report, args.out, {"causal": time.perf_counter() - start})
    if args.table_csv:
        rows_out = []
        for variant in ("univariate", "bivariate"):
            if variant not in report:
                continue
            for r in report[variant]["table"]:
                row = {"variant": variant, "name": r["name"], "estimate": r["estimate"]}
                for e in ESTIMATORS:
                    row[f"se_{e}"] = r["se"][e]
                    row[f"p_{e}"] = r["p_value"][e] if r["p_value"] else None
                rows_out.append(row)
        cols = ["variant", "name", "estimate"] + [f"{k}_{e}" for e in ESTIMATORS for k in ("se", "p")]
        write_csv(Path(args.table_csv), rows_out, cols)
    return EXIT_OK


# ---------------------------------------------------------------- contour

CONTOUR_PRESETS = {
    "a": (0.05, 1.0, 0.0),
    "b": (0.05, 1.0, 0.9),
    "c": (0.05, 4.0, 0.0),
    "d": (0.05, 4.0, 0.9),
}


def contour_model(mu2x, mu2y, rho, p=0.5, sigma=1.0) -> MixtureModel:
    v = bivariate_covariance(sigma, sigma, rho)
    return MixtureModel([p, 1 - p], [[0.0, 0.0], [mu2x, mu2y]], [v, v])


def contour_grid(model: MixtureModel, resolution: int, half_width: Optional[float] = None):
    """Density on a resolution x resolution grid centred at the midpoint of the means.

    Node offsets are exactly antisymmetric about the centre.
    """
    centre = model.means.mean(axis=0)
    if half_width is None:
        spread = np.sqrt(np.max(np.diagonal(model.covariances, axis1=1, axis2=2), axis=0))
        half_width = float(np.max(np.abs(model.means - centre) + 4.0 * spread))
    step = 2.0 * half_width / (resolution - 1)
    offsets = step * (np.arange(resolution) - (resolution - 1) / 2.0)
    g1, g2 = np.meshgrid(centre[0] + offsets, centre[1] + offsets, indexing="ij")
    nodes = np.column_stack([g1.ravel(), g2.ravel()])
    return nodes, np.exp(log_density(model, nodes))


def cmd_contour(args) -> int:
    start = time.perf_counter()
    if args.preset:
        mu2x, mu2y, rho = CONTOUR_PRESETS[args.preset]
        p, sigma = 0.5, 1.0
    else:
        vals = _floats(args.params)
        if not vals or len(vals) != 5:
            raise InputError("--params takes p,mu2x,mu2y,sigma,rho")
        p, mu2x, mu2y, sigma, rho = vals
    if args.grid_resolution < 2:
        raise InputError("--grid-resolution must be at least 2")
    try:
        model = contour_model(mu2x, mu2y, rho, p, sigma)
    except (ValueError, MixtureLabError) as exc:
        raise InputError(str(exc)) from None
    nodes, dens = contour_grid(model, args.grid_resolution, args.half_width)
    out = Path(args.out)
    write_csv(
        out,
        [{"x1": a, "x2": b, "density": f} for (a, b), f in zip(nodes, dens)],
        ["x1", "x2", "density"],
    )
    if args.points:
        rng = np.random.default_rng(np.random.SeedSequence([args.seed, 3]))
        x, labels = model.sample(args.points, rng)
        write_csv(
            Path(str(out) + ".points.csv"),
            [{"x1": a, "x2": b, "component": int(c) + 1} for (a, b), c in zip(x, labels)],
            ["x1", "x2", "component"],
        )
    Path(str(out) + ".timing.json").write_text(
        dumps({"contour": time.perf_counter() - start}) + "\n", encoding="utf-8"
    )
    return EXIT_OK


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixturelab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mixturelab {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a Gaussian mixture to numeric CSV columns")
    p.add_argument("data")
    p.add_argument("--columns", help="comma-separated columns (default: all but the label column)")
    p.add_argument("--label-column", help="true class column for per-component allocation rates")
    p.add_argument("--components", "-k", type=int, default=2)
    p.add_argument("--fix-weights", type=float, nargs="+")
    p.add_argument("--fix-cov", help="JSON file holding a K x m x m array of fixed covariances")
    p.add_argument("--starts", type=int, default=10, help="random starts besides the quantile splits")
    p.add_argument("--max-iterations", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default: stdout)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("--setting", choices=["s1", "s2", "s3", "S1", "S2", "S3"], required=True)
    p.add_argument("--profile", choices=sorted(_PROFILES), default="desk")
    p.add_argument("--d2-grid", help="comma-separated d2 levels (empty string drops the panel)")
    p.add_argument("--rho-grid", help="comma-separated rho levels (empty string drops the panel)")
    p.add_argument("--replicates", type=int)
    p.add_argument("--truth-replicates", type=int)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("theory-check", help="run the closed-form and quadrature oracles")
    p.add_argument("--scenario-file", help="JSON list of {d1, d2, sigma1, sigma2, p} scenarios")
    p.add_argument("--tolerance", type=float, default=1e-8)
    p.add_argument("--mc-draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=20240101)
    p.add_argument("--out")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("causal", help="IV compliance mixture with ELE selection")
    p.add_argument("data")
    p.add_argument("--outcome", default="x")
    p.add_argument("--aux", help="auxiliary outcome column for --bivariate")
    p.add_argument("--treatment", default="d")
    p.add_argument("--instrument", default="z")
    p.add_argument("--bivariate", action="store_true")
    p.add_argument("--starts", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--table-csv", help="also write the estimate table as CSV")
    p.set_defaults(func=cmd_causal)

    p = sub.add_parser("contour", help="mixture density on a grid for external plotting")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--preset", choices=sorted(CONTOUR_PRESETS))
    g.add_argument("--params", help="p,mu2x,mu2y,sigma,rho with mu1 = (0, 0)")
    p.add_argument("--grid-resolution", type=int, default=101)
    p.add_argument("--half-width", type=float)
    p.add_argument("--points", type=int, default=0, help="also sample this many labelled points")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_contour)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (MixtureLabError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
