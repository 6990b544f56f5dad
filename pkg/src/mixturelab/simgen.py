"""Simulation settings S1-S3 and the Monte Carlo study harness.

S1 and S2 draw from a bivariate Gaussian mixture with component 1 at
(0, 0) carrying weight ``p`` and component 2 at (1, d2), both with unit
variances and correlation ``rho``. S1 fits with ``p`` and ``V`` known; S2
estimates everything. S3 replaces the Gaussian errors by standardized
non-central t draws (df = 20, lambda = 7) and estimates everything.

Every replicate draws its labels and standardized errors from a stream keyed
on ``(seed, phase, replicate)`` only. The first coordinate of the data is
therefore the same in every grid cell of a replicate, so the univariate fit
is computed once per replicate and bivariate/univariate comparisons are
paired.
"""

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import gammaln

from mixturelab.errors import MixtureLabError, SingularMatrixError
from mixturelab.estimation import (
    FitConfig,
    StartSpec,
    align_labels,
    best_root,
    default_starts,
    em_fit,
    multi_start_fit,
)
from mixturelab.information import ESTIMATORS, information
from mixturelab.model import MixtureModel, Sample, bivariate_covariance, cholesky_factor

logger = logging.getLogger(__name__)

KINDS = ("S1", "S2", "S3")
PHASE_TRUTH, PHASE_STUDY = 0, 1
T_DF, T_NONCENTRALITY = 20.0, 7.0
# S3 cells are assessed only when the mean of mu_11-hat is this close to E(x_11)
SCREEN_TOLERANCE = 0.03
UNRELIABLE_FAILURE_SHARE = 0.10

_DEFAULT_GRIDS = {
    "S1": ((0.0, 1.0, 3.0, 5.0, 50.0), (0.5, 0.75, 0.9, 0.99), 0.0),
    "S2": ((0.0, 1.0, 3.0, 5.0, 50.0), (0.5, 0.75, 0.9, 0.99), 0.0),
    "S3": ((4.0, 5.0, 50.0), (0.5, 0.75, 0.9, 0.99), 4.0),
}


@dataclass(frozen=True)
class Cell:
    """One grid point. ``panel`` is "d2" (rho fixed) or "rho" (d2 fixed)."""

    panel: str
    d2: float
    rho: float

    @property
    def label(self) -> str:
        level = self.d2 if self.panel == "d2" else self.rho
        return f"{self.panel}={level:g}"


@dataclass(frozen=True)
class SimSetting:
    """A simulation study.

    ``d2`` is the fixed gap of the rho panel and ``rho`` the fixed
    correlation of the d2 panel. Empty grids drop that panel.
    """

    kind: str = "S1"
    n: int = 500
    p: float = 0.4
    d2: Optional[float] = None
    rho: float = 0.0
    d2_grid: Optional[Tuple[float, ...]] = None
    rho_grid: Optional[Tuple[float, ...]] = None
    replicates: int = 500
    mc_truth_replicates: int = 2000
    seed: int = 20240101
    max_iterations: int = 5000

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        d2_default, rho_default, d2_base = _DEFAULT_GRIDS[self.kind]
        if self.d2_grid is None:
            object.__setattr__(self, "d2_grid", d2_default)
        if self.rho_grid is None:
            object.__setattr__(self, "rho_grid", rho_default)
        if self.d2 is None:
            object.__setattr__(self, "d2", d2_base)
        object.__setattr__(self, "d2_grid", tuple(float(v) for v in self.d2_grid))
        object.__setattr__(self, "rho_grid", tuple(float(v) for v in self.rho_grid))
        if self.n < 2 or self.replicates < 1 or self.mc_truth_replicates < 2:
            raise ValueError("need n >= 2, replicates >= 1 and mc_truth_replicates >= 2")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        for grid in (self.d2_grid, self.rho_grid):
            if not all(math.isfinite(v) for v in grid) or list(grid) != sorted(grid):
                raise ValueError("grids must be finite and sorted")
        if any(abs(r) >= 1.0 for r in self.rho_grid + (self.rho,)):
            raise ValueError("|rho| must be below 1")

    def cells(self) -> List[Cell]:
        out = [Cell("d2", d2, self.rho) for d2 in self.d2_grid]
        out += [Cell("rho", self.d2, rho) for rho in self.rho_grid]
        return out

    def true_model(self, cell: Cell) -> MixtureModel:
        v = bivariate_covariance(1.0, 1.0, cell.rho)
        return MixtureModel([self.p, 1.0 - self.p], [[0.0, 0.0], [1.0, cell.d2]], [v, v])


def _stream(seed, phase, replicate):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), phase, replicate]))


def noncentral_t_moments(df: float, noncentrality: float) -> Tuple[float, float]:
    """Mean and variance of the non-central t distribution.

    Raises:
        ValueError: if ``df <= 2`` (variance undefined).
    """
    if not df > 2:
        raise ValueError("df must exceed 2 for a finite variance")
    ratio = math.exp(gammaln((df - 1) / 2) - gammaln(df / 2))
    mean = noncentrality * math.sqrt(df / 2) * ratio
    var = df * (1 + noncentrality**2) / (df - 2) - noncentrality**2 * df / 2 * ratio**2
    return mean, var


def _labels(rng, n, p):
    # component 0 (weight p) when the uniform falls below p
    return (rng.random(n) >= p).astype(np.int64)


def _errors(kind, rng, n):
    if kind == "S3":
        mean, var = noncentral_t_moments(T_DF, T_NONCENTRALITY)
        z = rng.standard_normal((n, 2))
        w = rng.chisquare(T_DF, size=(n, 2))
        t = (z + T_NONCENTRALITY) / np.sqrt(w / T_DF)
        return (t - mean) / math.sqrt(var)
    return rng.standard_normal((n, 2))


def _draw(setting: SimSetting, rng) -> Tuple[np.ndarray, np.ndarray]:
    labels = _labels(rng, setting.n, setting.p)
    return labels, _errors(setting.kind, rng, setting.n)


def _place(setting: SimSetting, cell: Cell, labels, eps) -> Sample:
    # x = mu_k + C eps with C C' = V; the first coordinate never depends on rho
    chol = cholesky_factor(bivariate_covariance(1.0, 1.0, cell.rho), "target correlation matrix")
    means = np.array([[0.0, 0.0], [1.0, cell.d2]])
    return Sample(means[labels] + eps @ chol.T, labels)


def gen_gaussian_mixture(setting: SimSetting, cell: Cell, seed) -> Sample:
    """S1/S2 sample with true 0-based labels; ``seed`` is an int or int sequence."""
    if setting.kind not in ("S1", "S2"):
        raise ValueError("gen_gaussian_mixture serves S1 and S2")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    labels, eps = _draw(setting, rng)
    return _place(setting, cell, labels, eps)


def gen_t_mixture(setting: SimSetting, cell: Cell, seed) -> Sample:
    """S3 sample: standardized non-central t errors mapped through the correlation factor."""
    if setting.kind != "S3":
        raise ValueError("gen_t_mixture serves S3")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    labels, eps = _draw(setting, rng)
    return _place(setting, cell, labels, eps)


def generate(setting: SimSetting, cell: Cell, seed) -> Sample:
    return (gen_t_mixture if setting.kind == "S3" else gen_gaussian_mixture)(setting, cell, seed)


def _configs(setting: SimSetting, truth: MixtureModel, sample: Sample):
    """Fit configuration and start list for a sample of 1 or 2 coordinates."""
    m = sample.dim
    if setting.kind == "S1":
        cov = truth.covariances[:, :m, :m]
        start = StartSpec("explicit", model=MixtureModel(truth.weights, truth.means[:, :m], cov))
        return FitConfig(
            k=2,
            fix_weights=truth.weights,
            fix_covariances=cov,
            starts=(start,),
            max_iterations=setting.max_iterations,
        )
    return FitConfig(k=2, starts=default_starts(sample, 2), max_iterations=setting.max_iterations)


def _fit(setting: SimSetting, truth: MixtureModel, sample: Sample):
    """Best regular root aligned to the truth; raises MixtureLabError on failure."""
    config = _configs(setting, truth, sample)
    reference = MixtureModel(truth.weights, truth.means[:, : sample.dim],
                             truth.covariances[:, : sample.dim, : sample.dim])
    if len(config.starts) == 1:
        fit = em_fit(sample, config, config.starts[0])
        fit = fit if not fit.spurious else None
    else:
        fit = best_root(multi_start_fit(sample, config))
    if fit is None:
        raise MixtureLabError("no regular root")
    if not fit.converged:
        raise MixtureLabError(f"EM did not converge in {setting.max_iterations} iterations")
    return align_labels(fit, reference)


def _record(setting: SimSetting, phase: int, truth: MixtureModel, sample: Sample) -> dict:
    record: Dict[str, object] = {"ok": False}
    try:
        fit = _fit(setting, truth, sample)
        record.update(ok=True, mu11=float(fit.model.means[0, 0]))
        if sample.dim > 1:
            record["mu12"] = float(fit.model.means[1, 0])
        if phase == PHASE_STUDY:
            rep = information(fit, sample)
            record["ar"] = rep.allocation_rate
            record["se"] = {e: rep.se_of("mu1_1", e) for e in ESTIMATORS}
    except (MixtureLabError, SingularMatrixError, np.linalg.LinAlgError) as exc:
        record["error"] = f"{type(exc).__name__}: {exc}"
    return record


def _one_replicate(args):
    """All cells of one replicate as plain data, so results pickle cheaply."""
    setting, phase, replicate = args
    labels, eps = _draw(setting, _stream(setting.seed, phase, replicate))
    base = Cell("d2", 0.0, 0.0)
    univ_sample = _place(setting, base, labels, eps).select([0])
    return {
        "univ": _record(setting, phase, setting.true_model(base), univ_sample),
        "cells": [
            _record(setting, phase, setting.true_model(c), _place(setting, c, labels, eps))
            for c in setting.cells()
        ],
    }


def worker_count() -> int:
    env = os.environ.get("MIXTURELAB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_phase(setting: SimSetting, phase: int, count: int, workers: int):
    tasks = [(setting, phase, r) for r in range(count)]
    if workers <= 1:
        return [_one_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves task order, so aggregation order is schedule independent
        return list(pool.map(_one_replicate, tasks, chunksize=max(1, count // (8 * workers))))


@dataclass
class EstimatorStats:
    abs_bias: float
    mean_se: float
    rmse: float
    star_count: Optional[int]
    star_compared: Optional[int]
    n_used: int


@dataclass
class CellReport:
    label: str
    model: str
    panel: Optional[str]
    d2: Optional[float]
    rho: Optional[float]
    true_se: float
    true_se_mu12: Optional[float]
    mean_mu11: float
    allocation_rate: float
    estimators: Dict[str, EstimatorStats]
    truth_failures: int
    study_failures: int
    unreliable: bool
    screened: Optional[bool]


@dataclass
class StudyReport:
    setting: SimSetting
    cells: List[CellReport]
    failure_messages: Dict[str, List[str]] = field(default_factory=dict)
    timings: Dict[str, float] = field(default_factory=dict)

    def cell(self, label: str) -> CellReport:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(label)

    def to_dict(self) -> dict:
        """JSON-ready content; excludes ``timings`` so reruns compare equal."""
        return {
            "setting": asdict(self.setting),
            "cells": [asdict(c) for c in self.cells],
            "failure_messages": self.failure_messages,
        }


def _sd(values):
    n = len(values)
    if n < 2:
        return math.nan
    mean = math.fsum(values) / n
    return math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def _mean(values):
    return math.fsum(values) / len(values) if values else math.nan


def _estimator_stats(records, univ_records, true_se, estimators):
    stats = {}
    for est in estimators:
        se = [r["se"][est] if r["ok"] else math.nan for r in records]
        used = [v for v in se if math.isfinite(v)]
        mean_se = _mean(used)
        rmse = math.sqrt(_mean([(v - true_se) ** 2 for v in used])) if used else math.nan
        star = compared = None
        if univ_records is not None:
            pairs = [
                (b, u["se"][est])
                for b, u in zip(se, univ_records)
                if math.isfinite(b) and u["ok"] and math.isfinite(u["se"][est])
            ]
            compared = len(pairs)
            star = sum(1 for b, u in pairs if b < u)
        stats[est] = EstimatorStats(abs(mean_se - true_se), mean_se, rmse, star, compared, len(used))
    return stats


def _cell_report(setting, label, model, cell, truth_recs, study_recs, univ_recs, estimators):
    ok_truth = [r for r in truth_recs if r["ok"]]
    ok_study = [r for r in study_recs if r["ok"]]
    true_se = _sd([r["mu11"] for r in ok_truth])
    true_se_12 = _sd([r["mu12"] for r in ok_truth]) if model == "bivariate" else None
    mean_mu11 = _mean([r["mu11"] for r in ok_study])
    fails_truth = len(truth_recs) - len(ok_truth)
    fails_study = len(study_recs) - len(ok_study)
    unreliable = (
        fails_truth > UNRELIABLE_FAILURE_SHARE * len(truth_recs)
        or fails_study > UNRELIABLE_FAILURE_SHARE * len(study_recs)
    )
    screened = abs(mean_mu11 - 0.0) < SCREEN_TOLERANCE if setting.kind == "S3" else None
    return CellReport(
        label=label,
        model=model,
        panel=cell.panel if cell else None,
        d2=cell.d2 if cell else None,
        rho=cell.rho if cell else None,
        true_se=true_se,
        true_se_mu12=true_se_12,
        mean_mu11=mean_mu11,
        allocation_rate=_mean([r["ar"] for r in ok_study]),
        estimators=_estimator_stats(study_recs, univ_recs, true_se, estimators),
        truth_failures=fails_truth,
        study_failures=fails_study,
        unreliable=unreliable,
        screened=screened,
    )


def run_study(setting: SimSetting, workers: Optional[int] = None) -> StudyReport:
    """Phase A estimates the true SE of mu_11-hat; phase B scores the SE estimators.

    Per cell and estimator the report holds |mean(se) - true SE|, mean se,
    RMSE of se about the true SE, and the number of replicates whose
    bivariate se is strictly below the univariate one.
    """
    workers = worker_count() if workers is None else workers
    estimators = ESTIMATORS if setting.kind == "S3" else ESTIMATORS[:2]
    timings = {}
    start = time.perf_counter()
    truth = _run_phase(setting, PHASE_TRUTH, setting.mc_truth_replicates, workers)
    timings["truth"] = time.perf_counter() - start
    start = time.perf_counter()
    study = _run_phase(setting, PHASE_STUDY, setting.replicates, workers)
    timings["study"] = time.perf_counter() - start

    univ_truth = [r["univ"] for r in truth]
    univ_study = [r["univ"] for r in study]
    cells = [
        _cell_report(setting, "univ", "univariate", None, univ_truth, univ_study, None, estimators)
    ]
    messages = {}
    for j, cell in enumerate(setting.cells()):
        t_recs = [r["cells"][j] for r in truth]
        s_recs = [r["cells"][j] for r in study]
        cells.append(
            _cell_report(setting, cell.label, "bivariate", cell, t_recs, s_recs, univ_study, estimators)
        )
        errs = [r["error"] for r in t_recs + s_recs if not r["ok"]]
        if errs:
            messages[cell.label] = sorted(set(errs))
    errs = [r["error"] for r in univ_truth + univ_study if not r["ok"]]
    if errs:
        messages["univ"] = sorted(set(errs))
    return StudyReport(setting, cells, messages, timings)


def report_rows(report: StudyReport) -> List[dict]:
    """Flat rows, one per cell and estimator, for CSV output."""
    rows = []
    for c in report.cells:
        for est, s in c.estimators.items():
            rows.append(
                {
                    "setting": report.setting.kind,
                    "cell": c.label,
                    "model": c.model,
                    "d2": c.d2,
                    "rho": c.rho,
                    "estimator": est,
                    "abs_bias": s.abs_bias,
                    "mean_se": s.mean_se,
                    "rmse": s.rmse,
                    "star_count": s.star_count,
                    "star_compared": s.star_compared,
                    "n_used": s.n_used,
                    "true_se": c.true_se,
                    "mean_mu11": c.mean_mu11,
                    "allocation_rate": c.allocation_rate,
                    "truth_failures": c.truth_failures,
                    "study_failures": c.study_failures,
                    "unreliable": c.unreliable,
                    "screened": c.screened,
                }
            )
    return rows
