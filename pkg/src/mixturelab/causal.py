"""Instrumental-variable compliance mixture and complier effect reporting.

Units fall in principal strata: always-treated (a), never-treated (n) and
compliers (c), with treatment ``d = 1`` for a, ``d = 0`` for n and
``d = z`` for c. The outcome density given stratum g and instrument arm z
is Gaussian with parameters indexed by the pair ``gz``. Observed cells
(d, z) then have densities

* (1, 0): (1 - pi) w_a f_a0
* (0, 1): pi w_n f_n1
* (1, 1): pi (w_a f_a1 + w_c f_c1)
* (0, 0): (1 - pi) (w_n f_n0 + w_c f_c0)

which is a six-component mixture whose admissible components depend on
the unit's cell. Likelihood, EM and scores all use that representation.
"""

import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from mixturelab.errors import (
    DegenerateComponentError,
    DimensionError,
    FittingFailedError,
    MonotonicityViolationError,
    SingularMatrixError,
)
from mixturelab.information import ESTIMATORS, _inverse, _is_pd, fd_jacobian
from mixturelab.model import LOG_2PI, _logsumexp_rows, cholesky_factor

logger = logging.getLogger(__name__)

COMPONENTS = ("a0", "a1", "n0", "n1", "c0", "c1")
GROUPS = ("a", "n", "c")
_GROUP_OF = np.array([0, 0, 1, 1, 2, 2])
# admissible components per observed cell (d, z)
_CELL_COMPONENTS = {
    (1, 0): ("a0",),
    (0, 1): ("n1",),
    (1, 1): ("a1", "c1"),
    (0, 0): ("n0", "c0"),
}


class IdentificationWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class IvSample:
    """Outcomes ``x`` (n or n x m), binary treatment ``d`` and instrument ``z``."""

    x: np.ndarray
    d: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        d = np.array(self.d).reshape(-1)
        z = np.array(self.z).reshape(-1)
        if x.ndim != 2 or not (x.shape[0] == d.size == z.size) or x.shape[0] < 1:
            raise DimensionError("x, d and z must describe the same units")
        if not np.all(np.isfinite(x)):
            raise ValueError("outcomes must be finite")
        for name, v in (("d", d), ("z", z)):
            if not np.all((v == 0) | (v == 1)):
                raise ValueError(f"{name} must be binary 0/1")
        d, z = d.astype(np.int64), z.astype(np.int64)
        for arr in (x, d, z):
            arr.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "z", z)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def cell_counts(self) -> Dict[Tuple[int, int], int]:
        return {c: int(np.sum((self.d == c[0]) & (self.z == c[1]))) for c in _CELL_COMPONENTS}

    @property
    def identification_warning(self) -> Optional[str]:
        empty = [f"(d={c[0]}, z={c[1]})" for c, k in self.cell_counts().items() if k == 0]
        return f"empty cells {', '.join(empty)}: parameters are not identified" if empty else None

    def admissible(self) -> np.ndarray:
        """Boolean (n, 6) mask of components allowed for each unit."""
        mask = np.zeros((self.n, len(COMPONENTS)), dtype=bool)
        for (d, z), comps in _CELL_COMPONENTS.items():
            rows = (self.d == d) & (self.z == z)
            for c in comps:
                mask[rows, COMPONENTS.index(c)] = True
        return mask


@dataclass(frozen=True, eq=False)
class IvMixtureModel:
    """pi = Pr(Z=1), stratum probabilities and per-(stratum, arm) Gaussians.

    ``means`` has shape (6, m) and ``covariances`` (6, m, m), ordered as
    ``COMPONENTS``. ``omega_c == 0`` is allowed and removes the compliers;
    their parameters are then ignored.
    """

    pi: float
    omega: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        omega = np.array(self.omega, dtype=float).reshape(-1)
        means = np.array(self.means, dtype=float)
        if means.ndim == 1:
            means = means.reshape(len(COMPONENTS), -1)
        m = means.shape[1]
        covs = np.array(self.covariances, dtype=float).reshape(len(COMPONENTS), m, m)
        if not 0.0 < self.pi < 1.0:
            raise ValueError("pi must lie in (0, 1)")
        if omega.shape != (3,) or omega[0] <= 0 or omega[1] <= 0 or omega[2] < 0:
            raise ValueError("omega must be (a, n, c) with a, n > 0 and c >= 0")
        if abs(omega.sum() - 1.0) > 1e-12:
            raise ValueError("omega must sum to one")
        if not np.all(np.isfinite(means)):
            raise ValueError("means must be finite")
        chols = []
        for j, name in enumerate(COMPONENTS):
            if np.abs(covs[j] - covs[j].T).max() >= 1e-12:
                raise ValueError(f"covariance {name} is not symmetric")
            chols.append(cholesky_factor(covs[j], f"covariance {name}"))
        for arr in (omega, means, covs):
            arr.setflags(write=False)
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "omega", omega)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "_chols", np.array(chols))

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def has_compliers(self) -> bool:
        return self.omega[2] > 0

    def active(self) -> List[int]:
        return list(range(6)) if self.has_compliers else [0, 1, 2, 3]

    def mean(self, name: str, coordinate: int = 0) -> float:
        return float(self.means[COMPONENTS.index(name), coordinate])

    def sigma(self, name: str, coordinate: int = 0) -> float:
        j = COMPONENTS.index(name)
        return math.sqrt(self.covariances[j, coordinate, coordinate])


def _component_logpdf(model: IvMixtureModel, x: np.ndarray) -> np.ndarray:
    n, m = x.shape
    out = np.empty((n, len(COMPONENTS)))
    for j in range(len(COMPONENTS)):
        chol = model._chols[j]
        z = np.linalg.solve(chol, (x - model.means[j]).T)
        out[:, j] = -0.5 * (np.einsum("ij,ij->j", z, z) + m * LOG_2PI) - np.log(np.diag(chol)).sum()
    return out


def _joint(model: IvMixtureModel, sample: IvSample) -> np.ndarray:
    """log Pr(z) + log w_g + log f_gz(x) on admissible components, -inf elsewhere."""
    with np.errstate(divide="ignore"):
        log_omega = np.log(model.omega)[_GROUP_OF]
    log_pz = np.where(sample.z == 1, math.log(model.pi), math.log1p(-model.pi))
    out = _component_logpdf(model, sample.x) + log_omega + log_pz[:, None]
    return np.where(sample.admissible(), out, -np.inf)


def unit_loglik(model: IvMixtureModel, sample: IvSample) -> np.ndarray:
    if model.dim != sample.dim:
        raise DimensionError("model and sample outcome dimensions differ")
    return _logsumexp_rows(_joint(model, sample))[:, 0]


def iv_loglik(model: IvMixtureModel, sample: IvSample) -> float:
    """Log-likelihood of the compliance mixture; warns when a cell is empty."""
    msg = sample.identification_warning
    if msg:
        warnings.warn(msg, IdentificationWarning, stacklevel=2)
    return float(unit_loglik(model, sample).sum())


def posteriors(model: IvMixtureModel, sample: IvSample) -> np.ndarray:
    """Posterior stratum-arm membership; zero outside each unit's cell."""
    joint = _joint(model, sample)
    return np.exp(joint - _logsumexp_rows(joint))


def mom_mixing_probs(sample: IvSample, strict: bool = True) -> Tuple[float, float, float, float]:
    """Plug-in (pi, w_a, w_n, w_c) from the (d, z) cell frequencies.

    With ``strict=False`` a non-positive complier share is returned as is,
    which still serves as an anchor for :func:`select_ele`.

    Raises:
        ValueError: if an instrument arm is empty.
        MonotonicityViolationError: if ``strict`` and the implied complier
            share is <= 0.
    """
    z1 = sample.z == 1
    if z1.all() or not z1.any():
        raise ValueError("both instrument arms must be observed")
    pi = float(z1.mean())
    omega_a = float((sample.d[~z1] == 1).mean())
    omega_n = float((sample.d[z1] == 0).mean())
    omega_c = 1.0 - omega_a - omega_n
    if strict and omega_c <= 0:
        raise MonotonicityViolationError(
            f"moment estimate of the complier share is {omega_c:.6g}; no compliers"
        )
    return pi, omega_a, omega_n, omega_c


@dataclass(frozen=True)
class IvFitConfig:
    n_random: int = 10
    seed: int = 0
    max_iterations: int = 2000
    rel_tolerance: float = 1e-8
    ridge: float = 1e-10
    no_compliers: bool = False
    det_ratio: float = 1e-3
    mass_fraction: float = 0.02
    min_mass: float = 2.0
    dedup_tolerance: float = 1e-4


@dataclass(frozen=True, eq=False)
class IvFitResult:
    model: IvMixtureModel
    loglik: float
    loglik_trace: np.ndarray
    posteriors: np.ndarray
    iterations: int
    converged: bool
    start: str
    spurious: bool = False
    spurious_reason: str = ""


def _m_step(sample: IvSample, tau: np.ndarray, prev: IvMixtureModel, config: IvFitConfig):
    x, n = sample.x, sample.n
    mass = tau.sum(axis=0)
    active = [0, 1, 2, 3] if config.no_compliers else list(range(6))
    for j in active:
        if mass[j] < 1e-10 * n:
            raise DegenerateComponentError(
                f"component {COMPONENTS[j]} lost its posterior mass", component=j
            )
    group_mass = np.array([mass[_GROUP_OF == g].sum() for g in range(3)])
    omega = group_mass / n
    if config.no_compliers:
        omega[2] = 0.0
    omega /= omega.sum()
    means = prev.means.copy()
    covs = prev.covariances.copy()
    m = sample.dim
    for j in active:
        w = tau[:, j]
        mu = w @ x / mass[j]
        r = x - mu
        cov = (w[:, None] * r).T @ r / mass[j]
        cov = 0.5 * (cov + cov.T)
        cov[np.diag_indices(m)] += config.ridge * np.trace(cov) / m
        means[j], covs[j] = mu, cov
    return IvMixtureModel(float(sample.z.mean()), omega, means, covs)


def _initial(sample: IvSample, config: IvFitConfig, kind: str, index: int) -> np.ndarray:
    """Starting posteriors (n, 6)."""
    tau = sample.admissible().astype(float)
    # mixed cell -> (non-complier component, complier component)
    mixed = {(1, 1): (1, 5), (0, 0): (2, 4)}
    if kind == "random":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7, index]))
        for (d, z), (j_other, j_c) in mixed.items():
            rows = np.flatnonzero((sample.d == d) & (sample.z == z))
            u = rng.random(rows.size)
            tau[rows, j_other], tau[rows, j_c] = u, 1.0 - u
        return _drop_compliers(sample, tau, config)
    # ordered splits of the mixed cells at the moment-estimate shares;
    # kind "mom-XY" puts the non-compliers of cell (1,1) low (X=L) or high
    # (X=H), and likewise Y for cell (0,0)
    _, wa, wn, wc = mom_mixing_probs(sample)
    plan = {(1, 1): (wa / (wa + wc), kind[4]), (0, 0): (wn / (wn + wc), kind[5])}
    for (d, z), (j_other, j_c) in mixed.items():
        share, side = plan[(d, z)]
        rows = np.flatnonzero((sample.d == d) & (sample.z == z))
        order = rows[np.argsort(sample.x[rows, 0], kind="stable")]
        cut = int(round(share * order.size))
        if side == "L":
            other, comp = order[:cut], order[cut:]
        else:
            other, comp = order[order.size - cut :], order[: order.size - cut]
        tau[other, j_other], tau[other, j_c] = 1.0, 0.0
        tau[comp, j_other], tau[comp, j_c] = 0.0, 1.0
    return _drop_compliers(sample, tau, config)


def _drop_compliers(sample: IvSample, tau: np.ndarray, config: IvFitConfig) -> np.ndarray:
    if config.no_compliers:
        tau[:, 4:] = 0.0
        tau[:, 1] = np.where((sample.d == 1) & (sample.z == 1), 1.0, tau[:, 1])
        tau[:, 2] = np.where((sample.d == 0) & (sample.z == 0), 1.0, tau[:, 2])
    return tau


def _placeholder(sample: IvSample) -> IvMixtureModel:
    m = sample.dim
    cov = np.cov(sample.x.T).reshape(m, m) + 1e-12 * np.eye(m)
    mean = sample.x.mean(axis=0)
    return IvMixtureModel(0.5, [0.4, 0.3, 0.3], np.tile(mean, (6, 1)), np.tile(cov, (6, 1, 1)))


def detect_spurious_iv(fit: IvFitResult, sample: IvSample, config: IvFitConfig) -> Tuple[bool, str]:
    """Flag collapsed components: tiny generalized variance or posterior mass.

    The mass floor is ``max(min_mass, mass_fraction * units in the cell)``
    where the cell is the one the component lives in.
    """
    model = fit.model
    active = model.active()
    reasons = []
    mass = fit.posteriors.sum(axis=0)
    cell_size = sample.admissible().sum(axis=0)
    logdets = np.array([2.0 * np.log(np.diag(model._chols[j])).sum() for j in active])
    geo = logdets.mean()
    for j, ld in zip(active, logdets):
        if ld < math.log(config.det_ratio) + geo:
            reasons.append(f"{COMPONENTS[j]}: |V| is {math.exp(ld - geo):.3g} x geometric mean")
        floor = max(config.min_mass, config.mass_fraction * cell_size[j])
        if mass[j] < floor:
            reasons.append(f"{COMPONENTS[j]}: posterior mass {mass[j]:.3g} < {floor:.3g}")
    return bool(reasons), "; ".join(reasons)


def iv_em(sample: IvSample, config: IvFitConfig, tau: np.ndarray, start: str = "") -> IvFitResult:
    """EM from starting posteriors; the trace is the log-likelihood per iteration."""
    model = _m_step(sample, tau, _placeholder(sample), config)
    trace = []
    converged = False
    for it in range(config.max_iterations + 1):
        joint = _joint(model, sample)
        ll_units = _logsumexp_rows(joint)
        ll = float(ll_units.sum())
        trace.append(ll)
        tau = np.exp(joint - ll_units)
        if it > 0 and abs(ll - trace[-2]) < config.rel_tolerance * abs(trace[-2]):
            converged = True
            break
        if it == config.max_iterations:
            break
        model = _m_step(sample, tau, model, config)
    fit = IvFitResult(model, trace[-1], np.array(trace), tau, len(trace) - 1, converged, start)
    flag, reason = detect_spurious_iv(fit, sample, config)
    return replace(fit, spurious=flag, spurious_reason=reason)


def _theta_plain(model: IvMixtureModel) -> np.ndarray:
    act = model.active()
    rows, cols = np.tril_indices(model.dim)
    return np.concatenate(
        [[model.pi], model.omega, model.means[act].ravel(), model.covariances[act][:, rows, cols].ravel()]
    )


def iv_fit_multistart(sample: IvSample, config: IvFitConfig = IvFitConfig()) -> List[IvFitResult]:
    """Distinct local maxima from ordered moment-share and random starts, best first.

    Raises:
        FittingFailedError: when every start degenerates.
    """
    starts = []
    try:
        mom_mixing_probs(sample)
        starts += [("mom-LL", 0), ("mom-LH", 0), ("mom-HL", 0), ("mom-HH", 0)]
    except (MonotonicityViolationError, ValueError) as exc:
        logger.debug("moment starts skipped: %s", exc)
    starts += [("random", i) for i in range(config.n_random)]
    fits, reasons = [], []
    for kind, index in starts:
        label = kind if kind != "random" else f"random-{index}"
        try:
            fits.append(iv_em(sample, config, _initial(sample, config, kind, index), label))
        except (DegenerateComponentError, SingularMatrixError) as exc:
            reasons.append(f"{label}: {exc}")
            logger.debug("start %s failed: %s", label, exc)
    if not fits:
        raise FittingFailedError("all starts failed", reasons)
    fits.sort(key=lambda f: -f.loglik)
    roots: List[IvFitResult] = []
    for fit in fits:
        theta = _theta_plain(fit.model)
        if not any(
            np.linalg.norm(theta - _theta_plain(r.model))
            < config.dedup_tolerance * np.linalg.norm(_theta_plain(r.model))
            for r in roots
        ):
            roots.append(fit)
    return roots


def omega_distance(model: IvMixtureModel, mom) -> float:
    return float(np.linalg.norm(model.omega - np.asarray(mom, dtype=float)[-3:]))


def select_ele(roots: Sequence[IvFitResult], mom) -> IvFitResult:
    """Root whose (w_a, w_n, w_c) is nearest the moment estimate; ties go to higher loglik.

    Spurious roots are candidates only when no regular root exists. ``mom``
    is the (pi, w_a, w_n, w_c) tuple of :func:`mom_mixing_probs` or just the
    omega triple.
    """
    if not roots:
        raise ValueError("no roots to choose from")
    candidates = [r for r in roots if not r.spurious] or list(roots)
    return min(candidates, key=lambda r: (round(omega_distance(r.model, mom), 12), -r.loglik))


@dataclass(frozen=True)
class IvLayout:
    """theta = (pi, w_a[, w_n], active means, active covariance lower triangles).

    With compliers, w_c = 1 - w_a - w_n; without, w_n = 1 - w_a.
    """

    dim: int
    compliers: bool = True

    @property
    def active(self) -> List[int]:
        return list(range(6)) if self.compliers else [0, 1, 2, 3]

    @property
    def n_omega(self) -> int:
        return 2 if self.compliers else 1

    @property
    def n_tril(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def size(self) -> int:
        return 1 + self.n_omega + len(self.active) * (self.dim + self.n_tril)

    def names(self) -> List[str]:
        out = ["pi", "omega_a"] + (["omega_n"] if self.compliers else [])
        out += [f"mu_{COMPONENTS[j]}_{a + 1}" for j in self.active for a in range(self.dim)]
        rows, cols = np.tril_indices(self.dim)
        out += [f"cov_{COMPONENTS[j]}_{a + 1}{b + 1}" for j in self.active for a, b in zip(rows, cols)]
        return out


def iv_pack(model: IvMixtureModel, layout: IvLayout) -> np.ndarray:
    act = layout.active
    rows, cols = np.tril_indices(layout.dim)
    return np.concatenate(
        [
            [model.pi],
            model.omega[: layout.n_omega],
            model.means[act].ravel(),
            model.covariances[act][:, rows, cols].ravel(),
        ]
    )


def iv_unpack(theta, layout: IvLayout, base: IvMixtureModel) -> IvMixtureModel:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise DimensionError(f"theta has shape {theta.shape}, layout expects {layout.size}")
    m, act = layout.dim, layout.active
    pos = 1 + layout.n_omega
    if layout.compliers:
        omega = [theta[1], theta[2], 1.0 - theta[1] - theta[2]]
    else:
        omega = [theta[1], 1.0 - theta[1], 0.0]
    means = base.means.copy()
    means[act] = theta[pos : pos + len(act) * m].reshape(len(act), m)
    pos += len(act) * m
    covs = base.covariances.copy()
    rows, cols = np.tril_indices(m)
    tri = theta[pos:].reshape(len(act), -1)
    for i, j in enumerate(act):
        covs[j][rows, cols] = tri[i]
        covs[j][cols, rows] = tri[i]
    return IvMixtureModel(theta[0], omega, means, covs)


def iv_score_rows(model: IvMixtureModel, sample: IvSample, layout: IvLayout) -> np.ndarray:
    """Per-unit score of the compliance-mixture log-likelihood; shape (n, P)."""
    x, n, m = sample.x, sample.n, sample.dim
    tau = posteriors(model, sample)
    out = np.empty((n, layout.size))
    out[:, 0] = sample.z / model.pi - (1 - sample.z) / (1.0 - model.pi)
    tg = np.stack([tau[:, _GROUP_OF == g].sum(axis=1) for g in range(3)], axis=1)
    ref = 2 if layout.compliers else 1
    for g in range(layout.n_omega):
        out[:, 1 + g] = tg[:, g] / model.omega[g] - tg[:, ref] / model.omega[ref]
    pos = 1 + layout.n_omega
    rows, cols = np.tril_indices(m)
    scale = np.where(rows == cols, 1.0, 2.0)
    cov_pos = pos + len(layout.active) * m
    for i, j in enumerate(layout.active):
        prec = np.linalg.inv(model.covariances[j])
        s = (x - model.means[j]) @ prec
        out[:, pos + i * m : pos + (i + 1) * m] = tau[:, j, None] * s
        g = 0.5 * (s[:, :, None] * s[:, None, :] - prec[None])
        t = layout.n_tril
        out[:, cov_pos + i * t : cov_pos + (i + 1) * t] = tau[:, j, None] * g[:, rows, cols] * scale
    return out


TABLE_ROWS = (
    "omega_a", "omega_n", "omega_c",
    "mu_a0", "mu_a1", "mu_a1-mu_a0",
    "mu_n0", "mu_n1", "mu_n1-mu_n0",
    "mu_c0", "mu_c1", "mu_c1-mu_c0",
    "sigma_a0", "sigma_a1", "sigma_n0", "sigma_n1", "sigma_c0", "sigma_c1",
)


@dataclass
class ReportRow:
    name: str
    estimate: float
    se: Dict[str, float]
    p_value: Optional[Dict[str, float]] = None


@dataclass
class CaceReport:
    """Estimates of the primary outcome parameters with SEs per estimator.

    Rows follow the order: stratum probabilities, then per stratum the two
    arm means and their contrast, then the six SDs. ``p_value`` is set on
    contrast rows only (two-sided normal).
    """

    rows: List[ReportRow]
    names: List[str]
    theta: np.ndarray
    variances: Dict[str, Optional[np.ndarray]]
    loglik: float
    i2_indefinite: bool = False
    hessian_asymmetry: float = 0.0

    def row(self, name: str) -> ReportRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def _gradient(layout: IvLayout, model: IvMixtureModel, name: str, coordinate: int = 0) -> np.ndarray:
    """Gradient of a reported quantity with respect to theta."""
    names = layout.names()
    grad = np.zeros(layout.size)
    if name.startswith("omega_"):
        g = name[-1]
        if g == "a":
            grad[names.index("omega_a")] = 1.0
        elif layout.compliers and g == "n":
            grad[names.index("omega_n")] = 1.0
        elif layout.compliers:
            grad[names.index("omega_a")] = grad[names.index("omega_n")] = -1.0
        elif g == "n":
            grad[names.index("omega_a")] = -1.0
        return grad
    if "-" in name:
        left, right = name.split("-")
        return _gradient(layout, model, left, coordinate) - _gradient(layout, model, right, coordinate)
    comp = name.split("_")[1]
    if name.startswith("mu_"):
        grad[names.index(f"mu_{comp}_{coordinate + 1}")] = 1.0
    else:
        c = coordinate + 1
        grad[names.index(f"cov_{comp}_{c}{c}")] = 0.5 / model.sigma(comp, coordinate)
    return grad


def _estimate(model: IvMixtureModel, name: str, coordinate: int = 0) -> float:
    if name.startswith("omega_"):
        return float(model.omega[GROUPS.index(name[-1])])
    if "-" in name:
        left, right = name.split("-")
        return _estimate(model, left, coordinate) - _estimate(model, right, coordinate)
    comp = name.split("_")[1]
    return model.mean(comp, coordinate) if name.startswith("mu_") else model.sigma(comp, coordinate)


def cace_report(root: IvFitResult, sample: IvSample, coordinate: int = 0) -> CaceReport:
    """Estimates, SEs from I1/I2/I3 and contrast p-values for one root.

    SEs of derived quantities (omega_c, SDs, arm contrasts) use the delta
    method on the full variance matrix. Complier rows are NaN when the
    root has no compliers.
    """
    model = root.model
    layout = IvLayout(model.dim, model.has_compliers)
    theta = iv_pack(model, layout)
    q = iv_score_rows(model, sample, layout)
    i1 = q.T @ q

    def total_score(t):
        return iv_score_rows(iv_unpack(t, layout, model), sample, layout).sum(axis=0)

    raw = fd_jacobian(total_score, theta)
    hess = 0.5 * (raw + raw.T)
    asym = float(np.abs(raw - raw.T).max() / max(np.abs(hess).max(), 1e-300))
    i2 = -hess
    variances: Dict[str, Optional[np.ndarray]] = {e: None for e in ESTIMATORS}
    try:
        variances["I1"] = _inverse(i1, "I1")
    except SingularMatrixError:
        pass
    indefinite = not _is_pd(i2)
    if not indefinite:
        v2 = _inverse(i2, "I2")
        v3 = v2 @ i1 @ v2
        variances["I2"], variances["I3"] = v2, 0.5 * (v3 + v3.T)
    rows = []
    for name in TABLE_ROWS:
        if not model.has_compliers and ("c0" in name or "c1" in name or name == "omega_c"):
            if name == "omega_c":
                rows.append(ReportRow(name, 0.0, {e: math.nan for e in ESTIMATORS}))
            else:
                nan = {e: math.nan for e in ESTIMATORS}
                rows.append(ReportRow(name, math.nan, nan, dict(nan) if "-" in name else None))
            continue
        est = _estimate(model, name, coordinate)
        grad = _gradient(layout, model, name, coordinate)
        se = {}
        for e, var in variances.items():
            se[e] = math.nan if var is None else math.sqrt(max(float(grad @ var @ grad), 0.0))
        pv = None
        if "-" in name:
            pv = {e: float(2.0 * norm.sf(abs(est) / s)) if s > 0 else math.nan for e, s in se.items()}
        rows.append(ReportRow(name, est, se, pv))
    return CaceReport(rows, layout.names(), theta, variances, root.loglik, indefinite, asym)


def simulate_iv(model: IvMixtureModel, n: int, rng: np.random.Generator) -> Tuple[IvSample, np.ndarray]:
    """Draw units from the compliance mixture; returns the sample and 0-based strata."""
    z = (rng.random(n) < model.pi).astype(np.int64)
    strata = rng.choice(3, size=n, p=model.omega)
    d = np.where(strata == 0, 1, np.where(strata == 1, 0, z))
    comp = 2 * strata + z
    eps = rng.standard_normal((n, model.dim))
    x = model.means[comp] + np.einsum("nij,nj->ni", model._chols[comp], eps)
    return IvSample(x, d, z), strata
