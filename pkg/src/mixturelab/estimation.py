"""EM fitting of Gaussian mixtures, multi-start root search and spurious roots.

A fit can hold the weights and/or the covariances fixed at given values
(the known-``p``-and-``V`` setting) while the means are always estimated.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from mixturelab import _kernels
from mixturelab.errors import (
    DegenerateComponentError,
    DimensionError,
    FittingFailedError,
    SingularMatrixError,
)
from mixturelab.model import PIVOT_RATIO, MixtureModel, Sample, responsibilities

logger = logging.getLogger(__name__)

START_KINDS = ("explicit", "quantile", "random")


@dataclass(frozen=True)
class StartSpec:
    """How to initialise one EM run.

    ``explicit`` uses ``model`` as given; ``quantile`` sorts the sample on
    ``coordinate`` and uses the moments of K equal blocks; ``random`` draws
    Dirichlet(1, ..., 1) responsibilities from the start's own RNG stream.
    """

    kind: str = "quantile"
    model: Optional[MixtureModel] = None
    coordinate: int = 0

    def __post_init__(self):
        if self.kind not in START_KINDS:
            raise ValueError(f"unknown start kind {self.kind!r}")
        if self.kind == "explicit" and self.model is None:
            raise ValueError("explicit start requires a model")


@dataclass(frozen=True)
class FitConfig:
    k: int = 2
    fix_weights: Optional[np.ndarray] = None
    fix_covariances: Optional[np.ndarray] = None
    max_iterations: int = 1000
    rel_tolerance: float = 1e-8
    starts: Tuple[StartSpec, ...] = (StartSpec("quantile"),)
    seed: int = 0
    det_ratio: float = 1e-3
    mass_fraction: float = 0.02
    min_mass: float = 2.0
    dedup_tolerance: float = 1e-4
    ridge: float = 1e-10

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if not self.rel_tolerance > 0 or self.max_iterations < 1:
            raise ValueError("rel_tolerance must be > 0 and max_iterations >= 1")
        if self.fix_weights is not None:
            w = np.asarray(self.fix_weights, dtype=float)
            if w.shape != (self.k,) or np.any(w <= 0) or abs(w.sum() - 1) > 1e-12:
                raise ValueError(f"fixed weights must be {self.k} positive numbers summing to one")
            object.__setattr__(self, "fix_weights", w)
        if self.fix_covariances is not None:
            c = np.asarray(self.fix_covariances, dtype=float)
            if c.ndim != 3 or c.shape[0] != self.k:
                raise ValueError("fixed covariances must have shape (k, m, m)")
            object.__setattr__(self, "fix_covariances", c)
        object.__setattr__(self, "starts", tuple(self.starts))


@dataclass(frozen=True, eq=False)
class FitResult:
    model: MixtureModel
    loglik: float
    loglik_trace: np.ndarray
    responsibilities: np.ndarray
    iterations: int
    converged: bool
    spurious: bool = False
    spurious_reason: str = ""
    weights_fixed: bool = False
    covariances_fixed: bool = False
    start_index: int = 0


def _rng(seed, *path):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), *path]))


def _check_dims(model, sample):
    if model.dim != sample.dim:
        raise DimensionError(f"model dimension {model.dim} != sample dimension {sample.dim}")


def _moments_from_resp(x, resp, config, prior_weights=None, prior_covs=None):
    """Closed-form M-step given a responsibility matrix."""
    n, m = x.shape
    mass = resp.sum(axis=0)
    low = np.flatnonzero(mass < 1e-10 * n)
    if low.size:
        raise DegenerateComponentError(
            f"component {int(low[0])} has responsibility mass {mass[low[0]]:.3g}",
            component=int(low[0]),
        )
    if config.fix_weights is not None:
        weights = config.fix_weights
    elif prior_weights is not None:
        weights = prior_weights
    else:
        weights = mass / n
    means = (resp.T @ x) / mass[:, None]
    if config.fix_covariances is not None:
        covs = config.fix_covariances
    elif prior_covs is not None:
        covs = prior_covs
    else:
        covs = np.empty((len(mass), m, m))
        for j in range(len(mass)):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / mass[j]
            covs[j] = 0.5 * (covs[j] + covs[j].T)
            covs[j] += np.eye(m) * (config.ridge * np.trace(covs[j]) / m)
    return MixtureModel(weights, means, covs)


def em_step(model: MixtureModel, sample: Sample, config: FitConfig) -> MixtureModel:
    """One EM update; fixed weight/covariance blocks pass through unchanged.

    Raises:
        DegenerateComponentError: a component's responsibility mass fell
            below 1e-10 * n.
    """
    _check_dims(model, sample)
    resp = responsibilities(model, sample.data)
    return _moments_from_resp(
        sample.data,
        resp,
        config,
        prior_weights=model.weights if config.fix_weights is not None else None,
        prior_covs=model.covariances if config.fix_covariances is not None else None,
    )


def initial_model(sample: Sample, config: FitConfig, start: StartSpec, start_index: int = 0):
    """Starting parameters for one EM run, honouring fixed blocks."""
    x = sample.data
    n = sample.n
    if start.kind == "explicit":
        model = start.model
        _check_dims(model, sample)
        if model.k != config.k:
            raise DimensionError(f"start has {model.k} components, config asks for {config.k}")
        return model.replace(
            weights=config.fix_weights, covariances=config.fix_covariances
        )
    if start.kind == "quantile":
        if not 0 <= start.coordinate < sample.dim:
            raise DimensionError(f"quantile start on coordinate {start.coordinate}")
        order = np.argsort(x[:, start.coordinate], kind="stable")
        resp = np.zeros((n, config.k))
        for j, block in enumerate(np.array_split(order, config.k)):
            resp[block, j] = 1.0
    else:
        rng = _rng(config.seed, 1, start_index)
        resp = rng.dirichlet(np.ones(config.k), size=n)
    return _moments_from_resp(x, resp, config)


def em_fit(
    sample: Sample, config: FitConfig, start: Optional[StartSpec] = None, start_index: int = 0
) -> FitResult:
    """Iterate EM to a relative log-likelihood change below ``rel_tolerance``.

    Raises:
        DegenerateComponentError: with ``iteration`` set, when a component
            collapses during the iterations.
    """
    if start is None:
        start = config.starts[start_index] if config.starts else StartSpec("quantile")
    init = initial_model(sample, config, start, start_index)
    w, mu, cov, trace, resp, iters, status, bad = _kernels.em_loop(
        np.ascontiguousarray(sample.data),
        init.weights.copy(),
        init.means.copy(),
        init.covariances.copy(),
        config.fix_weights is None,
        config.fix_covariances is None,
        int(config.max_iterations),
        float(config.rel_tolerance),
        float(config.ridge),
        PIVOT_RATIO,
    )
    if status in (_kernels.DEGENERATE, _kernels.SINGULAR):
        what = "lost its responsibility mass" if status == _kernels.DEGENERATE else "became singular"
        raise DegenerateComponentError(
            f"component {bad} {what} at iteration {iters}", component=int(bad), iteration=int(iters)
        )
    if config.fix_weights is not None:
        w = config.fix_weights
    else:
        w = w / w.sum()
    if config.fix_covariances is not None:
        cov = config.fix_covariances
    model = MixtureModel(w, mu, cov)
    fit = FitResult(
        model=model,
        loglik=float(trace[-1]),
        loglik_trace=trace.copy(),
        responsibilities=resp.copy(),
        iterations=int(iters),
        converged=status == _kernels.CONVERGED,
        weights_fixed=config.fix_weights is not None,
        covariances_fixed=config.fix_covariances is not None,
        start_index=start_index,
    )
    flag, reason = detect_spurious(fit, sample, config)
    return replace(fit, spurious=flag, spurious_reason=reason)


def detect_spurious(fit: FitResult, sample: Sample, config: Optional[FitConfig] = None):
    """Flag roots where a component collapsed.

    A component is spurious when its generalized variance is below
    ``det_ratio`` times the geometric mean over components, or when it
    carries less than ``max(min_mass, mass_fraction * n)`` units of
    responsibility. Returns ``(flag, reason)``.
    """
    config = config or FitConfig(k=fit.model.k)
    reasons = []
    model = fit.model
    logdets = model.log_dets
    if model.k > 1 and not fit.covariances_fixed:
        geo = logdets.mean()
        for j in np.flatnonzero(logdets < np.log(config.det_ratio) + geo):
            ratio = np.exp(logdets[j] - geo)
            reasons.append(f"component {j + 1}: |V| is {ratio:.3g} x geometric mean (a)")
    mass = fit.responsibilities.sum(axis=0)
    floor = max(config.min_mass, config.mass_fraction * sample.n)
    for j in np.flatnonzero(mass < floor):
        reasons.append(f"component {j + 1}: responsibility mass {mass[j]:.3g} < {floor:g} (b)")
    return bool(reasons), "; ".join(reasons)


def parameter_vector(model: MixtureModel) -> np.ndarray:
    return np.concatenate([model.weights, model.means.ravel(), model.covariances.ravel()])


def permute(fit: FitResult, perm: Sequence[int]) -> FitResult:
    """Relabel so that new component j is old component ``perm[j]``."""
    perm = list(perm)
    m = fit.model
    model = MixtureModel(m.weights[perm], m.means[perm], m.covariances[perm])
    return replace(fit, model=model, responsibilities=fit.responsibilities[:, perm])


def best_permutation(means: np.ndarray, reference: np.ndarray) -> Tuple[int, ...]:
    k = means.shape[0]
    best, best_key = None, None
    for perm in itertools.permutations(range(k)):
        cost = float(((means[list(perm)] - reference) ** 2).sum())
        # ties resolved towards ascending first-coordinate means
        key = (round(cost, 12), tuple(means[list(perm), 0]))
        if best_key is None or key < best_key:
            best, best_key = perm, key
    return best


def align_labels(fit: FitResult, reference: MixtureModel) -> FitResult:
    """Permute components to minimise squared mean distance to ``reference``."""
    if reference.k != fit.model.k or reference.dim != fit.model.dim:
        raise DimensionError("reference must match the fit in K and m")
    perm = best_permutation(fit.model.means, reference.means)
    if list(perm) == list(range(fit.model.k)):
        return fit
    return permute(fit, perm)


def default_starts(sample: Sample, k: int, n_random: int = 0) -> Tuple[StartSpec, ...]:
    """Quantile splits on every coordinate plus ``n_random`` random starts."""
    starts = [StartSpec("quantile", coordinate=j) for j in range(sample.dim)]
    starts += [StartSpec("random")] * n_random
    return tuple(starts)


def multi_start_fit(sample: Sample, config: FitConfig) -> List[FitResult]:
    """Run every configured start and return the distinct roots, best first.

    Two roots are merged when their parameter vectors, after label alignment,
    differ by less than ``dedup_tolerance`` in relative norm.

    Raises:
        FittingFailedError: when every start degenerates.
    """
    if not config.starts:
        raise ValueError("at least one start is required")
    fits, reasons = [], []
    for index, start in enumerate(config.starts):
        try:
            fits.append(em_fit(sample, config, start, index))
        except (DegenerateComponentError, SingularMatrixError) as exc:
            reasons.append(f"start {index} ({start.kind}): {exc}")
            logger.debug("start %d failed: %s", index, exc)
    if not fits:
        raise FittingFailedError("all starts failed", reasons)
    fits.sort(key=lambda f: (-f.loglik, f.start_index))
    roots: List[FitResult] = []
    for fit in fits:
        if roots:
            fit = align_labels(fit, roots[0].model)
        theta = parameter_vector(fit.model)
        duplicate = False
        for root in roots:
            ref = parameter_vector(root.model)
            if np.linalg.norm(theta - ref) < config.dedup_tolerance * max(np.linalg.norm(ref), 1e-300):
                duplicate = True
                break
        if not duplicate:
            roots.append(fit)
    return roots


def best_root(roots: Sequence[FitResult]) -> Optional[FitResult]:
    """Highest-likelihood non-spurious root, or None."""
    regular = [r for r in roots if not r.spurious]
    return max(regular, key=lambda r: r.loglik) if regular else None
