"""Closed-form and quadrature oracles for two-component Gaussian mixtures.

Covers the minimisers of the standardized distance, the correct-allocation
probability, its limits along growing ``d2`` or ``rho``, and the limiting
per-observation information numbers for the primary-variable mean in the
univariate (``I``) and bivariate (``II``) model.

``I`` and ``II`` use un-normalized Gaussian kernels: no 1/sqrt(2 pi) sigma
factors. Under that convention ``II = sqrt(2 pi) sigma2 * I`` when
``d2 = 0``. The normalized per-observation information numbers are
``I / (sqrt(2 pi) sigma1)`` and ``II / (2 pi sigma1 sigma2)``; their ratio is
``II / (sqrt(2 pi) sigma2 I)``, reported as ``normalized_ratio``.
"""

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize
from scipy.special import ndtr

from mixturelab.errors import QuadratureError
from mixturelab.model import (
    HomoscedasticGap,
    MixtureModel,
    bivariate_covariance,
    responsibilities,
    standardized_distance,
)

SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TheoryScenario:
    """Two-component bivariate scenario with mu_1 = (0, 0), mu_2 = (d1, d2).

    Homoscedastic by default (SDs ``sigma1``, ``sigma2`` and correlation
    ``rho`` shared). Setting ``sigma1_k2``/``sigma2_k2`` gives component 2
    its own SDs, which is only allowed with ``rho == 0``.
    """

    p: float = 0.4
    d1: float = 1.0
    d2: float = 0.0
    sigma1: float = 1.0
    sigma2: float = 1.0
    rho: float = 0.0
    sigma1_k2: Optional[float] = None
    sigma2_k2: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        sds = [self.sigma1, self.sigma2, self.sigma1_k2 or 1.0, self.sigma2_k2 or 1.0]
        if min(sds) <= 0:
            raise ValueError("standard deviations must be positive")
        if not abs(self.rho) < 1.0:
            raise ValueError("|rho| must be below 1")
        if not self.homoscedastic and self.rho != 0.0:
            raise ValueError("component-specific SDs require rho == 0")

    @property
    def homoscedastic(self) -> bool:
        return self.sigma1_k2 is None and self.sigma2_k2 is None

    def gap(self) -> HomoscedasticGap:
        if not self.homoscedastic:
            raise ValueError("gap is defined for homoscedastic scenarios only")
        return HomoscedasticGap.bivariate(self.d1, self.d2, self.sigma1, self.sigma2, self.rho)

    def model(self) -> MixtureModel:
        v1 = bivariate_covariance(self.sigma1, self.sigma2, self.rho)
        v2 = bivariate_covariance(
            self.sigma1_k2 or self.sigma1, self.sigma2_k2 or self.sigma2, self.rho
        )
        return MixtureModel([self.p, 1 - self.p], [[0.0, 0.0], [self.d1, self.d2]], [v1, v2])


def argmin_d2(d1, sigma1, sigma2, rho) -> Tuple[float, float]:
    """Minimiser over d2 of d'V^{-1}d and the minimum, ``(rho d1 s2 / s1, d1^2 / s1^2)``."""
    return rho * d1 * sigma2 / sigma1, d1**2 / sigma1**2


@dataclass(frozen=True)
class RhoCandidate:
    rho: float
    min_value: float
    feasible: bool


def argmin_rho(d1, d2, sigma1, sigma2) -> List[RhoCandidate]:
    """The two stationary correlations of d'V^{-1}d for fixed gaps and SDs.

    Only a candidate with ``|rho| < 1`` is attainable; at most one is.
    """
    if d1 == 0 or d2 == 0:
        raise ValueError("argmin over rho requires non-zero d1 and d2")
    first = d2 * sigma1 / (d1 * sigma2)
    second = d1 * sigma2 / (d2 * sigma1)
    return [
        RhoCandidate(first, d1**2 / sigma1**2, abs(first) < 1.0),
        RhoCandidate(second, d2**2 / sigma2**2, abs(second) < 1.0),
    ]


def _stationary_point(func, lo, hi, n_grid=41):
    """Minimiser of a smooth unimodal ``func`` on (lo, hi).

    Grid scan to bracket the minimum, then Brent's root finder on the
    central-difference derivative.
    """
    grid = np.linspace(lo, hi, n_grid)
    values = np.array([func(v) for v in grid])
    j = int(np.argmin(values))
    a, b = grid[max(j - 1, 0)], grid[min(j + 1, n_grid - 1)]
    step = 1e-6 * (hi - lo)

    def slope(v):
        return (func(v + step) - func(v - step)) / (2.0 * step)

    if slope(a) * slope(b) > 0:
        return float(grid[j])
    return float(optimize.brentq(slope, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps))


def numeric_argmin_d2(d1, sigma1, sigma2, rho, bound=50.0) -> Tuple[float, float]:
    """Numerical minimiser of d'V^{-1}d over d2 in [-bound, bound]."""
    def dist(d2):
        return standardized_distance(HomoscedasticGap.bivariate(d1, d2, sigma1, sigma2, rho))

    arg = _stationary_point(dist, -bound, bound)
    return arg, dist(arg)


def numeric_argmin_rho(d1, d2, sigma1, sigma2, bound=0.999) -> Tuple[float, float]:
    """Numerical minimiser of d'V^{-1}d over rho in [-bound, bound]."""
    def dist(rho):
        return standardized_distance(HomoscedasticGap.bivariate(d1, d2, sigma1, sigma2, rho))

    arg = _stationary_point(dist, -bound, bound)
    return arg, dist(arg)


def correct_allocation_probability(scenario: TheoryScenario) -> float:
    """Pr(k = 1 | h(x) < 0) for the homoscedastic scenario."""
    delta = standardized_distance(scenario.gap())
    phi = float(ndtr(math.sqrt(delta) / 2.0))
    p = scenario.p
    return 1.0 / (1.0 + (1.0 - p) / p * (1.0 / phi - 1.0))


def expected_correct_allocation(scenario: TheoryScenario) -> float:
    """E[c f_k(x) / f(x) | x from k], averaged over k, by quadrature over h.

    Under component 1, h ~ N(-D/2, D) and the true-component probability is
    1 / (1 + (1-p)/p e^h); under component 2 the mirror image holds.
    """
    p = scenario.p
    delta = standardized_distance(scenario.gap())
    if delta == 0.0:
        return p * p + (1 - p) * (1 - p)
    sd = math.sqrt(delta)
    log_odds = math.log((1 - p) / p)

    def part(sign, log_r):
        def f(u):
            h = sign * delta / 2.0 + sd * u
            return math.exp(-0.5 * u * u) / SQRT_2PI / (1.0 + math.exp(min(-sign * h + log_r, 700.0)))

        return integrate.quad(f, -12.0, 12.0, epsabs=1e-12, epsrel=1e-12, limit=200)[0]

    # component 1: h centred at -D/2, odds (1-p)/p e^h
    first = part(-1, log_odds)
    # component 2: responsibility 1/(1 + p/(1-p) e^{-h}), h centred at +D/2
    second = part(1, -log_odds)
    return min(1.0, p * first + (1 - p) * second)


@dataclass
class AllocationLimitTable:
    path: str
    levels: List[float]
    estimates: List[float]
    mc_se: List[float]
    nondecreasing: bool


def allocation_limit_check(
    scenario: TheoryScenario,
    path: str,
    levels: Sequence[float],
    n_draws: int = 1_000_000,
    seed: int = 20240101,
) -> AllocationLimitTable:
    """Monte Carlo mean of the true-component responsibility along a path.

    ``path`` is "d2" or "rho"; each level replaces that scenario field. The
    same draws are reused at every level, so successive differences are
    judged against the standard error of the paired difference.
    """
    if path not in ("d2", "rho"):
        raise ValueError("path must be 'd2' or 'rho'")
    levels = [float(v) for v in levels]
    if any(b < a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be non-decreasing")
    rng = np.random.default_rng(seed)
    labels = (rng.random(n_draws) >= scenario.p).astype(int)
    z = rng.standard_normal((n_draws, 2))
    per_level = []
    for level in levels:
        sc = replace(scenario, **{path: level})
        model = sc.model()
        chol = np.linalg.cholesky(model.covariances)
        x = model.means[labels] + np.einsum("nij,nj->ni", chol[labels], z)
        resp = responsibilities(model, x)
        per_level.append(resp[np.arange(n_draws), labels])
    estimates = [float(v.mean()) for v in per_level]
    mc_se = [float(v.std(ddof=1) / math.sqrt(n_draws)) for v in per_level]
    ok = True
    for a, b in zip(per_level, per_level[1:]):
        diff = b - a
        se = diff.std(ddof=1) / math.sqrt(n_draws)
        if diff.mean() < -3.0 * se - 1e-15:
            ok = False
    return AllocationLimitTable(path, levels, estimates, mc_se, ok)


@dataclass(frozen=True)
class QuadraticInterval:
    """log h(x2) = a x2^2 + b x2 + c with roots ``x_inf <= x_sup``."""

    a: float
    b: float
    c: float
    x_inf: float
    x_sup: float


def allocation_interval(d2, sigma_own, sigma_other) -> QuadraticInterval:
    """Region where the second-variable likelihood ratio h(x2) is below 1.

    The unit's own component has x2 ~ N(0, sigma_own^2); the other has mean
    ``d2`` and SD ``sigma_other``. For ``sigma_own < sigma_other`` (a > 0)
    h < 1 between the roots, otherwise outside them. Without real roots
    (possible only for a < 0) both roots are NaN and h < 1 everywhere.
    """
    so2, sk2 = sigma_own**2, sigma_other**2
    a = (sk2 - so2) / (2.0 * sk2 * so2)
    b = d2 / sk2
    c = 0.5 * math.log(so2 / sk2) - d2**2 / (2.0 * sk2)
    if a == 0.0:
        root = -c / b if b else math.nan
        return QuadraticInterval(a, b, c, root, root)
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return QuadraticInterval(a, b, c, math.nan, math.nan)
    r1 = (-b - math.sqrt(disc)) / (2.0 * a)
    r2 = (-b + math.sqrt(disc)) / (2.0 * a)
    return QuadraticInterval(a, b, c, min(r1, r2), max(r1, r2))


def _quad(f, lo, hi, tol, what):
    val, err = integrate.quad(f, lo, hi, epsabs=tol, epsrel=0.0, limit=400)
    if not err <= tol:
        raise QuadratureError(f"{what}: achieved error {err:.3g} above tolerance {tol:.3g}")
    return val, err


def _inner(d1, sigma1, p, offset, tol):
    """x1 integral of (x^2/s^4) e^{-x^2/2s^2} / {p + (1-p) e^{-d^2/2s^2 + x d/s^2 + offset}}."""
    s2 = sigma1 * sigma1
    s4 = s2 * s2
    shift = -d1 * d1 / (2.0 * s2) + offset + (math.log1p(-p) - math.log(p) if p < 1.0 else -math.inf)
    half = 10.0 * sigma1 + abs(d1)

    def f(x):
        u = shift + x * d1 / s2
        # 1/{p(1 + e^u)} without overflow
        tail = 1.0 / (1.0 + math.exp(u)) if u < 0 else math.exp(-u) / (1.0 + math.exp(-u))
        return x * x / s4 * math.exp(-x * x / (2.0 * s2)) * tail / p

    return _quad(f, -half, half, tol, "univariate information integral")[0]


def info_integral_univariate(d1, sigma1, p, tol=1e-10) -> float:
    """Limiting information number I for mu_11 in the univariate model (p in (0, 1])."""
    if sigma1 <= 0 or not 0.0 < p <= 1.0:
        raise ValueError("need sigma1 > 0 and p in (0, 1]")
    return _inner(d1, sigma1, p, 0.0, tol)


def info_integral_bivariate(d1, d2, sigma1, sigma2, p, tol=1e-8) -> float:
    """Limiting information number II for mu_11 in the bivariate rho = 0 model.

    Evaluated as the x2 integral of e^{-x2^2/2 s2^2} times the x1 integral,
    with the x2 likelihood ratio folded into the inner denominator.
    """
    if sigma1 <= 0 or sigma2 <= 0 or not 0.0 < p <= 1.0:
        raise ValueError("need positive SDs and p in (0, 1]")
    s22 = sigma2 * sigma2
    half = 10.0 * sigma2 + abs(d2)
    inner_tol = tol / (10.0 * SQRT_2PI * sigma2)

    def g(x2):
        offset = -d2 * d2 / (2.0 * s22) + x2 * d2 / s22
        return math.exp(-x2 * x2 / (2.0 * s22)) * _inner(d1, sigma1, p, offset, inner_tol)

    return _quad(g, -half, half, tol, "bivariate information integral")[0]


@dataclass
class DominanceRow:
    d1: float
    d2: float
    sigma1: float
    sigma2: float
    p: float
    info_univariate: float
    info_bivariate: float
    bound: float
    margin: float
    normalized_ratio: float

    @property
    def exceeds_bound(self) -> bool:
        return self.info_bivariate > self.bound

    @property
    def literal_dominance(self) -> bool:
        return self.info_bivariate > self.info_univariate


def dominance_table(scenarios: Sequence[Tuple[float, float, float, float, float]], tol=1e-8):
    """Compare II with the sqrt(2 pi) sigma2 / 2 * I bound on a grid.

    Each scenario is ``(d1, d2, sigma1, sigma2, p)``. ``margin`` is
    ``II - bound``; ``normalized_ratio`` is ``II / (sqrt(2 pi) sigma2 I)``,
    the bivariate-to-univariate ratio of normalized information numbers,
    which equals 1 at d2 = 0.
    """
    rows = []
    for d1, d2, sigma1, sigma2, p in scenarios:
        one = info_integral_univariate(d1, sigma1, p, tol=min(tol, 1e-10))
        two = info_integral_bivariate(d1, d2, sigma1, sigma2, p, tol=tol)
        bound = SQRT_2PI * sigma2 / 2.0 * one
        rows.append(
            DominanceRow(d1, d2, sigma1, sigma2, p, one, two, bound, two - bound,
                         two / (SQRT_2PI * sigma2 * one))
        )
    return rows


def sigma2_sweep(d1, d2, sigma1, p, sigma2_levels, tol=1e-8):
    """II and its normalized form along increasing ``sigma2``.

    Returns ``(literal, normalized)`` lists, normalized = II / (sqrt(2 pi) sigma2).
    """
    literal = [info_integral_bivariate(d1, d2, sigma1, s, p, tol=tol) for s in sigma2_levels]
    normalized = [v / (SQRT_2PI * s) for v, s in zip(literal, sigma2_levels)]
    return literal, normalized


def is_decreasing(values, strict=True, slack=0.0) -> bool:
    pairs = list(zip(values, values[1:]))
    if strict:
        return all(b < a - slack for a, b in pairs)
    return all(b <= a + slack for a, b in pairs)
