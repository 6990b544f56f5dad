"""Gaussian mixture types, log-densities and allocation probabilities.

All densities are evaluated in log space. Component log-densities are
combined with a log-sum-exp so that well separated components (where the
raw density of the far component underflows) still give exact
responsibilities.
"""

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np

from mixturelab.errors import DimensionError, SingularMatrixError

LOG_2PI = float(np.log(2.0 * np.pi))

# smallest admissible squared Cholesky pivot relative to the largest
PIVOT_RATIO = 1e-12


def cholesky_factor(matrix, name="matrix"):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises:
        SingularMatrixError: if ``matrix`` is not positive definite or its
            smallest squared pivot is below ``PIVOT_RATIO`` times the largest.
    """
    matrix = np.asarray(matrix, dtype=float)
    try:
        chol = np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(f"{name} is not positive definite", matrix=name) from None
    pivots = np.diag(chol) ** 2
    if not np.all(np.isfinite(pivots)) or pivots.min() < PIVOT_RATIO * pivots.max():
        raise SingularMatrixError(f"{name} is numerically singular", matrix=name)
    return chol


def _as_rows(x, dim):
    """Coerce ``x`` to an (n, dim) array; flags whether it was one observation."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 0 and dim == 1:
        return x.reshape(1, 1), True
    if x.ndim == 1 and x.shape[0] == dim:
        return x.reshape(1, dim), True
    if x.ndim == 1 and dim == 1:
        return x.reshape(-1, 1), False
    if x.ndim == 2 and x.shape[1] == dim:
        return x, False
    raise DimensionError(f"expected observations of length {dim}, got shape {x.shape}")


@dataclass(frozen=True, eq=False)
class MixtureModel:
    """Finite mixture of multivariate Gaussians.

    Attributes:
        weights: shape (K,), strictly positive, summing to one.
        means: shape (K, m).
        covariances: shape (K, m, m), symmetric positive definite.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=float).reshape(-1)
        mu = np.array(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        k, m = mu.shape
        cov = np.array(self.covariances, dtype=float).reshape(k, m, m)
        if len(w) != k:
            raise DimensionError(f"{len(w)} weights for {k} components")
        if not np.all(w > 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be positive and sum to one, got {w}")
        if not np.all(np.isfinite(mu)):
            raise ValueError("component means must be finite")
        asym = np.abs(cov - cov.transpose(0, 2, 1)).reshape(k, -1).max(axis=1)
        if np.any(asym >= 1e-12):
            raise ValueError(f"covariance of component {int(np.argmax(asym))} is not symmetric")
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)
        # factorization doubles as the positive-definiteness check
        self._chol_terms

    @property
    def k(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @cached_property
    def _chol_terms(self):
        try:
            chols = np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError:
            chols = None
        if chols is not None:
            pivots = np.diagonal(chols, axis1=1, axis2=2) ** 2
            ok = np.all(np.isfinite(pivots)) and np.all(
                pivots.min(axis=1) >= PIVOT_RATIO * pivots.max(axis=1)
            )
        if chols is None or not ok:
            # locate and name the offending component
            for j in range(self.k):
                cholesky_factor(self.covariances[j], f"covariance of component {j}")
        logdets = np.log(pivots).sum(axis=1)
        return np.linalg.inv(chols), logdets

    @cached_property
    def precisions(self) -> np.ndarray:
        """Inverse covariances, shape (K, m, m)."""
        inv_factors, _ = self._chol_terms
        return np.einsum("kji,kjl->kil", inv_factors, inv_factors)

    @property
    def log_dets(self) -> np.ndarray:
        return self._chol_terms[1]

    def replace(self, weights=None, means=None, covariances=None) -> "MixtureModel":
        return MixtureModel(
            self.weights if weights is None else weights,
            self.means if means is None else means,
            self.covariances if covariances is None else covariances,
        )

    def sample(self, n: int, rng: np.random.Generator):
        """Draw ``n`` observations; returns ``(x, labels)`` with 0-based labels."""
        labels = rng.choice(self.k, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        chols = np.linalg.cholesky(self.covariances)
        x = self.means[labels] + np.einsum("nij,nj->ni", chols[labels], z)
        return x, labels


@dataclass(frozen=True, eq=False)
class Sample:
    """An n x m data matrix with optional 0-based component labels."""

    data: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim == 1:
            data = data.reshape(-1, 1)
        if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 1:
            raise DimensionError(f"sample must be n x m with n >= 2, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("sample contains non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=int).reshape(-1)
            if labels.shape[0] != data.shape[0]:
                raise DimensionError("labels and data differ in length")
            if labels.min() < 0:
                raise ValueError("labels must be non-negative component indices")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def select(self, columns: Sequence[int]) -> "Sample":
        return Sample(self.data[:, list(columns)], self.labels)


def component_log_densities(model: MixtureModel, x) -> np.ndarray:
    """log(p_k f_k(x)) for every row of ``x``; shape (n, K)."""
    rows, _ = _as_rows(x, model.dim)
    inv_factors, logdets = model._chol_terms
    out = np.empty((rows.shape[0], model.k))
    for j in range(model.k):
        z = (rows - model.means[j]) @ inv_factors[j].T
        out[:, j] = np.einsum("ij,ij->i", z, z)
    out += model.dim * LOG_2PI + logdets
    out *= -0.5
    out += np.log(model.weights)
    return out


def _logsumexp_rows(a):
    top = a.max(axis=1, keepdims=True)
    top[~np.isfinite(top)] = 0.0
    return top + np.log(np.exp(a - top).sum(axis=1, keepdims=True))


def log_density(model: MixtureModel, x):
    """log f(x) of the mixture; scalar for one observation, else shape (n,)."""
    rows, single = _as_rows(x, model.dim)
    out = _logsumexp_rows(component_log_densities(model, rows))[:, 0]
    return float(out[0]) if single else out


def loglik(model: MixtureModel, data) -> float:
    return float(log_density(model, np.asarray(data, dtype=float).reshape(-1, model.dim)).sum())


def responsibilities(model: MixtureModel, x) -> np.ndarray:
    """Allocation probabilities p_k f_k(x) / f(x); shape (K,) or (n, K)."""
    rows, single = _as_rows(x, model.dim)
    comp = component_log_densities(model, rows)
    resp = np.exp(comp - _logsumexp_rows(comp))
    return resp[0] if single else resp


@dataclass(frozen=True, eq=False)
class HomoscedasticGap:
    """Mean difference ``d`` between two components sharing covariance ``V``."""

    d: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        d = np.atleast_1d(np.array(self.d, dtype=float))
        V = np.atleast_2d(np.array(self.V, dtype=float))
        if V.shape != (d.size, d.size):
            raise DimensionError(f"gap of length {d.size} with covariance {V.shape}")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "V", V)

    @classmethod
    def bivariate(cls, d1, d2, sigma1, sigma2, rho):
        cov = rho * sigma1 * sigma2
        return cls([d1, d2], [[sigma1**2, cov], [cov, sigma2**2]])

    def solve(self, rhs):
        chol = cholesky_factor(self.V, "shared covariance V")
        y = np.linalg.solve(chol, rhs)
        return np.linalg.solve(chol.T, y)


def standardized_distance(gap: HomoscedasticGap) -> float:
    """d'V^{-1}d, the Mahalanobis separation of the two components."""
    return float(gap.d @ gap.solve(gap.d))


def discriminant_h(gap: HomoscedasticGap, x):
    """h(x) = d'V^{-1}(x - d/2), the log ratio f_2(x)/f_1(x) with mu_1 = 0."""
    rows, single = _as_rows(x, gap.d.size)
    out = (rows - gap.d / 2.0) @ gap.solve(gap.d)
    return float(out[0]) if single else out


def marginalize(model: MixtureModel, keep: Sequence[int]) -> MixtureModel:
    """Exact marginal mixture over the 0-based coordinates in ``keep``."""
    keep = [int(i) for i in keep]
    if not keep or len(set(keep)) != len(keep):
        raise DimensionError("keep must be a non-empty set of coordinates")
    if min(keep) < 0 or max(keep) >= model.dim:
        raise DimensionError(f"coordinates {keep} out of range for dimension {model.dim}")
    idx = np.ix_(range(model.k), keep, keep)
    return MixtureModel(model.weights, model.means[:, keep], model.covariances[idx])


def bivariate_covariance(sigma1, sigma2, rho) -> np.ndarray:
    cov = rho * sigma1 * sigma2
    return np.array([[sigma1**2, cov], [cov, sigma2**2]])
