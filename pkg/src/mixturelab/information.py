"""Scores, Hessians and the three information-matrix variance estimators.

Parameters are packed into a flat vector ``theta``:

* weights as K-1 log-ratios ``log(p_k / p_K)`` (only when weights are free),
* the K x m component means,
* the lower triangle of each covariance (only when covariances are free).

Standard errors for the weights are delta-method transforms of the
log-ratio variances. All three estimators are stored in variance form:
``V1 = I1^-1``, ``V2 = I2^-1`` and the sandwich ``V3 = I2^-1 I1 I2^-1``.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from mixturelab.errors import DimensionError, SingularMatrixError
from mixturelab.estimation import FitResult
from mixturelab.model import MixtureModel, Sample, responsibilities

ESTIMATORS = ("I1", "I2", "I3")


@dataclass(frozen=True)
class ParamLayout:
    """Maps blocks of ``theta`` to mixture parameters."""

    k: int
    dim: int
    weights_free: bool = True
    covariances_free: bool = True

    @property
    def n_weights(self) -> int:
        return self.k - 1 if self.weights_free else 0

    @property
    def n_means(self) -> int:
        return self.k * self.dim

    @property
    def n_tril(self) -> int:
        return self.dim * (self.dim + 1) // 2

    @property
    def n_covs(self) -> int:
        return self.k * self.n_tril if self.covariances_free else 0

    @property
    def size(self) -> int:
        return self.n_weights + self.n_means + self.n_covs

    @property
    def weight_slice(self) -> slice:
        return slice(0, self.n_weights)

    @property
    def mean_slice(self) -> slice:
        return slice(self.n_weights, self.n_weights + self.n_means)

    @property
    def cov_slice(self) -> slice:
        start = self.n_weights + self.n_means
        return slice(start, start + self.n_covs)

    def names(self) -> List[str]:
        """1-based human-readable names for every entry of theta."""
        out = [f"eta{j + 1}" for j in range(self.n_weights)]
        out += [f"mu{c + 1}_{j + 1}" for c in range(self.k) for j in range(self.dim)]
        if self.covariances_free:
            rows, cols = np.tril_indices(self.dim)
            out += [f"cov{c + 1}_{a + 1}{b + 1}" for c in range(self.k) for a, b in zip(rows, cols)]
        return out

    def index(self, name: str) -> int:
        return self.names().index(name)

    @classmethod
    def for_fit(cls, fit: FitResult) -> "ParamLayout":
        return cls(fit.model.k, fit.model.dim, not fit.weights_fixed, not fit.covariances_fixed)


def pack(model: MixtureModel, layout: ParamLayout) -> np.ndarray:
    parts = []
    if layout.weights_free:
        parts.append(np.log(model.weights[:-1]) - np.log(model.weights[-1]))
    parts.append(model.means.ravel())
    if layout.covariances_free:
        rows, cols = np.tril_indices(layout.dim)
        parts.append(model.covariances[:, rows, cols].ravel())
    return np.concatenate(parts)


def unpack(theta, layout: ParamLayout, base: MixtureModel) -> MixtureModel:
    """Inverse of :func:`pack`; fixed blocks are taken from ``base``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.size,):
        raise DimensionError(f"theta has shape {theta.shape}, layout expects {layout.size}")
    weights = base.weights
    if layout.weights_free:
        eta = np.append(theta[layout.weight_slice], 0.0)
        eta -= eta.max()
        weights = np.exp(eta) / np.exp(eta).sum()
    means = theta[layout.mean_slice].reshape(layout.k, layout.dim)
    covs = base.covariances
    if layout.covariances_free:
        rows, cols = np.tril_indices(layout.dim)
        covs = np.zeros((layout.k, layout.dim, layout.dim))
        tri = theta[layout.cov_slice].reshape(layout.k, -1)
        covs[:, rows, cols] = tri
        covs[:, cols, rows] = tri
    return MixtureModel(weights, means, covs)


def _score_rows(model: MixtureModel, x: np.ndarray, layout: ParamLayout) -> np.ndarray:
    n = x.shape[0]
    resp = responsibilities(model, x)
    prec = model.precisions
    out = np.empty((n, layout.size))
    if layout.weights_free:
        out[:, layout.weight_slice] = resp[:, :-1] - model.weights[:-1]
    # s_ik = V_k^{-1}(x_i - mu_k)
    s = np.einsum("kab,nkb->nka", prec, x[:, None, :] - model.means[None])
    out[:, layout.mean_slice] = (resp[:, :, None] * s).reshape(n, -1)
    if layout.covariances_free:
        rows, cols = np.tril_indices(layout.dim)
        g = 0.5 * (s[:, :, :, None] * s[:, :, None, :] - prec[None])
        g = g[:, :, rows, cols] * np.where(rows == cols, 1.0, 2.0)
        out[:, layout.cov_slice] = (resp[:, :, None] * g).reshape(n, -1)
    return out


def score_contributions(fit: FitResult, sample: Sample) -> np.ndarray:
    """Per-observation score d log f(x_i) / d theta at the fit; shape (n, P)."""
    if fit.model.dim != sample.dim:
        raise DimensionError("fit and sample dimensions differ")
    return _score_rows(fit.model, sample.data, ParamLayout.for_fit(fit))


def means_hessian(model: MixtureModel, x: np.ndarray) -> np.ndarray:
    """Analytic Hessian of the log-likelihood in the stacked means."""
    x = np.asarray(x, dtype=float).reshape(-1, model.dim)
    resp = responsibilities(model, x)
    prec = model.precisions
    s = np.einsum("kab,nkb->nka", prec, x[:, None, :] - model.means[None])
    u = (resp[:, :, None] * s).reshape(x.shape[0], -1)
    h = -u.T @ u
    m = model.dim
    for c in range(model.k):
        block = slice(c * m, (c + 1) * m)
        ws = resp[:, c, None] * s[:, c]
        h[block, block] += ws.T @ s[:, c] - resp[:, c].sum() * prec[c]
    return 0.5 * (h + h.T)


def fd_jacobian(func, theta, rel_step=1e-5):
    """Central-difference Jacobian with step ``rel_step * (1 + |theta_j|)``."""
    theta = np.asarray(theta, dtype=float)
    cols = []
    for j in range(theta.size):
        h = rel_step * (1.0 + abs(theta[j]))
        up, down = theta.copy(), theta.copy()
        up[j] += h
        down[j] -= h
        cols.append((np.asarray(func(up)) - np.asarray(func(down))) / (2.0 * h))
    return np.array(cols).T


@dataclass
class HessianResult:
    matrix: np.ndarray
    asymmetry: float = 0.0
    analytic: bool = True


def hessian_detail(fit: FitResult, sample: Sample) -> HessianResult:
    layout = ParamLayout.for_fit(fit)
    if not layout.weights_free and not layout.covariances_free:
        return HessianResult(means_hessian(fit.model, sample.data))
    base = fit.model
    x = sample.data

    def total_score(theta):
        return _score_rows(unpack(theta, layout, base), x, layout).sum(axis=0)

    raw = fd_jacobian(total_score, pack(base, layout))
    sym = 0.5 * (raw + raw.T)
    scale = max(np.abs(sym).max(), 1e-300)
    return HessianResult(sym, float(np.abs(raw - raw.T).max() / scale), analytic=False)


def hessian(fit: FitResult, sample: Sample) -> np.ndarray:
    """Hessian of the log-likelihood at the fit.

    Analytic when only the means are free; otherwise the symmetrized
    central-difference Jacobian of the analytic score.
    """
    return hessian_detail(fit, sample).matrix


def info_outer(fit: FitResult, sample: Sample) -> np.ndarray:
    """I1, the sum of outer products of the per-observation scores."""
    q = score_contributions(fit, sample)
    return q.T @ q


def info_hessian(fit: FitResult, sample: Sample) -> np.ndarray:
    """I2 = -Hessian."""
    return -hessian(fit, sample)


def _is_pd(a):
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        return False
    return True


def _inverse(a, name):
    if not _is_pd(a):
        raise SingularMatrixError(f"{name} is not positive definite", matrix=name)
    inv = np.linalg.inv(a)
    return 0.5 * (inv + inv.T)


def info_sandwich(fit: FitResult, sample: Sample) -> np.ndarray:
    """Sandwich variance I2^-1 I1 I2^-1.

    Raises:
        SingularMatrixError: if I2 is not positive definite.
    """
    v2 = _inverse(info_hessian(fit, sample), "I2")
    v3 = v2 @ info_outer(fit, sample) @ v2
    return 0.5 * (v3 + v3.T)


def allocation_rate(fit: FitResult, sample: Optional[Sample] = None) -> float:
    """Average over units of the largest allocation probability."""
    resp = fit.responsibilities if sample is None else responsibilities(fit.model, sample.data)
    return float(resp.max(axis=1).mean())


def labeled_allocation(fit: FitResult, sample: Sample) -> Dict[str, object]:
    """Share of units whose most probable component equals the true label.

    Labels must already be on the fit's component indexing (see
    ``estimation.align_labels``). Returns per-component and overall rates.
    """
    if sample.labels is None:
        raise ValueError("sample has no labels")
    resp = responsibilities(fit.model, sample.data)
    hit = resp.argmax(axis=1) == sample.labels
    per = []
    for c in range(fit.model.k):
        mask = sample.labels == c
        per.append(float(hit[mask].mean()) if mask.any() else float("nan"))
    return {"per_component": per, "overall": float(hit.mean())}


def weight_jacobian(model: MixtureModel) -> np.ndarray:
    """d p / d eta for the log-ratio weight parameters; shape (K, K-1)."""
    p = model.weights
    jac = -np.outer(p, p[:-1])
    jac[np.arange(model.k - 1), np.arange(model.k - 1)] += p[:-1]
    return jac


@dataclass
class InfoReport:
    """Information matrices, variance estimates and standard errors.

    ``variances`` maps "I1"/"I2"/"I3" to a P x P variance matrix, or None
    when the estimator is unavailable (singular I1, or I2 not positive
    definite, in which case I2 and I3 are withheld and ``i2_indefinite`` is
    set). ``se`` holds the theta-scale standard errors and ``weight_se`` the
    delta-method standard errors of the mixing weights.
    """

    names: List[str]
    theta: np.ndarray
    i1: np.ndarray
    i2: np.ndarray
    variances: Dict[str, Optional[np.ndarray]]
    se: Dict[str, Optional[np.ndarray]]
    weight_se: Dict[str, Optional[np.ndarray]]
    allocation_rate: float
    i2_indefinite: bool = False
    hessian_asymmetry: float = 0.0

    def se_of(self, name: str, estimator: str = "I1") -> float:
        se = self.se[estimator]
        return float("nan") if se is None else float(se[self.names.index(name)])


def information(fit: FitResult, sample: Sample) -> InfoReport:
    layout = ParamLayout.for_fit(fit)
    q = score_contributions(fit, sample)
    i1 = q.T @ q
    hess = hessian_detail(fit, sample)
    i2 = -hess.matrix
    variances: Dict[str, Optional[np.ndarray]] = {e: None for e in ESTIMATORS}
    try:
        variances["I1"] = _inverse(i1, "I1")
    except SingularMatrixError:
        pass
    indefinite = not _is_pd(i2)
    if not indefinite:
        v2 = _inverse(i2, "I2")
        v3 = v2 @ i1 @ v2
        variances["I2"] = v2
        variances["I3"] = 0.5 * (v3 + v3.T)
    se, weight_se = {}, {}
    wj = weight_jacobian(fit.model) if layout.weights_free else None
    for est, var in variances.items():
        if var is None:
            se[est] = weight_se[est] = None
            continue
        se[est] = np.sqrt(np.clip(np.diag(var), 0.0, None))
        if wj is not None:
            wv = wj @ var[layout.weight_slice, layout.weight_slice] @ wj.T
            weight_se[est] = np.sqrt(np.clip(np.diag(wv), 0.0, None))
        else:
            weight_se[est] = np.zeros(fit.model.k)
    return InfoReport(
        names=layout.names(),
        theta=pack(fit.model, layout),
        i1=i1,
        i2=i2,
        variances=variances,
        se=se,
        weight_se=weight_se,
        allocation_rate=allocation_rate(fit),
        i2_indefinite=indefinite,
        hessian_asymmetry=hess.asymmetry,
    )


def mean_se(fit: FitResult, sample: Sample, component: int = 0, coordinate: int = 0) -> Dict[str, float]:
    """Standard errors of one component mean under each estimator (fast path)."""
    rep = information(fit, sample)
    name = f"mu{component + 1}_{coordinate + 1}"
    return {e: rep.se_of(name, e) for e in ESTIMATORS}
