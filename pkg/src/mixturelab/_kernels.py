"""Compiled EM inner loop.

Mirrors ``estimation.em_step`` arithmetic exactly; ``em_fit`` runs here
because the Monte Carlo studies fit tens of thousands of small samples on a
single core and numpy call overhead dominates at n = 500.
"""

import numba
import numpy as np

RUNNING, CONVERGED, MAX_ITER, DEGENERATE, SINGULAR = 0, 1, 2, 3, 4


@numba.njit(cache=True)
def _cholesky(a, out, pivot_ratio):
    m = a.shape[0]
    out[:, :] = 0.0
    for j in range(m):
        s = a[j, j]
        for q in range(j):
            s -= out[j, q] * out[j, q]
        if not s > 0.0:
            return False
        out[j, j] = np.sqrt(s)
        for i in range(j + 1, m):
            t = a[i, j]
            for q in range(j):
                t -= out[i, q] * out[j, q]
            out[i, j] = t / out[j, j]
    lo = out[0, 0] ** 2
    hi = lo
    for j in range(1, m):
        p = out[j, j] ** 2
        lo = min(lo, p)
        hi = max(hi, p)
    return lo >= pivot_ratio * hi


@numba.njit(cache=True)
def em_loop(x, weights, means, covs, free_w, free_cov, max_iter, rel_tol, ridge, pivot_ratio):
    n, m = x.shape
    k = weights.shape[0]
    w = weights.copy()
    mu = means.copy()
    cov = covs.copy()
    trace = np.empty(max_iter + 1)
    resp = np.empty((n, k))
    chol = np.empty((k, m, m))
    logdet = np.empty(k)
    z = np.empty(m)
    const = np.empty(k)
    mass = np.empty(k)
    two_pi = np.log(2.0 * np.pi)
    it = 0
    prev = 0.0
    status = RUNNING
    bad = -1
    while True:
        for c in range(k):
            if not _cholesky(cov[c], chol[c], pivot_ratio):
                return w, mu, cov, trace[:it], resp, it, SINGULAR, c
            s = 0.0
            for j in range(m):
                s += np.log(chol[c, j, j])
            logdet[c] = 2.0 * s
            const[c] = np.log(w[c]) - 0.5 * (m * two_pi + logdet[c])
        total = 0.0
        for i in range(n):
            top = -np.inf
            for c in range(k):
                for j in range(m):
                    t = x[i, j] - mu[c, j]
                    for q in range(j):
                        t -= chol[c, j, q] * z[q]
                    z[j] = t / chol[c, j, j]
                maha = 0.0
                for j in range(m):
                    maha += z[j] * z[j]
                v = const[c] - 0.5 * maha
                resp[i, c] = v
                if v > top:
                    top = v
            acc = 0.0
            for c in range(k):
                e = np.exp(resp[i, c] - top)
                resp[i, c] = e
                acc += e
            total += top + np.log(acc)
            for c in range(k):
                resp[i, c] /= acc
        trace[it] = total
        if it > 0 and abs(total - prev) < rel_tol * abs(prev):
            status = CONVERGED
            break
        if it == max_iter:
            status = MAX_ITER
            break
        for c in range(k):
            s = 0.0
            for i in range(n):
                s += resp[i, c]
            mass[c] = s
            if s < 1e-10 * n:
                return w, mu, cov, trace[: it + 1], resp, it, DEGENERATE, c
        if free_w:
            for c in range(k):
                w[c] = mass[c] / n
        for c in range(k):
            for j in range(m):
                s = 0.0
                for i in range(n):
                    s += resp[i, c] * x[i, j]
                mu[c, j] = s / mass[c]
        if free_cov:
            for c in range(k):
                for a in range(m):
                    for b in range(a + 1):
                        s = 0.0
                        for i in range(n):
                            s += resp[i, c] * (x[i, a] - mu[c, a]) * (x[i, b] - mu[c, b])
                        cov[c, a, b] = s / mass[c]
                        cov[c, b, a] = cov[c, a, b]
                tr = 0.0
                for a in range(m):
                    tr += cov[c, a, a]
                for a in range(m):
                    cov[c, a, a] += ridge * tr / m
        prev = total
        it += 1
    return w, mu, cov, trace[: it + 1], resp, it, status, bad
