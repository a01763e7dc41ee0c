# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fitting kernels: weighted IRLS logistic regression and weighted least squares.

The pure-numpy twin lives in ``_kernels_py``; both expose the same two functions
with the same return conventions.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, log1p, fabs, sqrt

cnp.import_array()


cdef int _cholesky(double[:, ::1] h, Py_ssize_t p) noexcept nogil:
    # in-place lower Cholesky; returns 0 on success, -1 if not positive definite
    cdef Py_ssize_t i, j, k
    cdef double s, dmax = 0.0
    for i in range(p):
        if h[i, i] > dmax:
            dmax = h[i, i]
    if dmax <= 0.0:
        return -1
    for j in range(p):
        s = h[j, j]
        for k in range(j):
            s -= h[j, k] * h[j, k]
        if s <= 1e-13 * dmax:
            return -1
        h[j, j] = sqrt(s)
        for i in range(j + 1, p):
            s = h[i, j]
            for k in range(j):
                s -= h[i, k] * h[j, k]
            h[i, j] = s / h[j, j]
    return 0


cdef void _chol_solve(double[:, ::1] l, double[::1] b, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double s
    for i in range(p):
        s = b[i]
        for k in range(i):
            s -= l[i, k] * b[k]
        b[i] = s / l[i, i]
    for i in range(p - 1, -1, -1):
        s = b[i]
        for k in range(i + 1, p):
            s -= l[k, i] * b[k]
        b[i] = s / l[i, i]


cdef double _deviance(const double[:, ::1] x, const double[::1] z, const double[::1] w,
                      double[::1] beta, double[::1] eta, Py_ssize_t n, Py_ssize_t p) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef double e, dev = 0.0, pos
    for i in range(n):
        e = 0.0
        for j in range(p):
            e += x[i, j] * beta[j]
        eta[i] = e
        if w[i] == 0.0:
            continue
        pos = e if e > 0.0 else 0.0
        dev += w[i] * (log1p(exp(-fabs(e))) + pos - z[i] * e)
    return 2.0 * dev


def irls_logit(const double[:, ::1] x, const double[::1] z, const double[::1] w,
               beta0, int max_iter=100, double tol=1e-10):
    """Newton-IRLS for a weighted logistic model with step-halving on deviance.

    Stops when the score falls to ``tol`` per unit weight, or once an accepted
    update changes no coefficient by more than 1e-12 relative.
    Returns ``(beta, iterations, deviance_trace, max_abs_score_over_wsum, max_abs_eta)``.
    ``iterations`` counts accepted Newton updates.
    """
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1]
    cdef Py_ssize_t i, j, k, it, halvings
    cdef double wsum = 0.0, pr, v, r, smax, dev, dev_new, step, emax
    beta_arr = np.array(beta0, dtype=np.float64, copy=True)
    cdef double[::1] beta = beta_arr
    cdef double[::1] trial = np.empty(p)
    cdef double[::1] delta = np.empty(p)
    cdef double[::1] score = np.empty(p)
    cdef double[::1] eta = np.empty(n)
    cdef double[::1] eta_trial = np.empty(n)
    cdef double[:, ::1] h = np.empty((p, p))
    trace = []
    cdef int n_iter = 0
    cdef int failed = 0
    cdef int small = 0

    with nogil:
        for i in range(n):
            wsum += w[i]
        dev = _deviance(x, z, w, beta, eta, n, p)
    trace.append(dev)

    while True:
        with nogil:
            for j in range(p):
                score[j] = 0.0
                for k in range(p):
                    h[j, k] = 0.0
            for i in range(n):
                if w[i] == 0.0:
                    continue
                pr = 1.0 / (1.0 + exp(-eta[i]))
                r = w[i] * (z[i] - pr)
                v = w[i] * pr * (1.0 - pr)
                for j in range(p):
                    score[j] += x[i, j] * r
                    for k in range(j + 1):
                        h[j, k] += v * x[i, j] * x[i, k]
            smax = 0.0
            for j in range(p):
                if fabs(score[j]) > smax:
                    smax = fabs(score[j])
        if wsum <= 0.0 or smax / wsum <= tol or small or n_iter >= max_iter:
            break
        with nogil:
            for j in range(p):
                for k in range(j + 1, p):
                    h[j, k] = h[k, j]
            if _cholesky(h, p) != 0:
                failed = 1
            else:
                for j in range(p):
                    delta[j] = score[j]
                _chol_solve(h, delta, p)
                step = 1.0
                halvings = 0
                while True:
                    for j in range(p):
                        trial[j] = beta[j] + step * delta[j]
                    dev_new = _deviance(x, z, w, trial, eta_trial, n, p)
                    if dev_new <= dev:
                        break
                    halvings += 1
                    if halvings > 30:
                        failed = 1
                        break
                    step *= 0.5
                if not failed:
                    # score is at rounding level once updates stop moving the coefficients
                    small = 1
                    for j in range(p):
                        if fabs(trial[j] - beta[j]) > 1e-12 * (1.0 + fabs(beta[j])):
                            small = 0
                        beta[j] = trial[j]
                    for i in range(n):
                        eta[i] = eta_trial[i]
                    dev = dev_new
                    n_iter += 1
        if failed:
            break
        trace.append(dev)

    emax = 0.0
    for i in range(n):
        if w[i] != 0.0 and fabs(eta[i]) > emax:
            emax = fabs(eta[i])
    return beta_arr, n_iter, trace, (smax / wsum if wsum > 0.0 else float("inf")), emax


def wls(const double[:, ::1] x, const double[::1] y, const double[::1] w):
    """Weighted least squares via Cholesky of the normal equations plus one refinement pass.

    Returns ``beta`` or ``None`` when the cross-product matrix is not positive definite.
    """
    cdef Py_ssize_t n = x.shape[0], p = x.shape[1]
    cdef Py_ssize_t i, j, k, rep
    cdef double[:, ::1] h = np.zeros((p, p))
    cdef double[::1] rhs = np.zeros(p)
    cdef double[::1] corr = np.empty(p)
    beta_arr = np.zeros(p)
    cdef double[::1] beta = beta_arr
    cdef double r, wi
    cdef int ok
    with nogil:
        for i in range(n):
            wi = w[i]
            if wi == 0.0:
                continue
            for j in range(p):
                rhs[j] += wi * x[i, j] * y[i]
                for k in range(j + 1):
                    h[j, k] += wi * x[i, j] * x[i, k]
        for j in range(p):
            for k in range(j + 1, p):
                h[j, k] = h[k, j]
        ok = _cholesky(h, p)
        if ok == 0:
            for j in range(p):
                beta[j] = rhs[j]
            _chol_solve(h, beta, p)
            for rep in range(2):
                for j in range(p):
                    corr[j] = 0.0
                for i in range(n):
                    wi = w[i]
                    if wi == 0.0:
                        continue
                    r = y[i]
                    for j in range(p):
                        r -= x[i, j] * beta[j]
                    for j in range(p):
                        corr[j] += wi * x[i, j] * r
                _chol_solve(h, corr, p)
                for j in range(p):
                    beta[j] += corr[j]
    if ok != 0:
        return None
    return beta_arr
