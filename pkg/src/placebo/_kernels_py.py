"""Pure-numpy fitting kernels; same contract as the compiled ``_kernels`` module."""

import numpy as np


def _deviance(x, z, w, beta):
    eta = x @ beta
    dev = 2.0 * np.sum(w * (np.log1p(np.exp(-np.abs(eta))) + np.maximum(eta, 0.0) - z * eta))
    return dev, eta


def _cholesky(h):
    dmax = np.max(np.diag(h))
    if dmax <= 0.0:
        return None
    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError:
        return None
    if np.min(np.diag(chol)) ** 2 <= 1e-13 * dmax:
        return None
    return chol


def _chol_solve(chol, b):
    tmp = np.linalg.solve(chol, b)
    return np.linalg.solve(chol.T, tmp)


def irls_logit(x, z, w, beta0, max_iter=100, tol=1e-10):
    """Newton-IRLS for a weighted logistic model with step-halving on deviance.

    Stops when the score falls to ``tol`` per unit weight, or once an accepted
    update changes no coefficient by more than 1e-12 relative.

    Returns ``(beta, iterations, deviance_trace, max_abs_score_over_wsum, max_abs_eta)``.
    """
    beta = np.array(beta0, dtype=np.float64, copy=True)
    wsum = float(np.sum(w))
    dev, eta = _deviance(x, z, w, beta)
    trace = [float(dev)]
    n_iter = 0
    active = w != 0.0
    small = False
    while True:
        pr = 1.0 / (1.0 + np.exp(-eta))
        score = x.T @ (w * (z - pr))
        smax = float(np.max(np.abs(score))) if score.size else 0.0
        if wsum <= 0.0 or smax / wsum <= tol or small or n_iter >= max_iter:
            break
        hess = (x * (w * pr * (1.0 - pr))[:, None]).T @ x
        chol = _cholesky(hess)
        if chol is None:
            break
        delta = _chol_solve(chol, score)
        step = 1.0
        accepted = False
        for _ in range(31):
            trial = beta + step * delta
            dev_new, eta_new = _deviance(x, z, w, trial)
            if dev_new <= dev:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        # score is at rounding level once updates stop moving the coefficients
        small = bool(np.all(np.abs(trial - beta) <= 1e-12 * (1.0 + np.abs(beta))))
        beta, eta, dev = trial, eta_new, dev_new
        n_iter += 1
        trace.append(float(dev))
    emax = float(np.max(np.abs(eta[active]))) if np.any(active) else 0.0
    return beta, n_iter, trace, (smax / wsum if wsum > 0.0 else float("inf")), emax


def wls(x, y, w):
    """Weighted least squares via Cholesky of the normal equations plus refinement.

    Returns ``beta`` or ``None`` when the cross-product matrix is not positive definite.
    """
    xw = x * w[:, None]
    hess = xw.T @ x
    chol = _cholesky(hess)
    if chol is None:
        return None
    beta = _chol_solve(chol, xw.T @ y)
    for _ in range(2):
        beta = beta + _chol_solve(chol, xw.T @ (y - x @ beta))
    return beta
