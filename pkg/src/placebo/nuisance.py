"""Nuisance models: outcome regression and the two propensity models."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from placebo import kernels
from placebo.data import Dataset
from placebo.design import DesignSpec, build_matrix, design_matrix

MAX_ITER = 100
SCORE_TOL = 1e-8
# |linear predictor| beyond this means fitted probabilities are numerically 0 or 1
SEPARATION_ETA = 30.0


class FitError(ValueError):
    """A nuisance fit failed (rank deficiency or non-convergence)."""


class RankError(FitError):
    def __init__(self, message: str, term: str):
        super().__init__(message)
        self.term = term


@dataclass(frozen=True, eq=False)
class GlmFit:
    spec: DesignSpec
    response: str
    coefficients: np.ndarray
    converged: bool
    iterations: int
    covariate_names: tuple[str, ...]
    stratum: int | None = None
    deviance_trace: tuple[float, ...] = ()

    def linear_predictor(self, d: Dataset, s: int | None = None, a: int | None = None) -> np.ndarray:
        return design_matrix(self.spec, d, s, a) @ self.coefficients

    def row_mask(self, d: Dataset) -> np.ndarray:
        if self.stratum is None:
            return np.ones(d.n_rows, dtype=bool)
        return d.s == self.stratum

    def scores(self, d: Dataset, coefficients: np.ndarray | None = None) -> np.ndarray:
        """Per-row estimating-function contributions ``d_i * (z_i - fitted_i)``.

        Rows outside the fitting stratum contribute zero. Frequency weights are
        not applied here.
        """
        beta = self.coefficients if coefficients is None else coefficients
        mat = design_matrix(self.spec, d)
        z = getattr(d, self.response)
        eta = mat @ beta
        fitted = eta if self.spec.link == "identity" else _expit(eta)
        return mat * ((z - fitted) * self.row_mask(d))[:, None]


def _expit(eta):
    return 1.0 / (1.0 + np.exp(-eta))


def _weights(d: Dataset, w, stratum):
    w = d.weights if w is None else np.asarray(w, dtype=np.float64)
    if stratum is not None:
        w = w * (d.s == stratum)
    return np.ascontiguousarray(w)


def check_rank(mat: np.ndarray, w: np.ndarray, names) -> None:
    """Raise :class:`RankError` naming the first collinear term (pivoted QR, tol 1e-10)."""
    active = w > 0
    mat = mat[active] * np.sqrt(w[active])[:, None]
    if mat.shape[0] < mat.shape[1]:
        raise RankError(f"fewer weighted rows ({mat.shape[0]}) than terms ({mat.shape[1]})", names[-1])
    _, r, piv = scipy.linalg.qr(mat, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    colnorm = np.max(np.linalg.norm(mat, axis=0)) if mat.size else 0.0
    bad = np.flatnonzero(diag <= 1e-10 * max(colnorm, np.finfo(float).tiny))
    if bad.size:
        term = names[piv[bad[0]]]
        raise RankError(f"design is rank deficient; term {term!r} is collinear with the others", term)


def fit_ols(d: Dataset, spec: DesignSpec, stratum: int | None = None, w=None,
            rank_check: bool = True) -> GlmFit:
    """Weighted least squares of ``y`` on ``spec`` (optionally within ``S == stratum``)."""
    if spec.link != "identity":
        raise ValueError("fit_ols needs an identity-link design")
    mat = design_matrix(spec, d)
    wt = _weights(d, w, stratum)
    if rank_check:
        check_rank(mat, wt, spec.names)
    beta = kernels.wls(mat, d.y, wt)
    if beta is None:
        raise RankError("normal equations are singular", spec.names[-1])
    return GlmFit(spec, "y", np.asarray(beta), True, 1, d.covariate_names, stratum)


def fit_logistic(d: Dataset, spec: DesignSpec, response: str, stratum: int | None = None, w=None,
                 start=None, rank_check: bool = True) -> GlmFit:
    """IRLS logistic regression of ``response`` (``"s"`` or ``"a"``) on ``spec``.

    ``converged`` is true iff the max absolute score divided by the total weight is
    at most 1e-8 within 100 iterations and no linear predictor exceeds 30 in
    magnitude (fitted probabilities numerically 0 or 1 indicate separation).
    """
    if spec.link != "logit":
        raise ValueError("fit_logistic needs a logit-link design")
    if response not in ("s", "a"):
        raise ValueError("response must be 's' or 'a'")
    mat = design_matrix(spec, d)
    wt = _weights(d, w, stratum)
    if rank_check:
        check_rank(mat, wt, spec.names)
    beta0 = np.zeros(mat.shape[1]) if start is None else np.asarray(start, dtype=np.float64)
    beta, iters, trace, score_max, eta_max = kernels.irls_logit(
        mat, getattr(d, response), wt, beta0, MAX_ITER, SCORE_TOL * 1e-2)
    converged = score_max <= SCORE_TOL and eta_max <= SEPARATION_ETA
    return GlmFit(spec, response, np.asarray(beta), bool(converged), int(iters), d.covariate_names,
                  stratum, tuple(trace))


def predict_mu(fit: GlmFit, s: int, a: int, x) -> float | np.ndarray:
    """Outcome model evaluated at (s, a, x) with S and A substituted into every term.

    ``x`` may be a single covariate row (returns a float), a matrix, or a
    :class:`Dataset` (uses the cached design).
    """
    if isinstance(x, Dataset):
        return design_matrix(fit.spec, x, s, a) @ fit.coefficients
    arr = np.asarray(x, dtype=np.float64)
    mat = build_matrix(fit.spec, arr, fit.covariate_names, float(s), float(a))
    out = mat @ fit.coefficients
    return float(out[0]) if arr.ndim == 1 else out


def predict_pi(fit: GlmFit, x, s: int | None = None) -> float | np.ndarray:
    """Fitted probability ``expit(design @ coef)``; ``s`` overrides S for P(A=1|X,S) models."""
    if isinstance(x, Dataset):
        return _expit(design_matrix(fit.spec, x, s, None) @ fit.coefficients)
    arr = np.asarray(x, dtype=np.float64)
    mat = build_matrix(fit.spec, arr, fit.covariate_names, 0.0 if s is None else float(s), 0.0)
    out = _expit(mat @ fit.coefficients)
    return float(out[0]) if arr.ndim == 1 else out


def require_converged(*fits: GlmFit) -> None:
    for f in fits:
        if f is not None and not f.converged:
            raise FitError(f"{f.response}-model {f.spec} did not converge")
