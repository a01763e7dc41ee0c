"""Point estimators of the treated-group effect in the primary sample.

All sums are frequency-weighted; ``w`` overrides the dataset's own weights,
which is how bootstrap resamples are represented (weights = resample counts).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from placebo.data import Dataset
from placebo.design import DesignSpec, design_matrix
from placebo.nuisance import FitError, GlmFit, fit_logistic, fit_ols, predict_mu, predict_pi, require_converged

KINDS = ("reg_naive", "dr_naive", "reg", "ipw", "ipw_stabilized", "dr")
NAIVE = ("reg_naive", "dr_naive")
REQUIRES = {
    "reg_naive": ("mu",),
    "dr_naive": ("mu", "pi_a"),
    "reg": ("mu",),
    "ipw": ("pi_s", "pi_a"),
    "ipw_stabilized": ("pi_s", "pi_a"),
    "dr": ("mu", "pi_s", "pi_a"),
}
BOUNDARY = 1e-12


class DegenerateWeightError(ValueError):
    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


def _weights(d: Dataset, w) -> np.ndarray:
    return d.weights if w is None else np.asarray(w, dtype=np.float64)


def _n11(d: Dataset, w: np.ndarray) -> float:
    n11 = float(np.sum(w * d.s * d.a))
    if n11 <= 0.0:
        raise ValueError("no weight in the S=1, A=1 cell")
    return n11


def _guard(prob: np.ndarray, active: np.ndarray, label: str, low: bool = True, high: bool = True) -> None:
    bad = np.zeros(prob.shape, dtype=bool)
    if low:
        bad |= prob <= BOUNDARY
    if high:
        bad |= prob >= 1.0 - BOUNDARY
    bad &= active
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise DegenerateWeightError(f"degenerate weight: {label} at the boundary on row {row + 1}", row + 1)


def _contrast(fit: GlmFit, d: Dataset) -> np.ndarray:
    """Per-row (mu(1,1,x) - mu(1,0,x)) - (mu(0,1,x) - mu(0,0,x)) via the design difference.

    Differencing design matrices before the product makes terms free of S:A cancel exactly.
    """
    key = ("contrast", str(fit.spec))
    mat = d._cache.get(key)
    if mat is None:
        mat = ((design_matrix(fit.spec, d, 1, 1) - design_matrix(fit.spec, d, 1, 0))
               - (design_matrix(fit.spec, d, 0, 1) - design_matrix(fit.spec, d, 0, 0)))
        mat.setflags(write=False)
        d._cache[key] = mat
    return mat @ fit.coefficients


def _effect_in_primary(fit: GlmFit, d: Dataset) -> np.ndarray:
    key = ("effect1", str(fit.spec))
    mat = d._cache.get(key)
    if mat is None:
        mat = design_matrix(fit.spec, d, 1, 1) - design_matrix(fit.spec, d, 1, 0)
        mat.setflags(write=False)
        d._cache[key] = mat
    return mat @ fit.coefficients


def theta_reg(d: Dataset, mu_fit: GlmFit, w=None) -> float:
    """Regression estimator: mean over treated primary rows of Delta_1(x) - Delta_0(x)."""
    require_converged(mu_fit)
    w = _weights(d, w)
    sa = w * d.s * d.a
    return float(np.sum(sa * _contrast(mu_fit, d)) / _n11(d, w))


def _propensities(d: Dataset, pis_fit: GlmFit, pia_fit: GlmFit):
    ps = predict_pi(pis_fit, d)
    pa1 = predict_pi(pia_fit, d, s=1)
    pa0 = predict_pi(pia_fit, d, s=0)
    return ps, pa1, pa0


def theta_ipw(d: Dataset, pis_fit: GlmFit, pia_fit: GlmFit, stabilized: bool = False, w=None) -> float:
    """Inverse-probability-weighted estimator, plain or with per-block normalized weights."""
    require_converged(pis_fit, pia_fit)
    w = _weights(d, w)
    n11 = _n11(d, w)
    s, a, y = d.s, d.a, d.y
    ps, pa1, pa0 = _propensities(d, pis_fit, pia_fit)
    active = w > 0
    if not stabilized:
        pas = np.where(s == 1.0, pa1, pa0)
        _guard(ps, active, "P(S=1|X)", low=False)
        _guard(pas, active, "P(A=1|X,S)")
        _guard(pa1, active, "P(A=1|X,S=1)", low=False)
        term = (s - ps) / (1.0 - ps) * (pa1 * (a - pas)) / (pas * (1.0 - pas)) * y
        return float(np.sum(w * term) / n11)
    _guard(pa1, active & (s == 1) & (a == 0), "P(A=1|X,S=1)", low=False)
    _guard(ps, active & (s == 0), "P(S=1|X)", low=False)
    _guard(pa0, active & (s == 0) & (a == 1), "P(A=1|X,S=0)", high=False)
    _guard(pa0, active & (s == 0) & (a == 0), "P(A=1|X,S=0)", low=False)
    w10, w01, w00 = _block_weights(s, a, ps, pa1, pa0)
    treated = np.sum(w * s * a * y) / n11
    return float(treated - _block_mean(w * w10, y) - _block_mean(w * w01, y) + _block_mean(w * w00, y))


def _block_weights(s, a, ps, pa1, pa0):
    odds_s = np.divide(ps, 1.0 - ps, out=np.zeros_like(ps), where=s == 0)
    w10 = np.divide(s * (1.0 - a) * pa1, 1.0 - pa1, out=np.zeros_like(ps), where=(s == 1) & (a == 0))
    w01 = np.divide((1.0 - s) * a * odds_s * pa1, pa0, out=np.zeros_like(ps), where=(s == 0) & (a == 1))
    w00 = np.divide((1.0 - s) * (1.0 - a) * odds_s * pa1, 1.0 - pa0, out=np.zeros_like(ps),
                    where=(s == 0) & (a == 0))
    return w10, w01, w00


def _block_mean(weight: np.ndarray, v: np.ndarray) -> float:
    total = np.sum(weight)
    if total <= 0.0:
        raise ValueError("weight block has zero total weight")
    return float(np.sum(weight * v) / total)


def _dr_guard(d: Dataset, w, ps, pa1, pa0) -> None:
    s, a = d.s, d.a
    active = w > 0
    _guard(pa1, active & (s == 1) & (a == 0), "P(A=1|X,S=1)", low=False)
    _guard(ps, active & (s == 0), "P(S=1|X)", low=False)
    _guard(pa0, active & (s == 0) & (a == 1), "P(A=1|X,S=0)", high=False)
    _guard(pa0, active & (s == 0) & (a == 0), "P(A=1|X,S=0)", low=False)


def theta_dr(d: Dataset, mu_fit: GlmFit, pis_fit: GlmFit, pia_fit: GlmFit, normalized: bool = False,
             w=None) -> float:
    """Doubly robust estimator: root of the summed efficient influence function.

    ``normalized=True`` divides each augmentation block by its own weight total
    instead of by n11.
    """
    require_converged(mu_fit, pis_fit, pia_fit)
    w = _weights(d, w)
    n11 = _n11(d, w)
    s, a, y = d.s, d.a, d.y
    ps, pa1, pa0 = _propensities(d, pis_fit, pia_fit)
    _dr_guard(d, w, ps, pa1, pa0)
    m10 = predict_mu(mu_fit, 1, 0, d)
    m01 = predict_mu(mu_fit, 0, 1, d)
    m00 = predict_mu(mu_fit, 0, 0, d)
    w10, w01, w00 = _block_weights(s, a, ps, pa1, pa0)
    main = np.sum(w * s * a * (y - m10 - m01 + m00)) / n11
    if normalized:
        return float(main - _block_mean(w * w10, y - m10) - _block_mean(w * w01, y - m01)
                     + _block_mean(w * w00, y - m00))
    aug = w10 * (y - m10) + w01 * (y - m01) - w00 * (y - m00)
    return float(main - np.sum(w * aug) / n11)


def theta_reg_naive(d: Dataset, mu_fit: GlmFit, w=None) -> float:
    """Regression of Y on A and X within S=1; averages mu(1,1,x) - mu(1,0,x) over treated primary rows.

    For a design where A enters only additively this is the coefficient on A.
    """
    require_converged(mu_fit)
    if mu_fit.stratum != 1:
        raise ValueError("naive estimators need a fit on the S=1 stratum")
    w = _weights(d, w)
    sa = w * d.s * d.a
    return float(np.sum(sa * _effect_in_primary(mu_fit, d)) / _n11(d, w))


def theta_dr_naive(d: Dataset, mu_fit: GlmFit, pia_fit: GlmFit, w=None) -> float:
    """Treated-group AIPW within S=1, ignoring the placebo sample."""
    require_converged(mu_fit, pia_fit)
    if mu_fit.stratum != 1 or pia_fit.stratum != 1:
        raise ValueError("naive estimators need fits on the S=1 stratum")
    w = _weights(d, w)
    s, a, y = d.s, d.a, d.y
    pa = predict_pi(pia_fit, d, s=1)
    _guard(pa, (w > 0) & (s == 1) & (a == 0), "P(A=1|X,S=1)", low=False)
    m0 = predict_mu(mu_fit, 1, 0, d)
    odds = np.divide(pa, 1.0 - pa, out=np.zeros_like(pa), where=(s == 1) & (a == 0))
    resid = y - m0
    return float(np.sum(w * s * (a * resid - (1.0 - a) * odds * resid)) / _n11(d, w))


@dataclass(frozen=True)
class EifVector:
    values: np.ndarray
    theta_at: float
    lambda_hat: float
    weights: np.ndarray


def eif_values(d: Dataset, mu_fit: GlmFit, pis_fit: GlmFit, pia_fit: GlmFit, theta: float,
               w=None) -> EifVector:
    """Per-row efficient influence function at ``theta`` with E{SA} replaced by n11/n."""
    require_converged(mu_fit, pis_fit, pia_fit)
    w = _weights(d, w)
    lam = _n11(d, w) / float(np.sum(w))
    s, a, y = d.s, d.a, d.y
    ps, pa1, pa0 = _propensities(d, pis_fit, pia_fit)
    _dr_guard(d, w, ps, pa1, pa0)
    m10 = predict_mu(mu_fit, 1, 0, d)
    m01 = predict_mu(mu_fit, 0, 1, d)
    m00 = predict_mu(mu_fit, 0, 0, d)
    w10, w01, w00 = _block_weights(s, a, ps, pa1, pa0)
    vals = (s * a * (y - m10 - m01 + m00 - theta)
            - w10 * (y - m10) - w01 * (y - m01) + w00 * (y - m00)) / lam
    return EifVector(vals, float(theta), lam, w)


@dataclass(frozen=True)
class Fits:
    mu: GlmFit | None = None
    pi_s: GlmFit | None = None
    pi_a: GlmFit | None = None


@dataclass(frozen=True)
class Recipe:
    """An estimator together with the nuisance designs it needs.

    Naive estimators fit their models on the S=1 stratum only; their designs may
    not reference S.
    """

    estimator: str
    mu: DesignSpec | None = None
    pi_s: DesignSpec | None = None
    pi_a: DesignSpec | None = None
    normalized: bool = False

    def __post_init__(self):
        if self.estimator not in KINDS:
            raise ValueError(f"unknown estimator {self.estimator!r}; expected one of {KINDS}")
        for role in REQUIRES[self.estimator]:
            spec = getattr(self, role)
            if spec is None:
                raise ValueError(f"estimator {self.estimator} needs a {role} design")
            spec.check_role(role)
            if self.estimator in NAIVE and spec.uses("S"):
                raise ValueError(f"naive {role} design may not reference S: {spec}")

    @property
    def stratum(self) -> int | None:
        return 1 if self.estimator in NAIVE else None

    def fit_keys(self):
        out = []
        for role in REQUIRES[self.estimator]:
            spec = getattr(self, role)
            response = {"mu": "y", "pi_s": "s", "pi_a": "a"}[role]
            out.append((role, (str(spec), spec.link, response, self.stratum)))
        return out


def _fit_one(d: Dataset, key, spec: DesignSpec, w, start, rank_check: bool) -> GlmFit:
    _, link, response, stratum = key
    if link == "identity":
        return fit_ols(d, spec, stratum=stratum, w=w, rank_check=rank_check)
    fit = fit_logistic(d, spec, response, stratum=stratum, w=w, start=start, rank_check=rank_check)
    return fit


def fit_nuisances(recipe: Recipe, d: Dataset, w=None, start: Fits | None = None,
                  rank_check: bool = True) -> Fits:
    """Fit every nuisance model the recipe needs; raise :class:`FitError` if one fails."""
    fits = {}
    for role, key in recipe.fit_keys():
        init = getattr(start, role).coefficients if start is not None and getattr(start, role) else None
        fit = _fit_one(d, key, getattr(recipe, role), w, init, rank_check)
        require_converged(fit)
        fits[role] = fit
    return Fits(**fits)


def evaluate(recipe: Recipe, d: Dataset, fits: Fits, w=None) -> float:
    kind = recipe.estimator
    if kind == "reg":
        return theta_reg(d, fits.mu, w)
    if kind == "ipw":
        return theta_ipw(d, fits.pi_s, fits.pi_a, stabilized=False, w=w)
    if kind == "ipw_stabilized":
        return theta_ipw(d, fits.pi_s, fits.pi_a, stabilized=True, w=w)
    if kind == "dr":
        return theta_dr(d, fits.mu, fits.pi_s, fits.pi_a, normalized=recipe.normalized, w=w)
    if kind == "reg_naive":
        return theta_reg_naive(d, fits.mu, w)
    return theta_dr_naive(d, fits.mu, fits.pi_a, w)


def run_recipe(recipe: Recipe, d: Dataset, w=None) -> tuple[float, Fits]:
    fits = fit_nuisances(recipe, d, w)
    return evaluate(recipe, d, fits, w), fits


class MultiEstimator:
    """Evaluate several recipes on one dataset, fitting each distinct nuisance model once.

    Bootstrap resamples call :meth:`evaluate` with count weights; logistic fits
    are warm-started from the full-data coefficients.
    """

    def __init__(self, d: Dataset, recipes):
        self.d = d
        self.recipes = list(recipes)
        self.specs = {}
        for r in self.recipes:
            for role, key in r.fit_keys():
                self.specs[key] = getattr(r, role)
        self.base_fits: dict = {}

    def _fit_all(self, w, rank_check: bool):
        out = {}
        for key, spec in self.specs.items():
            base = self.base_fits.get(key)
            start = base.coefficients if isinstance(base, GlmFit) else None
            try:
                fit = _fit_one(self.d, key, spec, w, start, rank_check)
                require_converged(fit)
                out[key] = fit
            except (FitError, ValueError) as exc:
                out[key] = exc
        return out

    def evaluate(self, w=None, full: bool = False):
        """Return ``(values, errors)``; failed recipes get NaN and an error message."""
        fitted = self._fit_all(w, rank_check=full)
        if full:
            self.base_fits = fitted
        values = np.full(len(self.recipes), np.nan)
        errors = [None] * len(self.recipes)
        for i, r in enumerate(self.recipes):
            fits = {}
            for role, key in r.fit_keys():
                fits[role] = fitted[key]
            bad = [f for f in fits.values() if isinstance(f, Exception)]
            if bad:
                errors[i] = str(bad[0])
                continue
            try:
                values[i] = evaluate(r, self.d, Fits(**fits), w)
            except (FitError, ValueError) as exc:
                errors[i] = str(exc)
        return values, errors

    def fits_at(self, w, index: int = 0) -> Fits:
        """Refit the models of recipe ``index`` under weights ``w``; raise on failure."""
        fitted = self._fit_all(w, rank_check=False)
        r = self.recipes[index]
        fits = {role: fitted[key] for role, key in r.fit_keys()}
        for f in fits.values():
            if isinstance(f, Exception):
                raise f
        return Fits(**fits)

    def fits_for(self, index: int) -> Fits:
        r = self.recipes[index]
        return Fits(**{role: self.base_fits[key] for role, key in r.fit_keys()})
