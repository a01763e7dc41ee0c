"""Partial identification when the placebo-sample assumptions are only approximately true.

Two models are supported. The linear model lets the placebo effect and the
confounding difference be affine in X with coefficients in a box; the marginal
model bounds the placebo effect by Lambda and the selection odds ratio on the
unmeasured confounder by Gamma.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from placebo.data import Dataset
from placebo.estimators import (
    Fits,
    MultiEstimator,
    Recipe,
    _propensities,
    theta_dr,
    theta_ipw,
    theta_reg,
)
from placebo.inference import (
    MAX_FAIL_RATE,
    BootstrapUnstable,
    percentile,
    replicate,
    z_value,
)
from placebo.nuisance import FitError, predict_mu, require_converged

MARGINAL_BASES = ("reg", "ipw", "ipw_stabilized", "dr")


class SensitivityError(ValueError):
    pass


@dataclass(frozen=True)
class LinearBox:
    """Ranges for the linear sensitivity parameters.

    Every delta coordinate (intercept and one per covariate) ranges over
    ``[gamma_l, gamma_u]`` and every lambda coordinate over ``[lambda_l, lambda_u]``.
    ``overrides`` maps a coordinate name (``delta0``, ``lambda0``, ``delta:X1``,
    ``lambda:X1``) to its own ``(lo, hi)`` range.
    """

    gamma_l: float = 0.0
    gamma_u: float = 0.0
    lambda_l: float = 0.0
    lambda_u: float = 0.0
    overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.gamma_l <= self.gamma_u:
            raise SensitivityError("linear box needs gamma_l <= gamma_u")
        if not self.lambda_l <= self.lambda_u:
            raise SensitivityError("linear box needs lambda_l <= lambda_u")
        for key, (lo, hi) in self.overrides.items():
            if not lo <= hi:
                raise SensitivityError(f"override {key} needs lo <= hi")

    def ranges(self, names) -> tuple[list, list]:
        """``(delta_ranges, lambda_ranges)``; index 0 is the intercept, then one per covariate."""
        known = {"delta0", "lambda0"} | {f"{k}:{n}" for n in names for k in ("delta", "lambda")}
        unknown = set(self.overrides) - known
        if unknown:
            raise SensitivityError(f"unknown sensitivity coordinate(s): {sorted(unknown)}")
        deltas = [self.overrides.get("delta0", (self.gamma_l, self.gamma_u))]
        lambdas = [self.overrides.get("lambda0", (self.lambda_l, self.lambda_u))]
        for n in names:
            deltas.append(self.overrides.get(f"delta:{n}", (self.gamma_l, self.gamma_u)))
            lambdas.append(self.overrides.get(f"lambda:{n}", (self.lambda_l, self.lambda_u)))
        return deltas, lambdas

    def to_json(self) -> dict:
        out = {"gamma_l": self.gamma_l, "gamma_u": self.gamma_u,
               "lambda_l": self.lambda_l, "lambda_u": self.lambda_u}
        if self.overrides:
            out["overrides"] = {k: list(v) for k, v in sorted(self.overrides.items())}
        return out


@dataclass(frozen=True)
class MarginalParams:
    Gamma: float = 1.0
    Lambda: float = 0.0

    def __post_init__(self):
        if not self.Gamma >= 1.0:
            raise SensitivityError("Gamma must be >= 1")
        if not self.Lambda >= 0.0:
            raise SensitivityError("Lambda must be >= 0")

    def to_json(self) -> dict:
        return {"gamma": self.Gamma, "lambda": self.Lambda}


@dataclass
class SensitivityResult:
    theta_l: float
    theta_u: float
    ci: tuple[float, float]
    model: str
    params: dict
    estimator: str
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "theta_l": self.theta_l,
            "theta_u": self.theta_u,
            "ci": [self.ci[0], self.ci[1]],
            "model": self.model,
            "params": self.params,
            "estimator": self.estimator,
            "diagnostics": self.diagnostics,
        }


# --------------------------------------------------------------------------- linear model


def treated_means(d: Dataset, w=None) -> np.ndarray:
    """Weighted covariate means over S=A=1 rows."""
    w = d.weights if w is None else np.asarray(w, dtype=np.float64)
    sa = w * d.s * d.a
    return (sa @ d.x) / float(np.sum(sa))


def linear_theta(theta_hat: float, xbar, delta, lam) -> float:
    """theta(H) for one parameter vector; index 0 of ``delta``/``lam`` is the intercept."""
    out = theta_hat - (delta[0] - lam[0])
    for j in range(len(xbar)):
        out = out - (delta[j + 1] - lam[j + 1]) * xbar[j]
    return out


def _corners(xbar, deltas, lambdas):
    """Parameter vectors attaining the infimum and supremum of theta(H) over the box."""
    lo_d, lo_l = [deltas[0][1]], [lambdas[0][0]]
    hi_d, hi_l = [deltas[0][0]], [lambdas[0][1]]
    for j, xj in enumerate(xbar):
        (dl, du), (ll, lu) = deltas[j + 1], lambdas[j + 1]
        # the term is -(delta_j - lambda_j) * xbar_j
        if xj >= 0:
            lo_d.append(du)
            lo_l.append(ll)
            hi_d.append(dl)
            hi_l.append(lu)
        else:
            lo_d.append(dl)
            lo_l.append(lu)
            hi_d.append(du)
            hi_l.append(ll)
    return (lo_d, lo_l), (hi_d, hi_l)


def linear_bounds(theta_hat: float, d: Dataset, box: LinearBox, w=None) -> tuple[float, float]:
    """Exact extrema of theta(H) over the box by per-coordinate corner selection."""
    return _linear_bounds_at(theta_hat, treated_means(d, w), box.ranges(d.covariate_names))


def _linear_bounds_at(theta_hat, xbar, ranges):
    (lo_d, lo_l), (hi_d, hi_l) = _corners(xbar, *ranges)
    return linear_theta(theta_hat, xbar, lo_d, lo_l), linear_theta(theta_hat, xbar, hi_d, hi_l)


def _quantile_ci(lower: np.ndarray, upper: np.ndarray, alpha: float):
    ok = np.isfinite(lower) & np.isfinite(upper)
    failed = int(lower.size - np.count_nonzero(ok))
    if lower.size and failed / lower.size > MAX_FAIL_RATE:
        raise BootstrapUnstable(f"bootstrap unstable: {failed} of {lower.size} resamples failed")
    return (percentile(lower[ok], alpha / 2.0), percentile(upper[ok], 1.0 - alpha / 2.0)), failed


def _engine(d: Dataset, recipe: Recipe):
    engine = MultiEstimator(d, [recipe])
    vals, errs = engine.evaluate(full=True)
    if errs[0] is not None:
        raise FitError(errs[0])
    return engine, float(vals[0])


def linear_ci(d: Dataset, recipe: Recipe, box: LinearBox, B: int = 200, alpha: float = 0.05,
              seed: int = 0, stratified: bool = False, threads: int = 1) -> SensitivityResult:
    """Bounds plus ``[Q_{a/2}(inf theta*(H)), Q_{1-a/2}(sup theta*(H))]`` over bootstrap resamples.

    Resamples come from the same streams as :func:`placebo.inference.bootstrap`,
    so a zero box returns that function's percentile interval exactly.
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    ranges = box.ranges(d.covariate_names)
    engine, est = _engine(d, recipe)
    theta_l, theta_u = _linear_bounds_at(est, treated_means(d), ranges)

    def stat(w):
        v, e = engine.evaluate(w)
        if e[0] is not None:
            return np.array([np.nan, np.nan])
        return np.array(_linear_bounds_at(v[0], treated_means(d, w), ranges))

    reps = replicate(d, stat, B, seed, stratified, threads)
    ci, failed = _quantile_ci(reps[:, 0], reps[:, 1], alpha)
    return SensitivityResult(theta_l, theta_u, ci, "linear", box.to_json(), recipe.estimator,
                             {"estimate": est, "failed_replicates": failed, "replicates": int(B)})


# --------------------------------------------------------------------------- marginal model


@dataclass(frozen=True)
class MarginalTerms:
    """Base estimate and the correction sums that Gamma multiplies.

    ``c01`` terms carry the S=0, A=1 outcome level and ``c00`` terms the S=0, A=0
    level; for the dr base each holds (plug-in mean, weighted residual sum).
    """

    theta: float
    c01: tuple[float, ...]
    c00: tuple[float, ...]


def _require_nonnegative(d: Dataset) -> None:
    if d.y.size and float(np.min(d.y)) < 0.0:
        raise SensitivityError("marginal model requires nonnegative outcomes")


def marginal_terms(d: Dataset, fits: Fits, base: str, w=None, normalized: bool = False) -> MarginalTerms:
    if base not in MARGINAL_BASES:
        raise SensitivityError(f"marginal bounds need base in {MARGINAL_BASES}, got {base!r}")
    _require_nonnegative(d)
    w = d.weights if w is None else np.asarray(w, dtype=np.float64)
    s, a, y = d.s, d.a, d.y
    n11 = float(np.sum(w * s * a))
    sa = w * s * a
    if base == "reg":
        require_converged(fits.mu)
        theta = theta_reg(d, fits.mu, w)
        m01 = float(np.sum(sa * predict_mu(fits.mu, 0, 1, d)) / n11)
        m00 = float(np.sum(sa * predict_mu(fits.mu, 0, 0, d)) / n11)
        return MarginalTerms(theta, (m01,), (m00,))

    ps, pa1, pa0 = _propensities(d, fits.pi_s, fits.pi_a)
    ctrl = (1.0 - s) * a
    base0 = (1.0 - s) * (1.0 - a)
    o01 = np.divide(ps * pa1, (1.0 - ps) * pa0, out=np.zeros_like(ps), where=ctrl == 1)
    o00 = np.divide(ps * pa1, (1.0 - ps) * (1.0 - pa0), out=np.zeros_like(ps), where=base0 == 1)
    if base in ("ipw", "ipw_stabilized"):
        theta = theta_ipw(d, fits.pi_s, fits.pi_a, stabilized=base == "ipw_stabilized", w=w)
        r01 = float(np.sum(w * o01 * ctrl * y) / n11)
        r00 = float(np.sum(w * o00 * base0 * y) / n11)
        return MarginalTerms(theta, (r01,), (r00,))

    theta = theta_dr(d, fits.mu, fits.pi_s, fits.pi_a, normalized=normalized, w=w)
    mu01 = predict_mu(fits.mu, 0, 1, d)
    mu00 = predict_mu(fits.mu, 0, 0, d)
    m01 = float(np.sum(sa * mu01) / n11)
    m00 = float(np.sum(sa * mu00) / n11)
    r01 = float(np.sum(w * o01 * ctrl * (y - mu01)) / n11)
    r00 = float(np.sum(w * o00 * base0 * (y - mu00)) / n11)
    return MarginalTerms(theta, (m01, r01), (m00, r00))


def bounds_from_terms(t: MarginalTerms, params: MarginalParams) -> tuple[float, float]:
    g, lam = params.Gamma, params.Lambda
    up = t.theta + lam
    lo = t.theta - lam
    for c in t.c01:
        up = up - (1.0 / g - 1.0) * c
        lo = lo - (g - 1.0) * c
    for c in t.c00:
        up = up + (g - 1.0) * c
        lo = lo + (1.0 / g - 1.0) * c
    return lo, up


def marginal_bounds(d: Dataset, fits: Fits, base: str, params: MarginalParams, w=None,
                    normalized: bool = False) -> tuple[float, float]:
    """``(theta_L, theta_U)`` for the reg, ipw (either form) or dr base estimator."""
    return bounds_from_terms(marginal_terms(d, fits, base, w, normalized), params)


def _marginal_replicates(d, recipe, B, seed, stratified, threads):
    if recipe.estimator not in MARGINAL_BASES:
        raise SensitivityError(f"marginal model needs a reg, ipw or dr estimator, got {recipe.estimator}")
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    _require_nonnegative(d)
    engine, _ = _engine(d, recipe)
    full = marginal_terms(d, engine.fits_for(0), recipe.estimator, normalized=recipe.normalized)
    width = 1 + len(full.c01) + len(full.c00)

    def stat(w):
        try:
            t = marginal_terms(d, engine.fits_at(w), recipe.estimator, w, recipe.normalized)
        except ValueError:
            return np.full(width, np.nan)
        return np.array((t.theta,) + t.c01 + t.c00)

    reps = replicate(d, stat, B, seed, stratified, threads)
    ok = np.all(np.isfinite(reps), axis=1)
    failed = int(B - np.count_nonzero(ok))
    if failed / B > MAX_FAIL_RATE:
        raise BootstrapUnstable(f"bootstrap unstable: {failed} of {B} resamples failed")
    k = len(full.c01)
    boot = [MarginalTerms(r[0], tuple(r[1:1 + k]), tuple(r[1 + k:])) for r in reps[ok]]
    return full, boot, failed


def _marginal_result(full, boot, params, alpha, estimator, failed, B) -> SensitivityResult:
    theta_l, theta_u = bounds_from_terms(full, params)
    pairs = np.array([bounds_from_terms(t, params) for t in boot])
    sd_l = float(np.std(pairs[:, 0], ddof=1))
    sd_u = float(np.std(pairs[:, 1], ddof=1))
    z = z_value(alpha)
    return SensitivityResult(theta_l, theta_u, (theta_l - z * sd_l, theta_u + z * sd_u), "marginal",
                             params.to_json(), estimator,
                             {"estimate": full.theta, "se_lower": sd_l, "se_upper": sd_u,
                              "failed_replicates": failed, "replicates": int(B)})


def marginal_ci(d: Dataset, recipe: Recipe, params: MarginalParams, B: int = 200, alpha: float = 0.05,
                seed: int = 0, stratified: bool = False, threads: int = 1) -> SensitivityResult:
    """``[theta_L - z sigma_L, theta_U + z sigma_U]`` with bootstrap standard deviations."""
    full, boot, failed = _marginal_replicates(d, recipe, B, seed, stratified, threads)
    return _marginal_result(full, boot, params, alpha, recipe.estimator, failed, B)


def marginal_grid(d: Dataset, recipe: Recipe, gammas, lambdas, B: int = 200, alpha: float = 0.05,
                  seed: int = 0, stratified: bool = False, threads: int = 1) -> list[SensitivityResult]:
    """One result per (Gamma, Lambda) pair; the bootstrap is run once and shared."""
    full, boot, failed = _marginal_replicates(d, recipe, B, seed, stratified, threads)
    return [_marginal_result(full, boot, MarginalParams(g, lam), alpha, recipe.estimator, failed, B)
            for g in gammas for lam in lambdas]


GRID_COLUMNS = ("gamma", "lambda", "theta_l", "theta_u", "ci_lo", "ci_hi")


def grid_rows(results) -> list[tuple]:
    return [(r.params["gamma"], r.params["lambda"], r.theta_l, r.theta_u, r.ci[0], r.ci[1]) for r in results]
