"""Standard errors and confidence intervals: EIF plug-in, stacked sandwich, bootstrap."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Callable

import numpy as np

from placebo.data import CELLS, Dataset
from placebo.design import design_matrix
from placebo.estimators import (
    EifVector,
    Fits,
    MultiEstimator,
    Recipe,
    _block_weights,
    _contrast,
    _effect_in_primary,
    eif_values,
)
from placebo.nuisance import FitError, predict_pi
from placebo.rng import stream

METHODS = ("plugin", "sandwich", "bootstrap")
MAX_FAIL_RATE = 0.10


class InferenceError(RuntimeError):
    pass


class BootstrapUnstable(InferenceError):
    pass


class SandwichSingular(InferenceError):
    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


def z_value(alpha: float) -> float:
    """Upper alpha/2 quantile of the standard normal."""
    return NormalDist().inv_cdf(1.0 - alpha / 2.0)


def percentile(values, q: float) -> float:
    """Order statistic at 1-based index ceil(q * m) of the m sorted values (clamped to [1, m])."""
    vals = np.sort(np.asarray(values, dtype=np.float64))
    m = vals.size
    if m == 0:
        raise InferenceError("no replicates")
    k = math.ceil(q * m - 1e-9)
    k = min(max(k, 1), m)
    return float(vals[k - 1])


@dataclass
class EstimateResult:
    estimate: float
    se: float
    ci: tuple[float, float]
    method: str
    estimator: str
    n: float
    n11: float
    diagnostics: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        def num(v):
            return int(v) if float(v).is_integer() else float(v)

        return {
            "estimate": self.estimate,
            "se": self.se,
            "ci": [self.ci[0], self.ci[1]],
            "method": self.method,
            "estimator": self.estimator,
            "n": num(self.n),
            "n11": num(self.n11),
            "diagnostics": self.diagnostics,
        }


def plugin_se(eif: EifVector) -> float:
    """sqrt(mean(EIF^2) / n), frequency-weighted."""
    w = eif.weights
    n = float(np.sum(w))
    return math.sqrt(float(np.sum(w * eif.values ** 2)) / n) / math.sqrt(n)


# --------------------------------------------------------------------------- sandwich


@dataclass
class StackedSystem:
    """Stacked estimating functions for (nuisance coefficients..., theta).

    ``psi(gamma)`` returns the n x dim matrix of per-row contributions;
    ``segments`` maps block names to slices of ``gamma``.
    """

    gamma: np.ndarray
    segments: dict
    psi: Callable[[np.ndarray], np.ndarray]
    weights: np.ndarray

    @property
    def dim(self) -> int:
        return int(self.gamma.size)

    def mean_psi(self, gamma: np.ndarray) -> np.ndarray:
        w = self.weights
        return (w @ self.psi(gamma)) / float(np.sum(w))


def _expit(v):
    return 1.0 / (1.0 + np.exp(-v))


def build_stacked_system(d: Dataset, recipe: Recipe, fits: Fits, theta: float, w=None) -> StackedSystem:
    w = d.weights if w is None else np.asarray(w, dtype=np.float64)
    s, a, y = d.s, d.a, d.y
    lam = float(np.sum(w * s * a)) / float(np.sum(w))
    stratum_mask = np.ones(d.n_rows) if recipe.stratum is None else (s == recipe.stratum).astype(float)
    kind = recipe.estimator

    blocks = []
    start = 0
    segments = {}
    for role in ("pi_s", "pi_a", "mu"):
        fit = getattr(fits, role)
        if fit is None:
            continue
        k = fit.coefficients.size
        segments[role] = slice(start, start + k)
        blocks.append(fit.coefficients)
        start += k

    mats = {}
    if fits.pi_s is not None:
        mats["pi_s"] = design_matrix(fits.pi_s.spec, d)
    if fits.pi_a is not None:
        spec = fits.pi_a.spec
        mats["pi_a"] = design_matrix(spec, d)
        mats["pi_a1"] = design_matrix(spec, d, 1, None)
        mats["pi_a0"] = design_matrix(spec, d, 0, None)
    if fits.mu is not None:
        spec = fits.mu.spec
        mats["mu"] = design_matrix(spec, d)
        for sv, av in ((1, 0), (0, 1), (0, 0)):
            mats[f"mu{sv}{av}"] = design_matrix(spec, d, sv, av)

    if kind == "ipw_stabilized":
        ps = predict_pi(fits.pi_s, d)
        pa1 = predict_pi(fits.pi_a, d, s=1)
        pa0 = predict_pi(fits.pi_a, d, s=0)
        ratios = []
        for bw in _block_weights(s, a, ps, pa1, pa0):
            ratios.append(float(np.sum(w * bw * y) / np.sum(w * bw)))
        segments["ratios"] = slice(start, start + 3)
        blocks.append(np.array(ratios))
        start += 3
    segments["theta"] = slice(start, start + 1)
    blocks.append(np.array([theta]))
    gamma = np.concatenate(blocks)

    cmat = None
    if kind == "reg":
        _contrast(fits.mu, d)  # fills the cache
        cmat = d._cache[("contrast", str(fits.mu.spec))]
    elif kind == "reg_naive":
        _effect_in_primary(fits.mu, d)
        cmat = d._cache[("effect1", str(fits.mu.spec))]

    def psi(g: np.ndarray) -> np.ndarray:
        cols = []
        ps = pa1 = pa0 = pas = None
        if "pi_s" in segments:
            eta = mats["pi_s"] @ g[segments["pi_s"]]
            ps = _expit(eta)
            cols.append(mats["pi_s"] * ((s - ps) * stratum_mask)[:, None])
        if "pi_a" in segments:
            coef = g[segments["pi_a"]]
            pas = _expit(mats["pi_a"] @ coef)
            pa1 = _expit(mats["pi_a1"] @ coef)
            pa0 = _expit(mats["pi_a0"] @ coef)
            cols.append(mats["pi_a"] * ((a - pas) * stratum_mask)[:, None])
        if "mu" in segments:
            beta = g[segments["mu"]]
            cols.append(mats["mu"] * ((y - mats["mu"] @ beta) * stratum_mask)[:, None])
        th = g[segments["theta"]][0]
        if kind in ("reg", "reg_naive"):
            row = s * a * (cmat @ g[segments["mu"]] - th) / lam
        elif kind == "ipw":
            term = (s - ps) / (1.0 - ps) * (pa1 * (a - pas)) / (pas * (1.0 - pas)) * y
            row = (term - s * a * th) / lam
        elif kind == "ipw_stabilized":
            r = g[segments["ratios"]]
            bws = _block_weights(s, a, ps, pa1, pa0)
            for bw, rk in zip(bws, r):
                cols.append((bw * (y - rk))[:, None])
            row = s * a * (y - r[0] - r[1] + r[2] - th) / lam
        elif kind == "dr":
            beta = g[segments["mu"]]
            m10 = mats["mu10"] @ beta
            m01 = mats["mu01"] @ beta
            m00 = mats["mu00"] @ beta
            w10, w01, w00 = _block_weights(s, a, ps, pa1, pa0)
            row = (s * a * (y - m10 - m01 + m00 - th)
                   - w10 * (y - m10) - w01 * (y - m01) + w00 * (y - m00)) / lam
        else:  # dr_naive
            beta = g[segments["mu"]]
            m0 = mats["mu10"] @ beta
            odds = np.divide(pa1, 1.0 - pa1, out=np.zeros_like(pa1), where=(s == 1) & (a == 0))
            resid = y - m0
            row = s * (a * resid - (1.0 - a) * odds * resid - a * th) / lam
        cols.append(row[:, None])
        return np.hstack(cols)

    return StackedSystem(gamma, segments, psi, w)


def bread(system: StackedSystem, gamma: np.ndarray | None = None) -> np.ndarray:
    """A = -(1/n) sum w dpsi/dgamma by central differences, step 1e-6 * (1 + |gamma_j|)."""
    g0 = system.gamma if gamma is None else gamma
    k = g0.size
    out = np.empty((k, k))
    for j in range(k):
        h = 1e-6 * (1.0 + abs(g0[j]))
        up = g0.copy()
        dn = g0.copy()
        up[j] += h
        dn[j] -= h
        out[:, j] = -(system.mean_psi(up) - system.mean_psi(dn)) / (2.0 * h)
    return out


def sandwich_cov(system: StackedSystem, zero_cross: bool = False) -> np.ndarray:
    w = system.weights
    n = float(np.sum(w))
    amat = bread(system)
    if zero_cross:
        t = system.segments["theta"].start
        amat[t, :t] = 0.0
    rows = system.psi(system.gamma)
    bmat = (rows * w[:, None]).T @ rows / n
    cond = float(np.linalg.cond(amat))
    if not np.isfinite(cond) or cond > 1e12:
        raise SandwichSingular(f"sandwich bread singular (condition number {cond:.3g})", cond)
    ainv = np.linalg.inv(amat)
    return ainv @ bmat @ ainv.T / n


def sandwich_se(d: Dataset, system: StackedSystem, zero_cross: bool = False) -> float:
    """Standard error of theta from A^{-1} B A^{-T} / n."""
    cov = sandwich_cov(system, zero_cross)
    t = system.segments["theta"].start
    return math.sqrt(max(float(cov[t, t]), 0.0))


# --------------------------------------------------------------------------- bootstrap


def resample_weights(d: Dataset, rng: np.random.Generator, stratified: bool = False) -> np.ndarray:
    """Frequency weights of one nonparametric bootstrap resample.

    With unit weights this is the count of each row among n draws with
    replacement; general frequency weights resample individuals (multinomial).
    """
    n = d.n_rows
    unit = bool(np.all(d.weights == 1.0))
    if not stratified:
        if unit:
            return np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        total = int(round(d.n))
        return rng.multinomial(total, d.weights / d.n).astype(np.float64)
    out = np.zeros(n)
    for sv, av in CELLS:
        rows = np.flatnonzero(d.cell_mask(sv, av))
        if unit:
            out[rows] = np.bincount(rng.integers(0, rows.size, size=rows.size), minlength=rows.size)
        else:
            cw = d.weights[rows]
            out[rows] = rng.multinomial(int(round(cw.sum())), cw / cw.sum())
    return out


def _cells_ok(d: Dataset, w: np.ndarray) -> bool:
    return all(np.any(w[d.cell_mask(sv, av)] > 0) for sv, av in CELLS)


def replicate(d: Dataset, stat: Callable[[np.ndarray], np.ndarray], B: int, seed: int,
              stratified: bool = False, threads: int = 1, tag: str = "bootstrap") -> np.ndarray:
    """B x k matrix of ``stat(weights)`` over bootstrap resamples; failed rows are NaN.

    Resample b draws from the stream ``(seed, tag, b)`` so the output does not
    depend on ``threads``.
    """

    def one(b: int):
        w = resample_weights(d, stream(seed, tag, b), stratified)
        if not _cells_ok(d, w):
            return None
        return np.asarray(stat(w), dtype=np.float64)

    if threads <= 1:
        results = [one(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(B)))
    k = next((r.size for r in results if r is not None), 1)
    out = np.full((B, k), np.nan)
    for b, r in enumerate(results):
        if r is not None:
            out[b] = r
    return out


def recipe_statistic(d: Dataset, recipe: Recipe, extra: Callable | None = None):
    """Full-data estimate plus a resample statistic sharing its warm starts.

    Returns ``(estimate, fits, stat)`` where ``stat(w)`` gives ``[theta*]`` (and
    ``extra(w)`` appended when given), NaN on fit failure.
    """
    engine = MultiEstimator(d, [recipe])
    vals, errs = engine.evaluate(full=True)
    if errs[0] is not None:
        raise FitError(errs[0])

    def stat(w):
        v, e = engine.evaluate(w)
        head = [v[0]]
        if extra is not None:
            if e[0] is not None:
                return np.full(1 + len(extra(w)), np.nan)
            head = head + list(extra(w))
        return np.array(head)

    return float(vals[0]), engine.fits_for(0), stat


def summarize_replicates(values: np.ndarray, alpha: float):
    ok = values[np.isfinite(values)]
    failed = int(values.size - ok.size)
    if values.size and failed / values.size > MAX_FAIL_RATE:
        raise BootstrapUnstable(f"bootstrap unstable: {failed} of {values.size} resamples failed")
    se = float(np.std(ok, ddof=1)) if ok.size > 1 else 0.0
    ci = (percentile(ok, alpha / 2.0), percentile(ok, 1.0 - alpha / 2.0))
    return se, ci, failed


def bootstrap(d: Dataset, recipe: Recipe, B: int = 200, alpha: float = 0.05, seed: int = 0,
              stratified: bool = False, threads: int = 1) -> EstimateResult:
    """Nonparametric bootstrap: refit every nuisance model per resample.

    SE is the replicate standard deviation; the CI is percentile-based. Resamples
    whose fits fail are dropped and counted; more than 10% failing raises
    :class:`BootstrapUnstable`.
    """
    if B < 50:
        raise ValueError("bootstrap needs B >= 50")
    est, _, stat = recipe_statistic(d, recipe)
    reps = replicate(d, stat, B, seed, stratified, threads)[:, 0]
    se, ci, failed = summarize_replicates(reps, alpha)
    flags = {"failed_replicates": failed, "replicates": int(B)}
    if not ci[0] <= est <= ci[1]:
        flags["estimate_outside_ci"] = True
    return EstimateResult(est, se, ci, "bootstrap", recipe.estimator, d.n, d.n11, flags)


def estimate(d: Dataset, recipe: Recipe, method: str = "plugin", alpha: float = 0.05, B: int = 200,
             seed: int = 0, stratified: bool = False, threads: int = 1) -> EstimateResult:
    """Point estimate plus the requested inference method."""
    if method not in METHODS:
        raise ValueError(f"unknown inference method {method!r}")
    if method == "bootstrap":
        return bootstrap(d, recipe, B, alpha, seed, stratified, threads)
    engine = MultiEstimator(d, [recipe])
    vals, errs = engine.evaluate(full=True)
    if errs[0] is not None:
        raise FitError(errs[0])
    est = float(vals[0])
    fits = engine.fits_for(0)
    if method == "plugin":
        if recipe.estimator != "dr":
            raise InferenceError("the EIF plug-in standard error is defined for the dr estimator only")
        se = plugin_se(eif_values(d, fits.mu, fits.pi_s, fits.pi_a, est))
    else:
        se = sandwich_se(d, build_stacked_system(d, recipe, fits, est))
    z = z_value(alpha)
    conv = {role: getattr(fits, role).converged for role in ("mu", "pi_s", "pi_a") if getattr(fits, role)}
    return EstimateResult(est, se, (est - z * se, est + z * se), method, recipe.estimator, d.n, d.n11,
                          {"converged": conv})
