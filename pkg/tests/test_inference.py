import math

import numpy as np
import pytest

from helpers import random_dataset
from placebo.data import Dataset
from placebo.design import DesignSpec, design_matrix
from placebo.estimators import EifVector, MultiEstimator, Recipe, eif_values, run_recipe
from placebo.inference import (
    BootstrapUnstable,
    InferenceError,
    bootstrap,
    bread,
    build_stacked_system,
    estimate,
    percentile,
    plugin_se,
    recipe_statistic,
    replicate,
    resample_weights,
    sandwich_se,
    summarize_replicates,
)
from placebo.rng import stream
from placebo.sim import MU_CORRECT, PI_A_CORRECT, PI_S_CORRECT, ScenarioConfig, generate

DR = Recipe("dr", DesignSpec.parse("1 + X1 + X2 + S + A + S:A"), DesignSpec.parse("1 + X1", "logit"),
            DesignSpec.parse("1 + X2 + S", "logit"))
DR_CORRECT = Recipe("dr", MU_CORRECT, PI_S_CORRECT, PI_A_CORRECT)
ALL_KINDS = [
    DR,
    Recipe("reg", DR.mu),
    Recipe("ipw", pi_s=DR.pi_s, pi_a=DR.pi_a),
    Recipe("ipw_stabilized", pi_s=DR.pi_s, pi_a=DR.pi_a),
    Recipe("reg_naive", DesignSpec.parse("1 + X1 + A")),
    Recipe("dr_naive", DesignSpec.parse("1 + X1 + A"), pi_a=DesignSpec.parse("1 + X2", "logit")),
]


def test_percentile_convention():
    vals = np.arange(100, 0, -1, dtype=float)
    assert percentile(vals, 0.025) == 3.0  # ceil(2.5) = 3rd smallest
    assert percentile(vals, 0.975) == 98.0
    assert percentile(vals, 0.5) == 50.0
    assert percentile([4.0, 1.0, 3.0], 0.0) == 1.0
    assert percentile([4.0, 1.0, 3.0], 1.0) == 4.0
    # an exact integer product q*m picks that order statistic, not the next one
    assert percentile(np.arange(1.0, 201.0), 0.025) == 5.0


def test_plugin_arithmetic():
    e = EifVector(np.array([3.0, -3.0, 0.0, 0.0]), 0.0, 0.25, np.ones(4))
    assert plugin_se(e) == pytest.approx(math.sqrt(4.5) / 2, abs=1e-15)
    assert plugin_se(EifVector(np.zeros(5), 0.0, 0.2, np.ones(5))) == 0.0


@pytest.mark.parametrize("recipe", ALL_KINDS, ids=lambda r: r.estimator)
def test_stacked_system_solved_at_estimate(recipe):
    d = random_dataset(np.random.default_rng(3), n=300)
    theta, fits = run_recipe(recipe, d)
    system = build_stacked_system(d, recipe, fits, theta)
    total = d.weights @ system.psi(system.gamma)
    assert np.max(np.abs(total)) <= 1e-6
    se = sandwich_se(d, system)
    assert 0 < se < 1


def test_zero_cross_sandwich_equals_plugin():
    d = random_dataset(np.random.default_rng(4), n=400)
    theta, fits = run_recipe(DR, d)
    system = build_stacked_system(d, DR, fits, theta)
    plug = plugin_se(eif_values(d, fits.mu, fits.pi_s, fits.pi_a, theta))
    assert sandwich_se(d, system, zero_cross=True) == pytest.approx(plug, abs=1e-6)


def fisher_block(d, fit):
    mat = design_matrix(fit.spec, d)
    p = 1 / (1 + np.exp(-(mat @ fit.coefficients)))
    return (mat * (d.weights * p * (1 - p))[:, None]).T @ mat / d.n


def test_fd_jacobian_matches_fisher_information():
    d, _ = generate(ScenarioConfig.scenario("I", n=1000, seed=12))
    theta, fits = run_recipe(DR_CORRECT, d)
    system = build_stacked_system(d, DR_CORRECT, fits, theta)
    amat = bread(system)
    for role in ("pi_s", "pi_a"):
        seg = system.segments[role]
        want = fisher_block(d, getattr(fits, role))
        got = amat[seg, seg]
        assert np.max(np.abs(got - want)) <= 1e-5 * np.max(np.abs(want))


def test_resample_weights():
    d = random_dataset(np.random.default_rng(5), n=120)
    w = resample_weights(d, stream(1, "t"))
    assert w.sum() == d.n_rows and np.all(w == np.round(w))
    ws = resample_weights(d, stream(1, "t"), stratified=True)
    for sv in (0, 1):
        for av in (0, 1):
            m = d.cell_mask(sv, av)
            assert ws[m].sum() == m.sum()


def test_weighted_resample_preserves_total():
    d = random_dataset(np.random.default_rng(5), n=50)
    wd = Dataset(d.y, d.a, d.s, d.x, d.covariate_names, weights=np.full(50, 3.0))
    assert resample_weights(wd, stream(2, "t")).sum() == 150


def test_bootstrap_deterministic_across_threads():
    d = random_dataset(np.random.default_rng(6), n=200)
    r1 = bootstrap(d, DR, B=60, seed=11)
    r2 = bootstrap(d, DR, B=60, seed=11, threads=3)
    assert (r1.se, r1.ci) == (r2.se, r2.ci)
    _, _, stat = recipe_statistic(d, DR)
    a = replicate(d, stat, 30, 11)
    b = replicate(d, stat, 30, 11, threads=4)
    assert a.tobytes() == b.tobytes()
    assert r1.ci[0] <= r1.estimate <= r1.ci[1]


def test_bootstrap_replicates_identical_for_cell_constant_data():
    y = np.repeat([5.0, 3.0, 2.0, 1.5], 12)
    s = np.repeat([1.0, 1.0, 0.0, 0.0], 12)
    a = np.repeat([1.0, 0.0, 1.0, 0.0], 12)
    d = Dataset(y, a, s, np.zeros((48, 1)), ("X1",))
    r = bootstrap(d, Recipe("reg", DesignSpec.parse("1 + S + A + S:A")), B=50, seed=1)
    assert r.se == pytest.approx(0.0, abs=1e-12)
    assert r.estimate == pytest.approx(1.5, abs=1e-12)


def test_bootstrap_unstable_when_a_cell_is_tiny():
    rng = np.random.default_rng(7)
    n = 200
    s = np.repeat([1.0, 0.0], n // 2)
    a = np.tile([1.0, 0.0], n // 2)
    a[(s == 0)] = 0.0
    a[-1] = 1.0  # a single S=0, A=1 row, absent from ~37% of resamples
    d = Dataset(rng.normal(size=n), a, s, rng.normal(size=(n, 1)), ("X1",))
    with pytest.raises(BootstrapUnstable, match="bootstrap unstable"):
        bootstrap(d, Recipe("reg", DesignSpec.parse("1 + S + A + S:A")), B=100, seed=0)


def test_failure_accounting():
    vals = np.r_[np.arange(95.0), np.full(5, np.nan)]
    se, ci, failed = summarize_replicates(vals, 0.05)
    assert failed == 5 and ci == (percentile(np.arange(95.0), 0.025), percentile(np.arange(95.0), 0.975))
    with pytest.raises(BootstrapUnstable):
        summarize_replicates(np.r_[np.arange(89.0), np.full(11, np.nan)], 0.05)


def test_estimate_interfaces():
    d = random_dataset(np.random.default_rng(8), n=300)
    for method in ("plugin", "sandwich"):
        r = estimate(d, DR, method)
        assert r.ci[0] <= r.estimate <= r.ci[1] and r.se > 0
        assert r.to_json()["n11"] == int(d.n11)
    with pytest.raises(InferenceError):
        estimate(d, ALL_KINDS[1], "plugin")
    with pytest.raises(ValueError):
        estimate(d, DR, "jackknife")
    with pytest.raises(ValueError):
        bootstrap(d, DR, B=10)


@pytest.mark.slow
def test_sandwich_agrees_with_plugin_over_replicates():
    ratios = []
    for r in range(200):
        d, _ = generate(ScenarioConfig.scenario("I", n=1000, seed=r))
        engine = MultiEstimator(d, [DR_CORRECT])
        vals, _ = engine.evaluate(full=True)
        fits = engine.fits_for(0)
        plug = plugin_se(eif_values(d, fits.mu, fits.pi_s, fits.pi_a, vals[0]))
        sand = sandwich_se(d, build_stacked_system(d, DR_CORRECT, fits, vals[0]))
        ratios.append(sand / plug)
    assert 0.85 <= float(np.median(ratios)) <= 1.15


@pytest.mark.slow
def test_plugin_se_scale_scenario_one():
    ses = []
    for r in range(500):
        d, _ = generate(ScenarioConfig.scenario("I", n=1000, seed=10_000 + r))
        ses.append(estimate(d, DR_CORRECT, "plugin").se)
    assert 0.40 <= float(np.median(ses)) <= 0.55
