import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from placebo.data import Dataset
from placebo.design import DesignSpec
from placebo.nuisance import fit_ols
from placebo.sim import (
    GRID,
    PI_A_CORRECT,
    SCENARIOS,
    ScenarioConfig,
    generate,
    metrics,
    misspecified,
    run_study,
    trim_counts,
    trimmed_mean,
)

BIG = 1_000_000


@pytest.fixture(scope="module")
def big_d1():
    return generate(ScenarioConfig.scenario("I", n=BIG, seed=123))


def test_selection_follows_x3(big_d1):
    d, _ = big_d1
    x3 = d.x[:, 2]
    assert d.s[x3 > 1.5].mean() > d.s[x3 < -1.5].mean() + 0.5


def test_u_given_a_under_d1(big_d1):
    d, lat = big_d1
    assert lat.u[d.a == 1].mean() == pytest.approx(0.8, abs=0.003)
    assert lat.u[d.a == 0].mean() == pytest.approx(0.2, abs=0.003)


@pytest.mark.parametrize("scenario", ["I", "III"])
def test_effect_mean_in_primary_sample(scenario):
    n = 200_000
    d, lat = generate(ScenarioConfig.scenario(scenario, n=n, seed=9))
    eff = (lat.y1 - lat.y0)[d.s == 1]
    assert abs(eff.mean() - 1.0) <= 3 / math.sqrt(n)
    np.testing.assert_array_equal((lat.y1 - lat.y0)[d.s == 0], 0.0)
    if scenario == "III":
        assert eff.var() == pytest.approx(0.5, abs=0.02)


def test_observed_outcome_is_consistent():
    d, lat = generate(ScenarioConfig.scenario("VIII", n=500, seed=2))
    np.testing.assert_array_equal(d.y, np.where(d.a == 1, lat.y1, lat.y0))


@pytest.mark.parametrize("scenario", ["I", "II", "IV", "VII"])
def test_parallel_trends_hold_by_construction(scenario):
    d, lat = generate(ScenarioConfig.scenario(scenario, n=BIG, seed=31))
    # G = sign(X1 + X2) makes the conditional mean of Y(0) exactly linear under d2 too
    g = np.where(d.x[:, 0] + d.x[:, 1] >= 0, 1.0, -1.0)
    spec = DesignSpec.parse("1 + X1 + X2 + X3 + X2:X3 + G + A")
    y0 = Dataset(lat.y0, d.a, d.s, np.column_stack([d.x, g]), d.covariate_names + ("G",))
    gaps = [fit_ols(y0, spec, stratum=s).coefficients[-1] for s in (1, 0)]
    # E{Y(0) | S, A=1, X} - E{Y(0) | S, A=0, X} is 2 * 0.6 in both samples
    assert abs(gaps[0] - gaps[1]) <= 0.02
    assert gaps[0] == pytest.approx(1.2, abs=0.02)


def test_u_probabilities_under_d2():
    d, lat = generate(ScenarioConfig.scenario("II", n=50_000, seed=4))
    x = d.x[:, 0] + d.x[:, 1]
    pu_high = lat.u[(d.a == 0) & (x >= 0)].mean()
    pu_low = lat.u[(d.a == 0) & (x < 0)].mean()
    assert pu_high == pytest.approx(0.4, abs=0.02) and pu_low == pytest.approx(0.0, abs=1e-12)


def test_generation_is_deterministic():
    c = ScenarioConfig.scenario("V", n=300, seed=77)
    a, b = generate(c)[0], generate(c)[0]
    for attr in ("y", "a", "s", "x"):
        assert getattr(a, attr).tobytes() == getattr(b, attr).tobytes()
    other = generate(ScenarioConfig.scenario("V", n=300, seed=78))[0]
    assert not np.array_equal(a.y, other.y)


def test_config_validation():
    with pytest.raises(ValueError):
        ScenarioConfig(n=10)
    with pytest.raises(ValueError):
        ScenarioConfig(factor_d="d3")
    assert len(SCENARIOS) == 8


def test_grid_shape():
    assert len(GRID) == 9
    assert str(misspecified(PI_A_CORRECT)) == "1 + X1 + X2 + X3 + S"


# --------------------------------------------------------------------------- metrics


def test_trim_counts():
    assert trim_counts(500) == (2, 3)
    assert trim_counts(200) == (1, 1)
    assert trim_counts(100) == (0, 1)
    assert trim_counts(100, 0.0) == (0, 0)


def test_constant_replicates():
    m = metrics(np.full(300, 1.25), np.full(300, 0.2), np.ones(300, bool))
    assert m.bias == 0.25 and m.median_se == 0.2 and m.coverage == 1.0
    assert m.reps_used == 300 and m.trimmed == 3


def test_outlier_is_trimmed():
    rng = np.random.default_rng(0)
    est = rng.normal(1, 0.1, size=200)
    est[17] = 100.0
    b1 = metrics(est, np.ones(200), np.ones(200, bool)).bias
    est[17] = 1000.0
    b2 = metrics(est, np.ones(200), np.ones(200, bool)).bias
    assert abs(b1 - b2) < 1e-6


@given(st.lists(st.floats(-1e3, 1e3), min_size=100, max_size=400))
def test_trimmed_mean_matches_sorting_oracle(values):
    m = len(values)
    k = math.ceil(0.01 * m - 1e-9)
    lo, hi = k // 2, k - k // 2
    kept = sorted(values)[lo:m - hi]
    assert trimmed_mean(values) == pytest.approx(sum(kept) / len(kept), rel=1e-12, abs=1e-9)


def test_metrics_skip_nan():
    est = np.r_[np.full(99, 1.0), np.nan]
    m = metrics(est, np.r_[np.full(99, 0.5), np.nan], np.ones(100, bool))
    assert m.reps_used == 99 and m.bias == 0.0


# --------------------------------------------------------------------------- study


def test_study_is_deterministic_across_threads():
    r1 = run_study(["I", "VI"], reps=4, n=200, boot_b=20, seed=5, threads=1)
    r2 = run_study(["I", "VI"], reps=4, n=200, boot_b=20, seed=5, threads=2)
    assert r1.to_csv() == r2.to_csv()
    assert r1.raw_csv() == r2.raw_csv()
    assert len(r1.rows) == 18
    assert r1.to_csv().splitlines()[0] == "scenario,estimator,spec,bias,median_se,coverage,reps_used,skipped"
    table = r1.table()
    assert "Scenario I (d1, e1, f1)" in table and "Scenario VI (d2, e1, f2)" in table
    assert r1.row("VI", "dr", "pi correct")["reps_used"] <= 4
