"""Shared test data and fit builders."""

import numpy as np

from placebo.data import Dataset
from placebo.nuisance import GlmFit

# 10 rows, 2 covariates, every (S, A) cell populated
TINY_Y = [2.1, 3.4, 0.7, 1.9, 4.2, 2.8, 0.3, 1.1, 3.3, 2.6]
TINY_A = [1, 1, 0, 0, 1, 0, 1, 0, 1, 0]
TINY_S = [1, 1, 1, 1, 0, 0, 0, 0, 1, 0]
TINY_X = [[0.5, -1.0], [1.2, 0.3], [-0.4, 0.8], [0.0, -0.6], [0.9, 1.1],
          [-1.3, 0.2], [0.4, -0.7], [1.6, -0.1], [-0.2, 0.5], [0.7, 0.9]]
NAMES = ("X1", "X2")


def tiny_dataset():
    return Dataset(np.array(TINY_Y), np.array(TINY_A, float), np.array(TINY_S, float), np.array(TINY_X), NAMES)


def make_fit(spec, coef, response="y", stratum=None, names=NAMES):
    """A fit with supplied coefficients, skipping estimation."""
    return GlmFit(spec, response, np.asarray(coef, dtype=float), True, 0, tuple(names), stratum)


def coef_pairs(spec, coef):
    return list(zip(spec.names, coef))


def random_dataset(rng, n=200, p=2, effect=1.0):
    x = rng.standard_normal((n, p))
    s = (rng.random(n) < 1 / (1 + np.exp(-0.5 * x[:, 0]))).astype(float)
    a = (rng.random(n) < 1 / (1 + np.exp(-0.3 * x[:, -1] + 0.2 * s))).astype(float)
    y = x @ np.linspace(1, -1, p) + 0.5 * a + effect * s * a + rng.standard_normal(n)
    names = tuple(f"X{j + 1}" for j in range(p))
    return Dataset(y, a, s, x, names)


# (criterion number, passed, detail) filled by the acceptance suite, printed at session end
ACCEPTANCE = []
