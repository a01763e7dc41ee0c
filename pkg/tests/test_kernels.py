import os
import subprocess
import sys

import numpy as np
import pytest

from placebo import _kernels_py, kernels


def problem(seed, n=400, p=4):
    rng = np.random.default_rng(seed)
    x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    z = (rng.random(n) < 1 / (1 + np.exp(-x @ np.linspace(0.5, -0.5, p)))).astype(float)
    w = rng.integers(1, 3, size=n).astype(float)
    return np.ascontiguousarray(x), z, w


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="extension not built")
@pytest.mark.parametrize("seed", range(5))
def test_compiled_matches_python(seed):
    from placebo import _kernels

    x, z, w = problem(seed)
    b0 = np.zeros(x.shape[1])
    c = _kernels.irls_logit(x, z, w, b0, 100, 1e-10)
    p = _kernels_py.irls_logit(x, z, w, b0, 100, 1e-10)
    np.testing.assert_allclose(c[0], p[0], rtol=1e-9, atol=1e-11)
    assert c[3] <= 1e-8 and p[3] <= 1e-8
    y = x @ np.arange(x.shape[1]) + np.sin(np.arange(x.shape[0]))
    np.testing.assert_allclose(_kernels.wls(x, y, w), _kernels_py.wls(x, y, w), rtol=1e-11, atol=1e-12)


def test_python_wls_solves_normal_equations():
    x, _, w = problem(9)
    y = np.cos(np.arange(x.shape[0]))
    beta = _kernels_py.wls(x, y, w)
    np.testing.assert_allclose(x.T @ (w * (y - x @ beta)), 0.0, atol=1e-10)


def test_singular_wls_returns_none():
    x = np.ones((5, 2))
    assert kernels.wls(x, np.arange(5.0), np.ones(5)) is None
    assert _kernels_py.wls(x, np.arange(5.0), np.ones(5)) is None


def test_pure_python_switch():
    env = dict(os.environ, PLACEBO_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from placebo import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
