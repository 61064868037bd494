import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from battpinn import kernels

BACKENDS = [kernels.NUMPY] + ([kernels.NUMBA] if kernels.HAVE_NUMBA else [])
floats = st.floats(-1e3, 1e3, allow_nan=False)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_trailing_mean_definition(backend):
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    np.testing.assert_allclose(backend.trailing_mean(x, 3), [1.0, 1.5, 2.0, 3.0, 4.0])


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_centered_mean_keeps_linear_sequences(backend):
    x = 0.3 * np.arange(12.0) - 2.0
    np.testing.assert_allclose(backend.centered_mean(x, 5), x, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_gradient_exact_for_quadratics(backend):
    x = np.sort(np.random.default_rng(0).uniform(0, 1, 30))
    y = 2.0 * x**2 - x + 1
    np.testing.assert_allclose(backend.gradient(y, x), 4.0 * x - 1.0, atol=1e-9)


@pytest.mark.parametrize("backend", BACKENDS, ids=lambda b: b.name)
def test_quadratic_trend_recovers_coefficients(backend):
    omega, b = 2e-3, -1e-4
    q = [1.0]
    for _ in range(200):
        q.append(q[-1] - omega * q[-1] ** 2 + b)
    w, bb, resid = backend.quadratic_trend(np.array(q))
    assert w == pytest.approx(omega, rel=1e-9)
    assert bb == pytest.approx(b, rel=1e-6)
    assert resid < 1e-12


def test_quadratic_trend_degenerate_input():
    assert all(np.isnan(kernels.quadratic_trend(np.array([1.0, 0.9]))))


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(3, 60), elements=floats), st.integers(1, 12))
def test_backends_agree_on_moving_averages(x, window):
    np.testing.assert_allclose(kernels.NUMBA.trailing_mean(x, window),
                               kernels.NUMPY.trailing_mean(x, window), rtol=1e-12, atol=1e-9)
    w = 2 * (window // 2) + 1
    np.testing.assert_allclose(kernels.NUMBA.centered_mean(x, w),
                               kernels.NUMPY.centered_mean(x, w), rtol=1e-12, atol=1e-9)


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree_on_remaining_kernels():
    rng = np.random.default_rng(5)
    x = np.cumsum(rng.uniform(0.01, 1.0, 40))
    y = np.sin(x)
    np.testing.assert_allclose(kernels.NUMBA.gradient(y, x), kernels.NUMPY.gradient(y, x),
                               rtol=1e-12, atol=1e-12)
    q = 1.1 - np.cumsum(rng.uniform(0, 1e-3, 300))
    np.testing.assert_allclose(kernels.NUMBA.quadratic_trend(q), kernels.NUMPY.quadratic_trend(q),
                               rtol=1e-9)
    for kind, params in [(kernels.RATE_LOGISTIC, [0.01, 0.5, 0.05]), (kernels.RATE_EXP, [0.003]),
                         (kernels.RATE_XU, [0.004]), (kernels.RATE_ZERO, [0.0])]:
        p = np.array(params)
        np.testing.assert_allclose(kernels.NUMBA.rk4_builtin(kind, p, 0.1, 0.5, 400),
                                   kernels.NUMPY.rk4_builtin(kind, p, 0.1, 0.5, 400), rtol=1e-13)
    t = np.arange(1.0, 200.0)
    theta = np.array([2e-4, 1e-3, 0.4, 4e-3, 1.0, 2e-6])
    np.testing.assert_allclose(kernels.NUMBA.sp_rates(t, theta), kernels.NUMPY.sp_rates(t, theta),
                               rtol=1e-12)
    states = []
    for backend in BACKENDS:
        p, m, v = np.ones(7), np.zeros(7), np.zeros(7)
        g = np.linspace(-1, 1, 7)
        for step in range(1, 4):
            backend.adam(p, g, m, v, 1e-2, 0.9, 0.999, 1e-8, step)
        states.append(p)
    np.testing.assert_allclose(states[0], states[1], rtol=1e-14)


def test_env_flag_selects_numpy_backend():
    code = "from battpinn import kernels; print(kernels.ACTIVE.name)"
    env = dict(os.environ, BATTPINN_USE_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True,
                         check=True)
    assert out.stdout.strip() == "numpy"


def test_adam_update_handles_zero_dim_parameters():
    p, m, v = np.array(1.0), np.array(0.0), np.array(0.0)
    kernels.adam_update(p, np.array(2.0), m, v, 0.1, 0.9, 0.999, 1e-8, 1)
    assert float(p) == pytest.approx(0.9, abs=1e-7)
