import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowproc.loglaplace import (
    MP_QUADRATIC,
    NegativeTerminalData,
    StabilityViolation,
    SupportOutsideGrid,
    conditional_laplace,
    plateau,
    solve_backward,
)
from flowproc.model import AtomicMeasure, dirac, make_coefficients
from flowproc.noise import make_noise_path

GRID = (-8.0, 8.0, 0.02)


@pytest.fixture
def env():
    return make_coefficients({"b": 0.0, "sigma1": 0.5, "sigma2": 1.0})


def test_zero_terminal_data(env):
    w = make_noise_path(1, 1e-3, 500)
    sol = solve_backward(env, lambda x: np.zeros_like(x), 0.5, w, GRID)
    assert np.all(sol.y == 0)
    assert conditional_laplace(dirac(0.0), sol) == 1.0


def test_terminal_row_is_f(env):
    w = make_noise_path(1, 1e-3, 500)
    f = plateau(0.8, 1.0, 0.5)
    sol = solve_backward(env, f, 0.5, w, GRID)
    np.testing.assert_array_equal(sol.y[-1], f(sol.x))
    assert np.all(sol.y >= 0)


@pytest.mark.parametrize("q, expected", [(1.0, 0.5), (MP_QUADRATIC, 2 / 3)])
def test_riccati_plateau(private_only, q, expected):
    w = make_noise_path(2, 1e-3, 1000)
    sol = solve_backward(private_only, plateau(1.0, 6.0, 0.5), 1.0, w, GRID, quad_coeff=q, keep="final")
    centre = sol.y0[np.argmin(np.abs(sol.x))]
    assert centre == pytest.approx(expected, rel=0.02)
    assert conditional_laplace(dirac(0.0), sol) == pytest.approx(math.exp(-expected), rel=0.02)


def test_sigma1_zero_is_environment_free(private_only):
    f = plateau(1.0, 1.0, 0.5)
    a = solve_backward(private_only, f, 0.5, make_noise_path(3, 1e-3, 500), GRID)
    b = solve_backward(private_only, f, 0.5, make_noise_path(4, 1e-3, 500), GRID)
    assert a.y.tobytes() == b.y.tobytes()


def test_errors(env):
    w = make_noise_path(1, 1e-3, 500)
    with pytest.raises(NegativeTerminalData):
        solve_backward(env, lambda x: -plateau()(x), 0.5, w, GRID)
    with pytest.raises(SupportOutsideGrid):
        solve_backward(env, lambda x: np.ones_like(x), 0.5, w, GRID)
    with pytest.raises(StabilityViolation):
        solve_backward(env, plateau(5000.0), 0.5, w, GRID)
    sol = solve_backward(env, plateau(), 0.5, w, GRID)
    with pytest.raises(SupportOutsideGrid):
        conditional_laplace(dirac(20.0), sol)


def _bump(centre, width, height):
    return lambda x: height * np.clip(1 - np.abs(x - centre) / width, 0, None)


def test_monotone_in_terminal_data(env):
    """f1 <= f2 nodewise implies y1 <= y2 nodewise for one W; 100 random pairs."""
    rng = np.random.default_rng(0)
    grid = (-4.0, 4.0, 0.04)
    w = make_noise_path(5, 2e-3, 150)
    for _ in range(100):
        c, wd, h = rng.uniform(-1, 1), rng.uniform(0.3, 1.5), rng.uniform(0.1, 2.0)
        f1 = _bump(c, wd, h)
        extra = _bump(rng.uniform(-1, 1), rng.uniform(0.3, 1.5), rng.uniform(0.0, 1.0))
        f2 = lambda x, f1=f1, extra=extra: f1(x) + extra(x)
        y1 = solve_backward(env, f1, 0.3, w, grid, keep="final").y0
        y2 = solve_backward(env, f2, 0.3, w, grid, keep="final").y0
        assert np.all(y1 <= y2 + 1e-12)


@given(st.floats(0.0, 3.0), st.floats(0.1, 2.0), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_laplace_value_in_unit_interval(height, mass, seed):
    c = make_coefficients({"b": 0.2, "sigma1": 0.7, "sigma2": 1.0})
    w = make_noise_path(seed, 2e-3, 100)
    sol = solve_backward(c, plateau(height, 0.5, 0.5), 0.2, w, (-4.0, 4.0, 0.04), keep="final")
    v = conditional_laplace(AtomicMeasure(np.array([[-0.3], [0.4]]), np.array([mass, mass / 2])), sol)
    assert 0 < v <= 1
    assert np.all(sol.y0 >= 0)
