import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowproc.duality import (
    ArityTooLarge,
    dual_moment_estimate,
    exact_first_moment,
    exact_second_moment,
    heat_flow,
    merge,
    pair_tensor,
    run_dual_sample,
)
from flowproc.model import AtomicMeasure, UnsupportedCoefficients, dirac, make_coefficients
from flowproc.particles import run_particles

X16 = np.linspace(-8, 8, 16)
ONE = lambda x: np.ones_like(x)
GAUSS = lambda x: np.exp(-np.asarray(x, float) ** 2)


def test_arity_one_has_no_jumps(bm11):
    x = np.linspace(-10, 10, 256)
    st_ = run_dual_sample(bm11, 1, GAUSS(x), 0.7, x, seed=1)
    assert st_.jump_times == [] and st_.exp_factor == 1.0 and st_.n == 1
    at = 2 * 0.7
    exact = np.exp(-(x**2) / (1 + 2 * at)) / math.sqrt(1 + 2 * at)
    np.testing.assert_allclose(st_.f, exact, atol=1e-10)


def test_arity_one_estimate_equals_first_moment(bm11):
    x = np.linspace(-10, 10, 256)
    mu = AtomicMeasure(np.array([[-0.5], [1.0]]), np.array([0.3, 0.7]))
    est = dual_moment_estimate(bm11, mu, 1, GAUSS(x), 0.7, x, 2, seed=1)
    assert est.estimate == pytest.approx(exact_first_moment(bm11, mu, GAUSS, 0.7), abs=1e-4)
    assert est.se == 0.0


@pytest.mark.parametrize("n0, rate", [(2, 1.0), (3, 3.0)])
def test_first_holding_time(bm11, n0, rate):
    f0 = np.ones((16,) * n0)
    holds = np.array([run_dual_sample(bm11, n0, f0, 50.0, X16, seed=2, replicate=r).jump_times[0]
                      for r in range(10_000)])
    assert holds.mean() == pytest.approx(1 / rate, rel=0.03)


def test_second_moment_of_mass_is_two(bm11):
    est = dual_moment_estimate(bm11, dirac(0.0), 2, np.ones((16, 16)), 1.0, X16, 10_000, seed=3)
    assert abs(est.estimate - 2.0) <= 3 * est.se


def test_time_zero_is_product(bm11):
    x = np.linspace(-5, 5, 101)
    mu = AtomicMeasure(np.array([[-1.0], [0.5]]), np.array([0.4, 1.2]))
    st_ = run_dual_sample(bm11, 2, pair_tensor(GAUSS, GAUSS, x=x), 0.0, x, seed=1)
    direct = sum(m * GAUSS(p[0]) for p, m in zip(mu.positions, mu.masses)) ** 2
    est = dual_moment_estimate(bm11, mu, 2, pair_tensor(GAUSS, GAUSS, x=x), 0.0, x, 2, seed=1)
    assert st_.n == 2 and est.estimate == pytest.approx(direct, rel=1e-12)


def test_arity_limit(bm11):
    with pytest.raises(ArityTooLarge):
        run_dual_sample(bm11, 5, np.ones((4,) * 5), 1.0, np.linspace(0, 1, 4), seed=1)


def test_constant_coefficients_required():
    c = make_coefficients({"b": {"family": "sine", "amplitude": 0.3}, "sigma2": 1.0})
    with pytest.raises(UnsupportedCoefficients):
        heat_flow(c, np.ones(8), np.linspace(0, 1, 8), 0.1)


def test_exact_first_moment_examples(bm11):
    mu = dirac(0.0)
    assert exact_first_moment(bm11, mu, ONE, 1.0) == pytest.approx(1.0, abs=1e-10)
    assert exact_first_moment(bm11, mu, lambda y: y**2, 1.0) == pytest.approx(2.0, abs=1e-4)
    step = lambda y: (np.asarray(y) >= 0).astype(float)
    assert exact_first_moment(bm11, mu, step, 1.0, breakpoints=[0.0]) == pytest.approx(0.5, abs=1e-8)


def test_exact_second_moment_examples(bm11):
    v = exact_second_moment(bm11, dirac(0.0), ONE, ONE, 1.0)
    assert v["mp"] == pytest.approx(2.0, abs=1e-8)
    assert v["factor2"] == pytest.approx(3.0, abs=1e-8)
    mu = AtomicMeasure(np.array([[0.0], [1.0]]), np.array([0.5, 2.0]))
    v0 = exact_second_moment(bm11, mu, GAUSS, ONE, 0.0)
    prod = (0.5 * GAUSS(0.0) + 2.0 * GAUSS(1.0)) * 2.5
    assert v0["mp"] == pytest.approx(prod) and v0["factor2"] == pytest.approx(prod)


def test_exact_second_moment_matches_particles(private_only):
    run = run_particles(private_only, dirac(0.0), 0.01, 1e-3, [0.5], 2000, seed=4, phis=[GAUSS])
    sq = run.functionals[:, 0, 0] ** 2
    exact = exact_second_moment(private_only, dirac(0.0), GAUSS, GAUSS, 0.5)["mp"]
    assert abs(sq.mean() - exact) <= 3 * sq.std(ddof=1) / math.sqrt(sq.size)


def test_dual_matches_particles_gaussian(bm11):
    x = np.linspace(-10, 10, 96)
    dual = dual_moment_estimate(bm11, dirac(0.0), 2, pair_tensor(GAUSS, GAUSS, x=x), 0.5, x, 10_000, seed=5)
    run = run_particles(bm11, dirac(0.0), 0.01, 1e-3, [0.5], 2000, seed=5, phis=[GAUSS])
    sq = run.functionals[:, 0, 0] ** 2
    se = math.hypot(dual.se, sq.std(ddof=1) / math.sqrt(sq.size))
    assert abs(dual.estimate - sq.mean()) <= 3 * se
    exact = exact_second_moment(bm11, dirac(0.0), GAUSS, GAUSS, 0.5)["mp"]
    assert abs(dual.estimate - exact) <= 3 * dual.se


def test_merge_symmetric_polynomial():
    x = np.linspace(-1, 1, 7)
    a, b, c = np.meshgrid(x, x, x, indexing="ij")
    f = a * b * c + a**2 + b**2 + c**2
    g = merge(f, 0, 2)  # arguments 0 and 2 -> last axis; remaining argument first
    other, y = np.meshgrid(x, x, indexing="ij")
    np.testing.assert_array_equal(g, y * other * y + y**2 + other**2 + y**2)


def test_moments_finite_up_to_four(bm11):
    x = np.linspace(-6, 6, 12)
    est = dual_moment_estimate(bm11, dirac(0.0), 4, np.ones((12,) * 4), 1.0, x, 200, seed=6)
    assert math.isfinite(est.estimate) and math.isfinite(est.se)


@given(st.integers(1, 4), st.floats(0.0, 1.0), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_chain_invariants(n0, t, r):
    c = make_coefficients({"b": 0.3, "sigma1": 0.8, "sigma2": 1.0})
    x = np.linspace(-6, 6, 8)
    f0 = pair_tensor(*([GAUSS] * n0), x=x)
    st_ = run_dual_sample(c, n0, f0, t, x, seed=7, replicate=r)
    assert st_.n == n0 - len(st_.jump_times) >= 1
    assert all(a < b for a, b in zip(st_.jump_times, st_.jump_times[1:]))
    assert st_.f.ndim == st_.n
    assert st_.f.min() >= -1e-12 * f0.max()
    assert st_.exp_factor >= 1.0
