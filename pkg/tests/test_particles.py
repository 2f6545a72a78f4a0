import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowproc.model import AtomicMeasure, dirac, make_coefficients
from flowproc.noise import make_noise_path, replicate_seed
from flowproc.particles import (
    ParticlePopulation,
    PopulationExplosion,
    StepTooLarge,
    advance,
    empirical_measure,
    init_population,
    integrate,
    run_particles,
    step_population,
)


def test_init_example():
    pop = init_population(dirac(0.0), 0.005, seed=1)
    assert pop.per_particle_mass == 0.01
    assert np.all(pop.positions == 0)
    assert np.all(pop.residual > 0)


def test_init_zero_measure():
    pop = init_population(AtomicMeasure.zero(), 0.01, seed=1)
    assert pop.size == 0
    assert empirical_measure(pop).total_mass == 0


def test_init_count_is_poisson():
    counts = np.array([init_population(dirac(0.0), 0.01, replicate_seed(3, r)).size for r in range(1000)])
    assert abs(counts.mean() - 50) <= 3 * math.sqrt(50 / 1000)
    assert counts.var() == pytest.approx(50, rel=0.15)


def test_lifetimes_have_mean_2h():
    pop = init_population(dirac(0.0, 100.0), 0.01, seed=2)
    assert pop.residual.mean() == pytest.approx(0.02, rel=0.05)


def test_deterministic_drift():
    # the noiseless model is not elliptic, so switch sigma2 off after validation
    c = replace(make_coefficients({"b": 1.0, "sigma1": 0.0, "sigma2": 1.0}), s2=np.zeros((1, 1)))
    pop = init_population(dirac(0.0, 1.0), 1.0, seed=4)
    w = make_noise_path(0, 0.01, 10)
    nxt = step_population(pop, c, w, 0.01)
    np.testing.assert_allclose(nxt.positions[: min(nxt.size, pop.size)], 0.01, rtol=1e-12)


def test_step_too_large(bm11):
    pop = init_population(dirac(0.0), 0.01, seed=1)
    with pytest.raises(StepTooLarge):
        step_population(pop, bm11, make_noise_path(0, 0.002, 10), 0.002)


def test_population_cap(bm11):
    pop = init_population(dirac(0.0, 5.0), 0.01, seed=1)
    with pytest.raises(PopulationExplosion):
        advance(pop, bm11, make_noise_path(0, 1e-3, 100), 1e-3, 100, cap=10)


def test_empirical_measure_mass():
    pop = ParticlePopulation(np.zeros((3, 1)), np.ones(3), np.arange(3, dtype=np.uint64), 0.5, key=0)
    m = empirical_measure(pop)
    assert m.total_mass == 3.0 == pop.total_mass


def test_second_moment_of_x(private_only):
    run = run_particles(private_only, dirac(0.0), 0.01, 1e-3, [1.0], 1000, seed=5, phis=[lambda x: x**2])
    v = run.functionals[:, 0, 0]
    assert abs(v.mean() - 1.0) <= 3 * v.std(ddof=1) / math.sqrt(v.size)


def test_offspring_mean_is_one(bm11):
    """Over a short horizon the expected mass is unchanged; per-death offspring mean is 1."""
    run = run_particles(bm11, dirac(0.0), 0.01, 1e-3, [0.05], 2000, seed=6)
    m = run.mass[:, 0]
    assert abs(m.mean() - 1.0) <= 3 * m.std(ddof=1) / math.sqrt(m.size)


def test_replicates_are_reproducible_and_independent_of_batch(bm11):
    a = run_particles(bm11, dirac(0.0), 0.01, 1e-3, [0.2], 6, seed=7, phis=[lambda x: x])
    b = run_particles(bm11, dirac(0.0), 0.01, 1e-3, [0.2], 3, seed=7, phis=[lambda x: x], replicate_offset=3)
    np.testing.assert_array_equal(a.functionals[3:], b.functionals)
    np.testing.assert_array_equal(a.counts[3:], b.counts)


def test_shared_environment_correlates_populations():
    R = 500
    for s1, expect_positive in ((1.0, True), (0.0, False)):
        c = make_coefficients({"b": 0.0, "sigma1": s1, "sigma2": 1.0})
        paths = [make_noise_path(replicate_seed(100, r), 1e-3, 500) for r in range(R)]
        x = lambda v: v
        a = run_particles(c, dirac(0.0, 2.0), 0.02, 1e-3, [0.5], R, seed=1, phis=[x], env_paths=paths)
        b = run_particles(c, dirac(0.0, 2.0), 0.02, 1e-3, [0.5], R, seed=2, phis=[x], env_paths=paths)
        rho = np.corrcoef(a.functionals[:, 0, 0], b.functionals[:, 0, 0])[0, 1]
        if expect_positive:
            assert rho > 3 / math.sqrt(R)
        else:
            assert abs(rho) <= 3 / math.sqrt(R)


def test_refinement_consistency(bm11):
    phi = lambda x: np.exp(-x * x)
    runs = [run_particles(bm11, dirac(0.0), 0.02, dt, [0.5], 1000, seed=8, phis=[phi]) for dt in (2e-3, 1e-3)]
    m = [r.functionals[:, 0, 0] for r in runs]
    se = math.hypot(*(v.std(ddof=1) / math.sqrt(v.size) for v in m))
    assert abs(m[0].mean() - m[1].mean()) <= 3 * se


def test_integrate_examples():
    assert integrate(dirac(0.0, 2.0), lambda x: x**2) == 0.0
    m = AtomicMeasure(np.array([[-1.0], [1.0]]), np.ones(2))
    assert integrate(m, lambda x: x) == 0.0
    assert integrate(m, lambda x: np.ones_like(x)) == m.total_mass


@given(st.integers(0, 2**32), st.floats(0.005, 0.1), st.floats(0.0, 3.0))
@settings(max_examples=30, deadline=None)
def test_population_invariants(seed, h, mass):
    c = make_coefficients({"b": 0.3, "sigma1": 0.5, "sigma2": 1.0})
    pop = init_population(dirac(0.0, mass), h, seed)
    dt = h / 10
    pop = advance(pop, c, make_noise_path(seed, dt, 20), dt, 20)
    assert np.all(pop.residual > 0)
    assert pop.per_particle_mass == 2 * h
    assert empirical_measure(pop).total_mass == pytest.approx(2 * h * pop.size, rel=1e-12)
    assert len(set(pop.ids.tolist())) == pop.size
