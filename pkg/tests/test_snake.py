import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flowproc.model import AtomicMeasure, dirac, make_coefficients
from flowproc.noise import make_noise_path, replicate_seed
from flowproc.particles import run_particles
from flowproc.snake import (
    InsufficientEnvironmentPath,
    build_forest,
    excursions_above,
    level_local_time,
    run_snake,
    simulate_lifetime,
    snake_measure,
    support_diameter,
    tip_path,
)

DS = 1e-5


def _paths(n, h_cap=0.3, ds=DS, seed=0):
    return [simulate_lifetime(replicate_seed(seed, r), ds, horizon=50.0, level_cap=h_cap) for r in range(n)]


@pytest.fixture(scope="module")
def paths():
    return _paths(2000)


def test_lifetime_invariants(paths):
    for p in paths[:200]:
        assert np.all(p.zeta >= 0)
        assert np.all(np.diff(p.local_time_zero) >= 0)
        assert not p.horizon_reached
        k = p.tau_index
        assert p.local_time_zero[k] >= 1.0 > p.local_time_zero[k - 1]


def test_horizon_is_soft():
    p = simulate_lifetime(1, 1e-4, horizon=1e-3)
    assert p.horizon_reached and p.zeta.shape[0] == 11


def test_tau_tail_matches_levy():
    """Local time at 0 up to s is distributed as 2 sup(-B) ~ 2 |B_s|, so P(tau > 1) = P(|B_1| < 1/2)."""
    n = 2000
    ds = 1e-5
    survived = sum(simulate_lifetime(replicate_seed(5, r), ds, horizon=1.0).horizon_reached for r in range(n))
    target = 2 * stats.norm.cdf(0.5) - 1
    assert target == pytest.approx(0.3829, abs=1e-4)
    assert abs(survived / n - target) <= 0.03


def test_empty_above_max(paths):
    p = paths[0]
    assert excursions_above(p, float(p.zeta.max()) + 0.01, 0.05) == []
    assert level_local_time(p, float(p.zeta.max()) + 0.01, 0.05) == 0.0


def test_excursions_are_disjoint_ordered_and_high(paths):
    h = 0.05
    for p in paths[:50]:
        ex = excursions_above(p, 0.1, h, corrected=False)
        for a, b in zip(ex, ex[1:]):
            assert a.end < b.start
        for e in ex:
            assert e.height > h
            assert np.all(p.zeta[e.start: e.end] > 0.1)


def test_count_is_monotone_in_h(paths):
    for p in paths[:100]:
        counts = [len(excursions_above(p, 0.0, h)) for h in (0.02, 0.05, 0.1)]
        assert counts[0] >= counts[1] >= counts[2]


def test_level_zero_count_matches_excursion_measure(paths):
    h = 0.1
    mean = np.mean([len(excursions_above(p, 0.0, h)) for p in paths])
    assert mean == pytest.approx(1 / (2 * h), rel=0.10)


def test_local_time_at_zero(paths):
    v = np.array([level_local_time(p, 0.0, 0.05) for p in paths])
    assert v.mean() == pytest.approx(1.0, rel=0.10)


def test_local_time_variance_shrinks_with_h(paths):
    v_small = np.var([level_local_time(p, 0.0, 0.025) for p in paths])
    v_big = np.var([level_local_time(p, 0.0, 0.1) for p in paths])
    assert v_small <= v_big


def test_support_diameter_examples():
    assert support_diameter(dirac(1.0)) == 0.0
    assert support_diameter(AtomicMeasure(np.array([[0.0], [3.0]]), np.ones(2))) == 3.0
    pts = np.random.default_rng(0).normal(size=(500, 2))
    m = AtomicMeasure(pts, np.ones(500))
    brute = max(np.linalg.norm(a - b) for a in pts for b in pts)
    assert support_diameter(m) == pytest.approx(brute, rel=1e-12)


def test_snake_mass_at_level_zero(bm11):
    run = run_snake(bm11, dirac(0.0), [0.0], 0.05, 1.6e-5, 2000, seed=3)
    m = run.mass[:, 0]
    assert m.mean() == pytest.approx(1.0, rel=0.10)


def test_snake_gaussian_functional_matches_particles(bm11):
    phi = lambda x: np.exp(-x * x)
    R = 2000
    sn = run_snake(bm11, dirac(0.0), [0.5], 0.05, 1.6e-5, R, seed=4, phis=[phi]).functionals[:, 0, 0]
    pa = run_particles(bm11, dirac(0.0), 0.01, 1e-3, [0.5], R, seed=4, phis=[phi]).functionals[:, 0, 0]
    se = math.hypot(sn.std(ddof=1), pa.std(ddof=1)) / math.sqrt(R)
    assert abs(sn.mean() - pa.mean()) <= 3 * se


def _forest_2d(seed):
    c = make_coefficients({"dim": 2, "b": [0.0, 0.0], "sigma1": [[1.0, 0.0], [0.0, 1.0]],
                           "sigma2": [[1.0, 0.0], [0.0, 1.0]]})
    f = build_forest(seed, 1e-4, [0.2, 0.4], 0.05, level_cap=0.5)
    w = make_noise_path(seed, f.dl, int(math.ceil(0.5 / f.dl)) + 1, 2)
    return c, f, w


def test_atoms_lie_on_branch_curves():
    c, f, w = _forest_2d(11)
    mu = AtomicMeasure(np.zeros((1, 2)), np.ones(1))
    for t in f.levels:
        m = snake_measure(f, c, w, t, mu)
        q = int(np.argmin(np.abs(f.levels - t)))
        for node, x in zip(f.readouts[q], m.positions):
            path = tip_path(f, node, c, w, mu)
            assert np.any(np.all(path == x, axis=1))


def _lca_depth(f, u, v):
    anc = set()
    while u >= 0:
        anc.add(u)
        u = int(f.parent[u])
    while v >= 0 and v not in anc:
        v = int(f.parent[v])
    return -1 if v < 0 else int(f.depth[v])


@given(st.integers(0, 10_000))
@settings(max_examples=15, deadline=None)
def test_tree_consistency(seed):
    """Two tips agree bitwise on every level up to their common ancestor."""
    c, f, w = _forest_2d(seed)
    mu = AtomicMeasure(np.zeros((1, 2)), np.ones(1))
    nodes = f.readouts[1]
    for i in range(min(len(nodes), 6)):
        for j in range(i + 1, min(len(nodes), 6)):
            u, v = int(nodes[i]), int(nodes[j])
            k = _lca_depth(f, u, v)
            if k < 0:
                continue
            pu, pv = tip_path(f, u, c, w, mu), tip_path(f, v, c, w, mu)
            assert np.array_equal(pu[: k + 1], pv[: k + 1])


def test_short_environment_path_rejected(bm11):
    f = build_forest(2, 1e-4, [0.2], 0.05, level_cap=0.3)
    w = make_noise_path(2, f.dl, 3, 1)
    if f.counts[0]:
        with pytest.raises(InsufficientEnvironmentPath):
            snake_measure(f, bm11, w, 0.2)


def test_run_snake_is_deterministic(bm11):
    a = run_snake(bm11, dirac(0.0), [0.0, 0.1], 0.05, 1e-4, 5, seed=9)
    b = run_snake(bm11, dirac(0.0), [0.0, 0.1], 0.05, 1e-4, 5, seed=9)
    np.testing.assert_array_equal(a.counts, b.counts)
    np.testing.assert_array_equal(a.diameter, b.diameter)
