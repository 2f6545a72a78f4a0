"""Branching particle system in a common random environment.

Each particle carries mass ``2h`` and moves by

    dx = b(x) dt + sigma1(x) dW + sigma2(x) dB_i

with ``W`` shared by the whole population. A particle lives for an
exponential time of mean ``2h`` and is then replaced by 0 or 2 children at its
position, with probability 1/2 each. With these two choices the total mass is a
critical Feller diffusion whose quadratic variation is ``int <X_s, 1> ds``.

Deaths are detected on the time grid and take effect at the end of the step.
The clocks themselves are continuous: a child's lifetime starts at its
parent's death time, so branching within one step can cascade.

Randomness is addressed by particle id (private motion, lifetime, offspring)
and by replicate seed, so a replicate's trajectory does not depend on what else
is simulated alongside it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba
import numpy as np

from .model import AtomicMeasure, Coefficients, coefficient_table, integrate
from .noise import NoisePath, Stream, _mix, _normal, _uniform, derive_key, make_noise_path, replicate_seed

__all__ = [
    "StepTooLarge",
    "PopulationExplosion",
    "ParticlePopulation",
    "init_population",
    "step_population",
    "advance",
    "empirical_measure",
    "integrate",
    "ParticleRun",
    "run_particles",
]

DEFAULT_CAP = 1_000_000


class StepTooLarge(ValueError):
    pass


class PopulationExplosion(RuntimeError):
    pass


@dataclass
class ParticlePopulation:
    """State of one replicate.

    ``positions`` is ``(n, d)``; ``residual`` the remaining lifetimes (all
    positive); ``ids`` 64-bit particle ids. ``key`` roots every per-particle
    random stream, ``step`` counts steps taken since time 0.
    """

    positions: np.ndarray
    residual: np.ndarray
    ids: np.ndarray
    h: float
    key: int
    time: float = 0.0
    step: int = 0

    @property
    def size(self) -> int:
        return self.ids.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def per_particle_mass(self) -> float:
        return 2.0 * self.h

    @property
    def total_mass(self) -> float:
        return 2.0 * self.h * self.size


def _stream_keys(key: int) -> np.ndarray:
    return np.array([derive_key(key, s) for s in (Stream.PRIVATE, Stream.LIFETIME, Stream.OFFSPRING)],
                    dtype=np.uint64)


@numba.njit(cache=True, inline="always")
def _lifetime(key_life, pid, mean):
    return -mean * math.log(_uniform(key_life, pid))


@numba.njit(cache=True)
def _lifetimes(key_life, ids, mean):
    out = np.empty(ids.shape[0])
    for i in range(ids.shape[0]):
        out[i] = _lifetime(key_life, ids[i], mean)
    return out


def init_population(mu: AtomicMeasure, h: float, seed: int) -> ParticlePopulation:
    """Poisson population with intensity ``mu / (2h)``; every particle has mass ``2h``."""
    if not h > 0:
        raise ValueError("h must be positive")
    key = derive_key(seed)
    d = mu.dim
    mass = mu.total_mass
    if mass == 0 or mu.size == 0:
        return ParticlePopulation(np.zeros((0, d)), np.zeros(0), np.zeros(0, np.uint64), float(h), key)
    rng = np.random.Generator(np.random.PCG64(derive_key(seed, Stream.INITIAL)))
    n = int(rng.poisson(mass / (2 * h)))
    atoms = rng.choice(mu.size, size=n, p=mu.masses / mu.masses.sum())
    pos = mu.positions[atoms].copy()
    ids = np.arange(n, dtype=np.uint64)
    keys = _stream_keys(key)
    return ParticlePopulation(pos, _lifetimes(keys[1], ids, 2 * h), ids, float(h), key)


# ---------------------------------------------------------------------------
# kernel


@numba.njit(cache=True, inline="always")
def _fam(row, x):
    code = row[0]
    if code == 0.0:
        return row[1]
    if code == 1.0:
        return row[1] + row[2] * math.sin(row[3] * x + row[4])
    return row[1] + row[2] * math.tanh(row[3] * x)


@numba.njit(cache=True)
def _advance(pos, resid, ids, steps, step0, dt, h, dW, keys, b0, s1, s2, table, parametric, cap):
    """Move and branch for ``steps`` steps. Returns ``(pos, resid, ids, status)``;
    status 1 means the population passed ``cap``."""
    d = pos.shape[1]
    kp = keys[0]
    kl = keys[1]
    ko = keys[2]
    mean_life = 2.0 * h
    sq = math.sqrt(dt)
    z = np.empty(d)
    for k in range(steps):
        st = np.uint64(step0 + k)
        n = ids.shape[0]
        nb = 0
        for i in range(n):
            pk = _mix(kp ^ _mix(ids[i]))
            for j in range(d):
                z[j] = _normal(pk, st * np.uint64(d) + np.uint64(j)) * sq
            if parametric:
                x = pos[i, 0]
                pos[i, 0] = x + _fam(table[0], x) * dt + _fam(table[1], x) * dW[k, 0] + _fam(table[2], x) * z[0]
            else:
                for r in range(d):
                    acc = b0[r] * dt
                    for q in range(d):
                        acc += s1[r, q] * dW[k, q] + s2[r, q] * z[q]
                    pos[i, r] += acc
            resid[i] -= dt
            if resid[i] <= 0.0:
                nb += 1
        if nb == 0:
            continue
        # resolve deaths; a cascade within the step is followed through
        npos = np.empty((2 * n + 64, d))
        nres = np.empty(2 * n + 64)
        nids = np.empty(2 * n + 64, dtype=np.uint64)
        m = 0
        stack_id = np.empty(64, dtype=np.uint64)
        stack_res = np.empty(64)
        for i in range(n):
            if resid[i] > 0.0:
                if m >= npos.shape[0]:
                    npos, nres, nids = _grow(npos, nres, nids)
                npos[m] = pos[i]
                nres[m] = resid[i]
                nids[m] = ids[i]
                m += 1
                continue
            stack_id[0] = ids[i]
            stack_res[0] = resid[i]
            top = 1
            while top > 0:
                top -= 1
                pid = stack_id[top]
                over = stack_res[top]  # <= 0: time since death
                if _uniform(ko, pid) < 0.5:
                    continue
                for c in range(2):
                    cid = _mix(pid ^ _mix(np.uint64(c + 1)))
                    r = _lifetime(kl, cid, mean_life) + over
                    if r > 0.0:
                        if m >= npos.shape[0]:
                            npos, nres, nids = _grow(npos, nres, nids)
                        npos[m] = pos[i]
                        nres[m] = r
                        nids[m] = cid
                        m += 1
                    else:
                        if top >= stack_id.shape[0]:
                            stack_id = np.concatenate((stack_id, np.empty(top, dtype=np.uint64)))
                            stack_res = np.concatenate((stack_res, np.empty(top)))
                        stack_id[top] = cid
                        stack_res[top] = r
                        top += 1
        pos = npos[:m].copy()
        resid = nres[:m].copy()
        ids = nids[:m].copy()
        if m > cap:
            return pos, resid, ids, 1, k + 1
    return pos, resid, ids, 0, steps


@numba.njit(cache=True)
def _grow(p, r, i):
    n = p.shape[0] * 2
    p2 = np.empty((n, p.shape[1]))
    r2 = np.empty(n)
    i2 = np.empty(n, dtype=np.uint64)
    p2[: p.shape[0]] = p
    r2[: r.shape[0]] = r
    i2[: i.shape[0]] = i
    return p2, r2, i2


def _check_dt(h: float, dt: float) -> None:
    if not dt > 0:
        raise StepTooLarge("dt must be positive")
    if dt > h / 10 * (1 + 1e-12):
        raise StepTooLarge(f"dt = {dt} exceeds h / 10 = {h / 10}")


def advance(pop: ParticlePopulation, c: Coefficients, w: NoisePath, dt: float, steps: int,
            cap: int = DEFAULT_CAP) -> ParticlePopulation:
    """Take ``steps`` steps starting at ``pop.step``, reading ``w.increments`` from there."""
    _check_dt(pop.h, dt)
    if not math.isclose(w.dt, dt, rel_tol=1e-12):
        raise ValueError("noise path step differs from dt")
    if w.d != pop.dim or w.d != c.dim:
        raise ValueError("dimension mismatch between population, path and coefficients")
    if pop.step + steps > w.steps:
        raise ValueError("noise path is too short")
    b0, s1, s2, table = coefficient_table(c)
    parametric = table is not None
    if table is None:
        table = np.zeros((3, 5))
    dW = np.ascontiguousarray(w.increments[pop.step: pop.step + steps])
    pos, res, ids, status, k = _advance(
        pop.positions.copy(), pop.residual.copy(), pop.ids.copy(), steps, pop.step, dt, pop.h, dW,
        _stream_keys(pop.key), b0, s1, s2, table, parametric, cap,
    )
    if status == 1:
        raise PopulationExplosion(f"population passed the cap {cap} at step {pop.step + k}")
    return replace(pop, positions=pos, residual=res, ids=ids, time=(pop.step + steps) * dt, step=pop.step + steps)


def step_population(pop: ParticlePopulation, c: Coefficients, w: NoisePath, dt: float,
                    cap: int = DEFAULT_CAP) -> ParticlePopulation:
    """One Euler-Maruyama step with the shared increment ``w.increments[pop.step]``."""
    return advance(pop, c, w, dt, 1, cap)


def empirical_measure(pop: ParticlePopulation) -> AtomicMeasure:
    return AtomicMeasure(pop.positions.copy(), np.full(pop.size, pop.per_particle_mass))


@dataclass
class ParticleRun:
    """Functionals ``<X_t, phi_q>`` per replicate and snapshot: shape ``(R, T, Q)``."""

    times: np.ndarray
    functionals: np.ndarray
    counts: np.ndarray
    seeds: list[int]
    particle_mass: float
    measures: list[list[AtomicMeasure]] | None = field(default=None, repr=False)

    @property
    def mass(self) -> np.ndarray:
        return self.counts * self.particle_mass


def run_particles(
    c: Coefficients,
    mu: AtomicMeasure,
    h: float,
    dt: float,
    times: Sequence[float],
    replicates: int,
    seed: int,
    phis: Sequence[Callable[[np.ndarray], np.ndarray]] = (),
    env_paths: Sequence[NoisePath] | None = None,
    keep_measures: bool = False,
    cap: int = DEFAULT_CAP,
    replicate_offset: int = 0,
) -> ParticleRun:
    """Independent replicates read at ``times``.

    Replicate ``r`` uses seed ``replicate_seed(seed, replicate_offset + r)``
    for its population and, unless ``env_paths`` is given, for its own ``W``.
    Pass the same path several times to couple replicates to one environment.
    """
    _check_dt(h, dt)
    tsteps = [int(round(t / dt)) for t in times]
    if any(b < a for a, b in zip(tsteps, tsteps[1:])) or (tsteps and tsteps[0] < 0):
        raise ValueError("times must be nondecreasing and nonnegative")
    total = tsteps[-1] if tsteps else 0
    R = int(replicates)
    F = np.zeros((R, len(tsteps), len(phis)))
    counts = np.zeros((R, len(tsteps)), dtype=np.int64)
    seeds = [replicate_seed(seed, replicate_offset + r) for r in range(R)]
    measures: list[list[AtomicMeasure]] | None = [] if keep_measures else None
    for r, s in enumerate(seeds):
        if env_paths is not None:
            w = env_paths[r]
        else:
            w = make_noise_path(s, dt, max(total, 1), c.dim)
        pop = init_population(mu, h, s)
        row = []
        for q, k in enumerate(tsteps):
            if k > pop.step:
                pop = advance(pop, c, w, dt, k - pop.step, cap)
            m = empirical_measure(pop)
            counts[r, q] = pop.size
            for p, phi in enumerate(phis):
                F[r, q, p] = integrate(m, phi)
            if keep_measures:
                row.append(m)
        if keep_measures:
            measures.append(row)
    return ParticleRun(times=np.asarray(tsteps, float) * dt, functionals=F, counts=counts, seeds=seeds,
                       particle_mass=2 * h, measures=measures)
