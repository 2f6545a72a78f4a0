"""Brownian-snake construction of the superprocess.

The lifetime process ``zeta`` is a reflecting Brownian motion, simulated as a
Gaussian random walk with step variance ``ds`` reflected at 0 (Skorokhod:
``z <- max(z + dz, 0)``). Its local time at 0 is taken as the occupation
density, which is twice the accumulated reflection push. The walk stops at
``tau``, the first time this local time reaches ``|mu|``.

Lifetime levels are discretized with spacing ``dl`` (default ``sqrt(ds)``).
Whenever ``floor(zeta / dl)`` increases, a node is pushed on a stack: a new
segment of spatial path one level long, the child of the node below it. When
it decreases, nodes are popped. Two tips therefore share every node below the
minimum of ``zeta`` between them, which is the snake's tree property. A new
root is drawn from ``mu / |mu|`` whenever ``zeta`` returns to 0.

The spatial motion along a branch solves the particle SDE with lifetime level
as time: ``x_{j+1} = x_j + b dl + sigma1 dW_j + sigma2 sqrt(dl) Z``. The
environment increment ``dW_j`` belongs to the level and is shared by every
branch; ``Z`` belongs to the node.

Readout at level ``t``: each excursion of ``zeta`` above ``t`` that climbs
higher than ``t + h`` contributes an atom of mass ``2h`` at the position of its
tip at level ``t``.

An optional ``level_cap`` reflects ``zeta`` from above as well. Excursions
above the cap are then cut out, which leaves every readout at levels
``t <= level_cap - h`` unchanged in law while making ``tau`` of order
``level_cap`` instead of heavy-tailed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .model import AtomicMeasure, Coefficients, coefficient_table
from .noise import NoisePath, Stream, _mix, _normal, _uniform, derive_key, make_noise_path, replicate_seed
from .particles import _fam

__all__ = [
    "HorizonReached",
    "InsufficientEnvironmentPath",
    "LifetimePath",
    "Excursion",
    "SnakeForest",
    "MAX_CORRECTION",
    "simulate_lifetime",
    "excursions_above",
    "level_local_time",
    "build_forest",
    "snake_measure",
    "support_diameter",
    "tip_path",
    "SnakeRun",
    "run_snake",
]

# Expected overshoot of a Gaussian walk over a level, in units of its step
# size: -zeta(1/2) / sqrt(2 pi). A sampled excursion looks this much lower
# than the continuous one at its top, and its sampled start and end sit this
# much above the level the continuous path actually reached; the height
# threshold is lowered by twice this amount.
MAX_CORRECTION = 0.5825971579390106


class HorizonReached(RuntimeWarning):
    pass


class InsufficientEnvironmentPath(ValueError):
    pass


@dataclass
class LifetimePath:
    """A sampled lifetime path up to ``tau`` (or the horizon).

    ``local_time_zero[i]`` is the local time at 0 accumulated by sample ``i``.
    ``tau_index`` is -1 when the horizon came first.
    """

    ds: float
    zeta: np.ndarray = field(repr=False)
    local_time_zero: np.ndarray = field(repr=False)
    tau_index: int
    seed: int
    mass: float = 1.0
    level_cap: float = math.inf

    @property
    def horizon_reached(self) -> bool:
        return self.tau_index < 0

    @property
    def stop(self) -> int:
        return self.zeta.shape[0] - 1 if self.tau_index < 0 else self.tau_index


@dataclass(frozen=True)
class Excursion:
    start: int
    end: int
    height: float


# ---------------------------------------------------------------------------
# lifetime walk


@numba.njit(cache=True)
def _walk(key, ds, mass, max_steps, cap, zeta, ell, store):
    sq = math.sqrt(ds)
    z = 0.0
    l = 0.0
    if store:
        zeta[0] = 0.0
        ell[0] = 0.0
    for k in range(1, max_steps + 1):
        z += sq * _normal(key, np.uint64(k))
        if z < 0.0:
            l -= 2.0 * z
            z = 0.0
        elif z > cap:
            z = 2.0 * cap - z
        if store:
            zeta[k] = z
            ell[k] = l
        if l >= mass:
            return k
    return -1


def _walk_key(seed: int) -> np.uint64:
    return np.uint64(derive_key(seed, Stream.SNAKE_WALK))


def simulate_lifetime(seed: int, ds: float, horizon: float, mass: float = 1.0,
                      level_cap: float | None = None) -> LifetimePath:
    """Reflecting walk stopped when its local time at 0 reaches ``mass``.

    If ``horizon`` comes first the partial path is returned with
    ``tau_index = -1``; callers that need ``tau`` should check
    ``horizon_reached``.
    """
    if not ds > 0:
        raise ValueError("ds must be positive")
    steps = int(math.ceil(horizon / ds))
    cap = math.inf if level_cap is None else float(level_cap)
    zeta = np.zeros(steps + 1)
    ell = np.zeros(steps + 1)
    k = _walk(_walk_key(seed), ds, float(mass), steps, cap, zeta, ell, True)
    end = steps if k < 0 else k
    return LifetimePath(ds=float(ds), zeta=zeta[: end + 1], local_time_zero=ell[: end + 1], tau_index=int(k),
                        seed=int(seed), mass=float(mass), level_cap=cap)


def _threshold(h: float, ds: float, corrected: bool) -> float:
    return h - 2.0 * MAX_CORRECTION * math.sqrt(ds) if corrected else h


@numba.njit(cache=True)
def _excursions(zeta, stop, t, thr):
    starts = []
    ends = []
    heights = []
    inside = False
    a = 0
    top = 0.0
    for i in range(stop + 1):
        z = zeta[i]
        if z > t:
            if not inside:
                inside = True
                a = i
                top = z
            elif z > top:
                top = z
        elif inside:
            inside = False
            if top > t + thr:
                starts.append(a)
                ends.append(i)
                heights.append(top - t)
    if inside and top > t + thr:
        starts.append(a)
        ends.append(stop)
        heights.append(top - t)
    return starts, ends, heights


def excursions_above(path: LifetimePath, t: float, h: float, corrected: bool = True) -> list[Excursion]:
    """Maximal intervals with ``zeta > t`` whose height over ``t`` exceeds ``h``.

    With ``corrected`` the sampled height is compared with
    ``h - 2 MAX_CORRECTION sqrt(ds)``, compensating for the walk missing both
    the top of each excursion and the dips below ``t`` between samples.
    """
    if not (t >= 0 and h > 0):
        raise ValueError("need t >= 0 and h > 0")
    s, e, ht = _excursions(path.zeta, path.stop, float(t), _threshold(h, path.ds, corrected))
    return [Excursion(int(a), int(b), float(c)) for a, b, c in zip(s, e, ht)]


def level_local_time(path: LifetimePath, t: float, h: float, corrected: bool = True) -> float:
    """``2h`` times the number of excursions above ``t`` higher than ``h``: the local time at ``t``."""
    return 2.0 * h * len(excursions_above(path, t, h, corrected))


# ---------------------------------------------------------------------------
# forest


@numba.njit(cache=True)
def _grow_int(a, n):
    b = np.empty(max(2 * a.shape[0], n), dtype=a.dtype)
    b[: a.shape[0]] = a
    return b


@numba.njit(cache=True)
def _forest(key, ds, dl, mass, max_steps, cap, zeta_in, level_idx, thr, readout_cap):
    """Walk (or replay ``zeta_in``) and build the level tree.

    Returns parent, depth, root index per node, readout node ids ``(levels, readout_cap)``,
    readout counts, the stopping step (-1 at horizon) and the number of roots.
    """
    sq = math.sqrt(ds)
    replay = zeta_in.shape[0] > 0
    if replay:
        max_steps = zeta_in.shape[0] - 1
    nlev = level_idx.shape[0]
    parent = np.empty(1024, dtype=np.int64)
    depth = np.empty(1024, dtype=np.int64)
    root_of = np.empty(1024, dtype=np.int64)
    stack = np.empty(1024, dtype=np.int64)
    reads = np.full((nlev, readout_cap), -1, dtype=np.int64)
    counts = np.zeros(nlev, dtype=np.int64)
    armed = np.ones(nlev, dtype=np.bool_)
    levels = level_idx.astype(np.float64) * dl
    # root 0 at depth 0
    parent[0] = -1
    depth[0] = 0
    root_of[0] = 0
    stack[0] = 0
    nn = 1
    roots = 1
    J = 0
    z = 0.0
    l = 0.0
    stop = -1
    for k in range(1, max_steps + 1):
        if replay:
            z = zeta_in[k]
            if z == 0.0:
                hit = True
            else:
                hit = False
            l_new = l
        else:
            z += sq * _normal(key, np.uint64(k))
            hit = False
            if z < 0.0:
                l -= 2.0 * z
                z = 0.0
                hit = True
            elif z > cap:
                z = 2.0 * cap - z
            l_new = l
        if hit:
            # a return to 0 starts a fresh excursion from a fresh root
            if nn >= parent.shape[0]:
                parent = _grow_int(parent, nn + 1)
                depth = _grow_int(depth, nn + 1)
                root_of = _grow_int(root_of, nn + 1)
            parent[nn] = -1
            depth[nn] = 0
            root_of[nn] = roots
            roots += 1
            stack[0] = nn
            nn += 1
            J = 0
        Jn = int(z / dl)
        if Jn > J:
            if Jn >= stack.shape[0]:
                stack = _grow_int(stack, Jn + 1)
            for j in range(J + 1, Jn + 1):
                if nn >= parent.shape[0]:
                    parent = _grow_int(parent, nn + 1)
                    depth = _grow_int(depth, nn + 1)
                    root_of = _grow_int(root_of, nn + 1)
                parent[nn] = stack[j - 1]
                depth[nn] = j
                root_of[nn] = root_of[stack[j - 1]]
                stack[j] = nn
                nn += 1
        J = Jn
        for q in range(nlev):
            t = levels[q]
            if z <= t:
                armed[q] = True
            elif armed[q] and z > t + thr:
                armed[q] = False
                c = counts[q]
                if c < readout_cap:
                    reads[q, c] = stack[level_idx[q]]
                counts[q] = c + 1
        if replay:
            if k == max_steps:
                stop = k
        elif l_new >= mass:
            stop = k
            break
    return parent[:nn].copy(), depth[:nn].copy(), root_of[:nn].copy(), reads, counts, stop, roots


@dataclass
class SnakeForest:
    """Level tree of one snake run plus its readouts.

    ``readouts[q]`` holds the node ids read at ``levels[q]``; node ``i`` sits at
    lifetime level ``depth[i] * dl`` and its path runs through its ancestors.
    """

    dl: float
    ds: float
    h: float
    levels: np.ndarray
    parent: np.ndarray = field(repr=False)
    depth: np.ndarray = field(repr=False)
    root_of: np.ndarray = field(repr=False)
    readouts: list[np.ndarray] = field(repr=False)
    counts: np.ndarray = field(default=None)
    tau_index: int = -1
    roots: int = 1
    seed: int = 0

    @property
    def horizon_reached(self) -> bool:
        return self.tau_index < 0

    @property
    def node_count(self) -> int:
        return self.parent.shape[0]


def _level_grid(levels: Sequence[float], ds: float, dl: float | None) -> tuple[float, np.ndarray]:
    levels = np.asarray(levels, float).reshape(-1)
    if np.any(levels < 0):
        raise ValueError("levels must be nonnegative")
    if dl is None:
        dl = math.sqrt(ds)
        pos = levels[levels > 0]
        if pos.size:
            # snap dl so that the smallest positive level is a whole number of steps
            m = max(1, int(round(pos.min() / dl)))
            dl = pos.min() / m
    idx = np.rint(levels / dl).astype(np.int64)
    if np.any(np.abs(idx * dl - levels) > 1e-9 * max(1.0, levels.max(initial=0.0))):
        raise ValueError("every level must be a multiple of dl")
    return float(dl), idx


def build_forest(seed: int, ds: float, levels: Sequence[float], h: float, horizon: float = math.inf,
                 mass: float = 1.0, level_cap: float | None = None, dl: float | None = None,
                 path: LifetimePath | None = None, corrected: bool = True,
                 readout_cap: int = 1 << 16) -> SnakeForest:
    """Build the level tree and readouts, from a fresh walk or by replaying ``path``."""
    if not (ds > 0 and h > 0):
        raise ValueError("need ds > 0 and h > 0")
    dl, idx = _level_grid(levels, ds, dl)
    cap = math.inf if level_cap is None else float(level_cap)
    if cap < np.max(idx) * dl + h:
        raise ValueError("level_cap must be at least max(levels) + h")
    max_steps = np.iinfo(np.int64).max if not math.isfinite(horizon) else int(math.ceil(horizon / ds))
    zin = np.zeros(0) if path is None else path.zeta[: path.stop + 1]
    if path is not None and not math.isclose(path.ds, ds):
        raise ValueError("path was sampled with a different ds")
    thr = _threshold(h, ds, corrected)
    parent, depth, root_of, reads, counts, stop, roots = _forest(
        _walk_key(seed), float(ds), dl, float(mass), max_steps, cap, zin, idx, thr, int(readout_cap))
    if path is not None:
        stop = path.tau_index
    if np.any(counts > readout_cap):
        raise RuntimeError("readout capacity exceeded; raise readout_cap")
    readouts = [reads[q, : counts[q]].copy() for q in range(idx.shape[0])]
    return SnakeForest(dl=dl, ds=float(ds), h=float(h), levels=idx * dl, parent=parent, depth=depth,
                       root_of=root_of, readouts=readouts, counts=counts, tau_index=int(stop), roots=int(roots),
                       seed=int(seed))


@numba.njit(cache=True)
def _positions(nodes, parent, depth, root_of, root_pos, dl, dW, key, b0, s1, s2, table, parametric):
    """Positions of ``nodes`` (sorted ids, closed under taking parents)."""
    d = root_pos.shape[1]
    m = nodes.shape[0]
    out = np.empty((m, d))
    sq = math.sqrt(dl)
    z = np.empty(d)
    for r in range(m):
        node = nodes[r]
        p = parent[node]
        if p < 0:
            out[r] = root_pos[root_of[node]]
            continue
        x = out[np.searchsorted(nodes, p)]
        j = depth[node] - 1  # level step j -> j + 1
        nk = _mix(key ^ _mix(np.uint64(node)))
        for q in range(d):
            z[q] = _normal(nk, np.uint64(q)) * sq
        if parametric:
            x0 = x[0]
            out[r, 0] = x0 + _fam(table[0], x0) * dl + _fam(table[1], x0) * dW[j, 0] + _fam(table[2], x0) * z[0]
        else:
            for i in range(d):
                acc = x[i] + b0[i] * dl
                for q in range(d):
                    acc += s1[i, q] * dW[j, q] + s2[i, q] * z[q]
                out[r, i] = acc
    return out


def _ancestors(nodes: np.ndarray, parent: np.ndarray) -> np.ndarray:
    need = set()
    for n in nodes.tolist():
        while n >= 0 and n not in need:
            need.add(n)
            n = int(parent[n])
    return np.array(sorted(need), dtype=np.int64)


def _root_positions(mu: AtomicMeasure, roots: int, seed: int) -> np.ndarray:
    if mu.size == 1:
        return np.repeat(mu.positions, roots, axis=0)
    key = np.uint64(derive_key(seed, Stream.SNAKE_ROOT))
    from .noise import counter_uniform

    u = counter_uniform(key, np.arange(roots, dtype=np.uint64))
    cdf = np.cumsum(mu.masses) / mu.masses.sum()
    return mu.positions[np.minimum(np.searchsorted(cdf, u), mu.size - 1)]


def _node_positions(forest: SnakeForest, nodes: np.ndarray, c: Coefficients, w: NoisePath,
                    mu: AtomicMeasure) -> tuple[np.ndarray, np.ndarray]:
    all_nodes = _ancestors(nodes, forest.parent)
    if all_nodes.size == 0:
        return all_nodes, np.zeros((0, c.dim))
    need_levels = int(forest.depth[all_nodes].max())
    if need_levels > w.steps:
        raise InsufficientEnvironmentPath(f"path covers {w.steps} level steps, {need_levels} needed")
    if not math.isclose(w.dt, forest.dl, rel_tol=1e-9):
        raise InsufficientEnvironmentPath("environment step must equal the level spacing dl")
    if w.d != c.dim or mu.dim != c.dim:
        raise ValueError("dimension mismatch")
    b0, s1, s2, table = coefficient_table(c)
    parametric = table is not None
    if table is None:
        table = np.zeros((3, 5))
    key = np.uint64(derive_key(forest.seed, Stream.SNAKE_BRANCH))
    pos = _positions(all_nodes, forest.parent, forest.depth, forest.root_of,
                     _root_positions(mu, forest.roots, forest.seed), forest.dl,
                     np.ascontiguousarray(w.increments), key, b0, s1, s2, table, parametric)
    return all_nodes, pos


def snake_measure(forest: SnakeForest, c: Coefficients, w: NoisePath, t: float,
                  mu: AtomicMeasure | None = None) -> AtomicMeasure:
    """Atoms of mass ``2h`` at the level-``t`` tips of the counted excursions."""
    mu = AtomicMeasure(np.zeros((1, c.dim)), np.ones(1)) if mu is None else mu
    q = int(np.argmin(np.abs(forest.levels - t)))
    if abs(forest.levels[q] - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"level {t} was not read out; available {forest.levels.tolist()}")
    nodes = forest.readouts[q]
    if nodes.size == 0:
        return AtomicMeasure.zero(c.dim)
    all_nodes, pos = _node_positions(forest, nodes, c, w, mu)
    rows = np.searchsorted(all_nodes, nodes)
    return AtomicMeasure(pos[rows], np.full(nodes.size, 2.0 * forest.h))


def tip_path(forest: SnakeForest, node: int, c: Coefficients, w: NoisePath,
             mu: AtomicMeasure | None = None) -> np.ndarray:
    """Spatial path of the branch ending at ``node``, one row per level from 0."""
    mu = AtomicMeasure(np.zeros((1, c.dim)), np.ones(1)) if mu is None else mu
    chain = []
    n = int(node)
    while n >= 0:
        chain.append(n)
        n = int(forest.parent[n])
    chain = np.array(chain[::-1], dtype=np.int64)
    all_nodes, pos = _node_positions(forest, chain, c, w, mu)
    return pos[np.searchsorted(all_nodes, chain)]


def support_diameter(m: AtomicMeasure) -> float:
    """Largest distance between two atoms (0 for fewer than two)."""
    if m.size < 2:
        return 0.0
    x = m.positions
    if m.dim == 1:
        return float(x.max() - x.min())
    if m.size > 64:
        try:
            x = x[ConvexHull(x).vertices]
        except QhullError:
            pass
    return float(pdist(x).max())


@dataclass
class SnakeRun:
    """Per replicate and level: excursion counts, masses, diameters, and optionally atoms."""

    levels: np.ndarray
    counts: np.ndarray
    mass: np.ndarray
    diameter: np.ndarray
    tau_steps: np.ndarray
    seeds: list[int]
    functionals: np.ndarray
    measures: list[list[AtomicMeasure]] | None = field(default=None, repr=False)


def run_snake(c: Coefficients, mu: AtomicMeasure, levels: Sequence[float], h: float, ds: float,
              replicates: int, seed: int, level_cap: float | None = None, horizon: float = math.inf,
              dl: float | None = None, phis=(), keep_measures: bool = False, corrected: bool = True,
              replicate_offset: int = 0) -> SnakeRun:
    """Independent snake replicates; replicate ``r`` uses ``replicate_seed(seed, replicate_offset + r)``
    for its walk, its branch noise and its own environment path.

    ``level_cap`` defaults to ``max(levels) + 2h``.
    """
    levels = np.asarray(levels, float)
    if level_cap is None:
        level_cap = float(levels.max()) + 2 * h
    R = int(replicates)
    L = levels.shape[0]
    counts = np.zeros((R, L), dtype=np.int64)
    diam = np.zeros((R, L))
    taus = np.zeros(R, dtype=np.int64)
    F = np.zeros((R, L, len(phis)))
    seeds = [replicate_seed(seed, replicate_offset + r) for r in range(R)]
    measures = [] if keep_measures else None
    mass = mu.total_mass
    for r, s in enumerate(seeds):
        forest = build_forest(s, ds, levels, h, horizon=horizon, mass=mass, level_cap=level_cap, dl=dl,
                              corrected=corrected)
        if forest.horizon_reached:
            raise HorizonReached(f"replicate {r}: local time at 0 did not reach {mass} within the horizon")
        taus[r] = forest.tau_index
        counts[r] = forest.counts
        need = int(math.ceil(level_cap / forest.dl)) + 1
        w = make_noise_path(s, forest.dl, need, c.dim)
        row = []
        for q, t in enumerate(forest.levels):
            m = snake_measure(forest, c, w, t, mu)
            diam[r, q] = support_diameter(m)
            for p, phi in enumerate(phis):
                x = m.positions[:, 0] if m.dim == 1 else m.positions
                F[r, q, p] = float(np.dot(m.masses, phi(x))) if m.size else 0.0
            if keep_measures:
                row.append(m)
        if keep_measures:
            measures.append(row)
    return SnakeRun(levels=levels, counts=counts, mass=2 * h * counts, diameter=diam, tau_steps=taus,
                    seeds=seeds, functionals=F, measures=measures)
