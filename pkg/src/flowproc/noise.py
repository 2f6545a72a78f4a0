"""Seeded randomness for every simulator in the package.

All draws come from a counter-based generator: a value is a pure function of
``(key, counter)`` where the key is folded from the user seed and a stream tag
plus entity ids. Consequences relied on elsewhere:

* the environment path ``W`` never depends on how many particles, cells or
  replicates are simulated next to it;
* a sheet sample at ``(step, cell)`` is the same whichever order it is asked for;
* batched and one-at-a-time replicate runs give bitwise-identical results.

The mixer is the splitmix64 finalizer; normals use the Marsaglia-Tsang
ziggurat fed by the hashed counter, with further hashes for the rare
rejection steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

__all__ = [
    "InvalidStep",
    "OutOfRange",
    "NoisePath",
    "SheetSource",
    "Stream",
    "derive_key",
    "counter_uniform",
    "counter_normal",
    "replicate_seed",
    "make_noise_path",
    "backward_view",
    "sheet_sample",
    "sheet_keys",
    "mix_pair",
]

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class InvalidStep(ValueError):
    pass


class OutOfRange(IndexError):
    pass


class Stream:
    """Stream tags. Each tag owns a disjoint family of keys."""

    ENVIRONMENT = 1
    PRIVATE = 2
    LIFETIME = 3
    OFFSPRING = 4
    INITIAL = 5
    SHEET = 6
    SNAKE_WALK = 7
    SNAKE_BRANCH = 8
    SNAKE_ROOT = 9
    DUAL = 10
    REPLICATE = 11


def _mix_int(z: int) -> int:
    z = (z + _GOLDEN) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_key(seed: int, *ids: int) -> int:
    """Fold a seed and a sequence of nonnegative ids into a 64-bit key."""
    k = _mix_int(int(seed) & _MASK)
    for i in ids:
        k = _mix_int(k ^ (int(i) & _MASK))
    return k


def replicate_seed(seed: int, replicate: int) -> int:
    """Seed of replicate ``replicate``; the mixer is splitmix64 on ``seed xor index``."""
    return derive_key(seed, Stream.REPLICATE, replicate)


@numba.njit(cache=True, inline="always")
def _mix(z):
    z = z + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@numba.njit(cache=True, inline="always")
def _uniform(key, counter):
    h = _mix(key ^ _mix(counter))
    return (float(h >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


def _ziggurat_tables(layers: int = 128):
    """Marsaglia-Tsang ziggurat tables for the standard normal (32-bit variant)."""
    m1 = 2147483648.0
    dn = tn = 3.442619855899
    vn = 9.91256303526217e-3
    kn = np.zeros(layers)
    wn = np.zeros(layers)
    fn = np.zeros(layers)
    q = vn / math.exp(-0.5 * dn * dn)
    kn[0] = (dn / q) * m1
    kn[1] = 0.0
    wn[0] = q / m1
    wn[layers - 1] = dn / m1
    fn[0] = 1.0
    fn[layers - 1] = math.exp(-0.5 * dn * dn)
    for i in range(layers - 2, 0, -1):
        dn = math.sqrt(-2.0 * math.log(vn / dn + math.exp(-0.5 * dn * dn)))
        kn[i + 1] = (dn / tn) * m1
        tn = dn
        fn[i] = math.exp(-0.5 * dn * dn)
        wn[i] = dn / m1
    return kn, wn, fn


_KN, _WN, _FN = _ziggurat_tables()
_ZR = 3.442619855899


@numba.njit(cache=True, inline="always")
def _u53(h):
    return (float(h >> np.uint64(11)) + 0.5) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _normal_slow(h, hz, iz):
    j = np.uint64(1)
    while True:
        x = hz * _WN[iz]
        if iz == 0:
            while True:
                h = _mix(h ^ j)
                j += np.uint64(1)
                xx = -math.log(_u53(h)) / _ZR
                h = _mix(h ^ j)
                j += np.uint64(1)
                yy = -math.log(_u53(h))
                if yy + yy >= xx * xx:
                    break
            return _ZR + xx if hz > 0 else -_ZR - xx
        h = _mix(h ^ j)
        j += np.uint64(1)
        if _FN[iz] + _u53(h) * (_FN[iz - 1] - _FN[iz]) < math.exp(-0.5 * x * x):
            return x
        h = _mix(h ^ j)
        j += np.uint64(1)
        hz = float(np.int64(h >> np.uint64(32)) - 2147483648)
        iz = np.int64(h & np.uint64(127))
        if abs(hz) < _KN[iz]:
            return hz * _WN[iz]


@numba.njit(cache=True, inline="always")
def _normal(key, counter):
    h = _mix(key ^ _mix(counter))
    hz = float(np.int64(h >> np.uint64(32)) - 2147483648)
    iz = np.int64(h & np.uint64(127))
    if abs(hz) < _KN[iz]:
        return hz * _WN[iz]
    return _normal_slow(h, hz, iz)


@numba.vectorize(["float64(uint64, uint64)"], cache=True)
def counter_uniform(key, counter):
    """Uniform on (0, 1) addressed by ``(key, counter)``; broadcasts like a ufunc."""
    return _uniform(key, counter)


@numba.vectorize(["float64(uint64, uint64)"], cache=True)
def counter_normal(key, counter):
    """Standard normal addressed by ``(key, counter)``; broadcasts like a ufunc."""
    return _normal(key, counter)


@numba.vectorize(["uint64(uint64, uint64)"], cache=True)
def mix_pair(key, value):
    """Key of a child entity: a 64-bit hash of ``(key, value)``."""
    return _mix(key ^ _mix(value))


def _u64(x) -> np.ndarray:
    return np.asarray(x, dtype=np.uint64)


@dataclass(frozen=True)
class NoisePath:
    """A realized, discretized environment Brownian path.

    ``increments[k]`` is ``W(t_{k+1}) - W(t_k)`` with ``t_k = k * dt``.
    """

    seed: int
    dt: float
    steps: int
    d: int
    increments: np.ndarray = field(repr=False, compare=False)

    @property
    def horizon(self) -> float:
        return self.dt * self.steps

    def forward(self) -> np.ndarray:
        return self.increments

    def backward(self) -> np.ndarray:
        return backward_view(self)

    def values(self) -> np.ndarray:
        """``W(t_k)`` for ``k = 0..steps``, shape ``(steps + 1, d)``."""
        out = np.zeros((self.steps + 1, self.d))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def make_noise_path(seed: int, dt: float, steps: int, d: int = 1) -> NoisePath:
    if not dt > 0:
        raise InvalidStep(f"dt must be positive, got {dt}")
    if steps < 1 or d < 1:
        raise InvalidStep(f"need steps >= 1 and d >= 1, got steps={steps}, d={d}")
    key = _u64(derive_key(seed, Stream.ENVIRONMENT))
    counters = np.arange(steps * d, dtype=np.uint64)
    inc = counter_normal(key, counters).reshape(steps, d) * math.sqrt(dt)
    inc.setflags(write=False)
    return NoisePath(seed=int(seed), dt=float(dt), steps=int(steps), d=int(d), increments=inc)


def backward_view(w: NoisePath) -> np.ndarray:
    """Increments in reverse index order, last step first (a read-only view)."""
    return w.increments[::-1]


@dataclass(frozen=True)
class SheetSource:
    """Cell-averaged space-time white noise on a regular grid.

    ``sample(step, cell)`` is the Brownian-sheet mass of the cell
    ``[t_k, t_k + dt) x [x_j, x_j + dx)``: Gaussian with variance ``dt * dx``.
    A source may carry several independent lanes; lane ``r`` is keyed by
    ``(seed, r)`` alone, so its contents do not depend on the lane count.
    """

    seed: int
    dt: float
    dx: float
    cells: int
    steps: int | None = None
    lanes: int = 1

    def __post_init__(self):
        if not (self.dt > 0 and self.dx > 0):
            raise InvalidStep("sheet needs dt > 0 and dx > 0")
        if self.cells < 1 or self.lanes < 1:
            raise InvalidStep("sheet needs at least one cell and one lane")

    def lane_keys(self) -> np.ndarray:
        return sheet_keys([self.seed] * self.lanes, lanes=range(self.lanes))

    def row(self, step: int, keys: np.ndarray | None = None) -> np.ndarray:
        """All cells of one step, shape ``(lanes, cells)``."""
        self._check_step(step)
        if keys is None:
            keys = self.lane_keys()
        counters = np.uint64(step) * np.uint64(self.cells) + np.arange(self.cells, dtype=np.uint64)
        return counter_normal(keys[:, None], counters[None, :]) * math.sqrt(self.dt * self.dx)

    def _check_step(self, step: int) -> None:
        if step < 0 or (self.steps is not None and step >= self.steps):
            raise OutOfRange(f"step {step} outside sheet")


def sheet_keys(seeds, lanes=None) -> np.ndarray:
    """Lane keys for a batch of (seed, lane) pairs; lane defaults to 0."""
    seeds = list(seeds)
    lanes = [0] * len(seeds) if lanes is None else list(lanes)
    return _u64([derive_key(s, Stream.SHEET, r) for s, r in zip(seeds, lanes)])


def sheet_sample(s: SheetSource, step: int, cell: int, lane: int = 0) -> float:
    s._check_step(step)
    if not 0 <= cell < s.cells:
        raise OutOfRange(f"cell {cell} outside [0, {s.cells})")
    if not 0 <= lane < s.lanes:
        raise OutOfRange(f"lane {lane} outside [0, {s.lanes})")
    key = s.lane_keys()[lane]
    counter = np.uint64(step) * np.uint64(s.cells) + np.uint64(cell)
    return float(counter_normal(key, counter) * math.sqrt(s.dt * s.dx))
