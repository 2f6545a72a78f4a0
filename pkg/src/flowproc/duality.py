"""Moment duality and closed-form low moments (constant coefficients, d = 1).

The dual is a pure-death chain ``n_s`` that jumps ``n -> n - 1`` at rate
``n (n - 1) / 2``. Between jumps a function ``f`` on ``R^n`` flows under the
``n``-particle semigroup (particles share the environment, so their
coordinates are correlated). At a jump a uniformly chosen pair ``(i, j)`` is
merged by the diagonal restriction ``G_ij``. Then

    E <X_t^{n_0}, f_0> = E[ <mu^{n_t}, f_t> exp( int_0^t n_s (n_s - 1) / 2 ds ) ].

The normalization matches unit branching variance: ``E <X_t, 1>^2 = |mu|^2 + t |mu|``.

Functions of ``n`` variables live on the tensor grid ``x^n``. The flow is
applied exactly in Fourier space: the ``n``-particle transition has drift
``b`` per coordinate, covariance ``a s`` on the diagonal and ``sigma1^2 s``
off it, so its multiplier is

    exp(i b s sum k - s/2 (sigma2^2 sum k^2 + sigma1^2 (sum k)^2)).

The grid is treated as periodic; it must be wide enough that ``f`` (or its
deviation from a constant) is negligible near the ends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .model import AtomicMeasure, Coefficients, DensityField, UnsupportedCoefficients
from .noise import Stream, counter_uniform, derive_key

__all__ = [
    "ArityTooLarge",
    "N_MAX",
    "DualState",
    "DualEstimate",
    "heat_flow",
    "merge",
    "pair_tensor",
    "run_dual_sample",
    "dual_moment_estimate",
    "exact_first_moment",
    "exact_second_moment",
]

N_MAX = 4


class ArityTooLarge(ValueError):
    pass


@dataclass
class DualState:
    """Arity ``n``, the function ``f`` on ``x^n``, jump times and ``int_0^t n(n-1)/2 ds``."""

    n: int
    f: np.ndarray = field(repr=False)
    x: np.ndarray = field(repr=False)
    jump_times: list[float] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)
    exp_accumulator: float = 0.0

    @property
    def exp_factor(self) -> float:
        return math.exp(self.exp_accumulator)


@dataclass(frozen=True)
class DualEstimate:
    estimate: float
    se: float
    replicates: int
    samples: np.ndarray = field(repr=False, compare=False)


def _check(c: Coefficients) -> None:
    if not c.is_constant:
        raise UnsupportedCoefficients("the dual heat flow needs constant coefficients")
    if c.dim != 1:
        raise UnsupportedCoefficients("the dual is implemented for d = 1")


def heat_flow(c: Coefficients, f: np.ndarray, x: np.ndarray, s: float) -> np.ndarray:
    """``(P^n_s f)(y) = E f(Y_s)`` for ``n = f.ndim`` particles started at ``y`` sharing ``W``."""
    _check(c)
    if s == 0 or f.ndim == 0:
        return f.copy()
    dx = float(x[1] - x[0])
    m = x.shape[0]
    b = float(c.b0[0])
    s2 = float(c.s2[0, 0]) ** 2
    s1 = float(c.s1[0, 0]) ** 2
    n = f.ndim
    k_full = 2 * np.pi * np.fft.fftfreq(m, d=dx)
    k_last = 2 * np.pi * np.fft.rfftfreq(m, d=dx)
    ks = [k_full] * (n - 1) + [k_last]
    grids = np.meshgrid(*ks, indexing="ij", sparse=True)
    ksum = sum(grids)
    ksq = sum(g * g for g in grids)
    mult = np.exp(1j * b * s * ksum - 0.5 * s * (s2 * ksq + s1 * ksum * ksum))
    axes = tuple(range(n))
    out = np.fft.irfftn(np.fft.rfftn(f, axes=axes) * mult, s=f.shape, axes=axes)
    # the exact flow preserves sign; negatives are aliasing of an under-resolved f
    return np.maximum(out, 0.0) if f.min() >= 0 else out


def merge(f: np.ndarray, i: int, j: int) -> np.ndarray:
    """``G_ij f``: the arguments ``i`` and ``j`` both become the last argument of the result."""
    if not (0 <= i < j < f.ndim):
        raise ValueError("need 0 <= i < j < n")
    return np.ascontiguousarray(np.diagonal(f, axis1=i, axis2=j))


def pair_tensor(*phis: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """``phi_1 (x) phi_2 (x) ...`` on the tensor grid."""
    out = np.ones(())
    for p in phis:
        out = np.multiply.outer(out, np.asarray(p(x), float))
    return out


def _holding_uniforms(key: np.uint64, count: int) -> np.ndarray:
    return counter_uniform(key, np.arange(count, dtype=np.uint64))


def run_dual_sample(c: Coefficients, n0: int, f0: np.ndarray, t: float, x: np.ndarray, seed: int,
                    replicate: int = 0) -> DualState:
    """One run of the dual chain from arity ``n0`` up to time ``t``."""
    _check(c)
    if n0 > N_MAX:
        raise ArityTooLarge(f"n0 = {n0} exceeds {N_MAX}")
    if n0 < 1 or f0.ndim != n0:
        raise ValueError("f0 must be an array with n0 axes")
    key = np.uint64(derive_key(seed, Stream.DUAL, replicate))
    u = _holding_uniforms(key, 2 * n0)
    f = np.asarray(f0, float)
    n = n0
    s = 0.0
    acc = 0.0
    jumps: list[float] = []
    pairs: list[tuple[int, int]] = []
    q = 0
    while n > 1:
        rate = 0.5 * n * (n - 1)
        hold = -math.log(u[q]) / rate
        if s + hold >= t:
            break
        f = heat_flow(c, f, x, hold)
        acc += rate * hold
        s += hold
        npairs = n * (n - 1) // 2
        p = min(int(u[q + 1] * npairs), npairs - 1)
        i, j = [(a, b) for a in range(n) for b in range(a + 1, n)][p]
        f = merge(f, i, j)
        jumps.append(s)
        pairs.append((i, j))
        n -= 1
        q += 2
    rest = t - s
    f = heat_flow(c, f, x, rest)
    acc += 0.5 * n * (n - 1) * rest
    return DualState(n=n, f=f, x=x, jump_times=jumps, pairs=pairs, exp_accumulator=acc)


def _pair_with_product(mu: AtomicMeasure, f: np.ndarray, x: np.ndarray) -> float:
    """``<mu^{(x) n}, f>`` with ``f`` evaluated by its trigonometric interpolant.

    The heat flow already treats ``f`` as periodic and band-limited, so the
    interpolant is exact for it; linear interpolation would be biased at atoms
    between nodes.
    """
    n = f.ndim
    if n == 0:
        return float(f)
    p = mu.positions[:, 0]
    if p.min() < x[0] or p.max() > x[-1]:
        raise ValueError("mu has atoms outside the dual grid")
    m = x.shape[0]
    k = 2 * np.pi * np.fft.fftfreq(m, d=float(x[1] - x[0]))
    v = mu.masses @ np.exp(1j * np.outer(p - x[0], k))  # sum_a m_a e^{i k (p_a - x_0)}
    F = np.fft.fftn(f) / f.size
    for _ in range(n):
        F = F @ v
    return float(F.real)


def dual_moment_estimate(c: Coefficients, mu: AtomicMeasure, n0: int, f0: np.ndarray, t: float,
                         x: np.ndarray, replicates: int, seed: int) -> DualEstimate:
    """Monte Carlo mean of ``<mu^{n_t}, f_t> exp(int n(n-1)/2)`` over dual runs."""
    if replicates < 2:
        raise ValueError("need at least two replicates for a standard error")
    vals = np.empty(replicates)
    for r in range(replicates):
        st = run_dual_sample(c, n0, f0, t, x, seed, r)
        vals[r] = _pair_with_product(mu, st.f, x) * st.exp_factor
    se = float(vals.std(ddof=1) / math.sqrt(replicates))
    return DualEstimate(float(vals.mean()), se, replicates, vals)


# ---------------------------------------------------------------------------
# closed forms


def _gauss_expect(fn: Callable[[np.ndarray], np.ndarray], mean: float, var: float,
                  breakpoints: Sequence[float] = ()) -> float:
    if var <= 0:
        return float(fn(np.array([mean]))[0])
    sd = math.sqrt(var)
    lo, hi = mean - 14 * sd, mean + 14 * sd
    pts = [p for p in breakpoints if lo < p < hi]
    dens = lambda y: math.exp(-0.5 * ((y - mean) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
    val, _ = integrate.quad(lambda y: float(fn(np.array([y]))[0]) * dens(y), lo, hi, points=pts or None,
                            limit=400, epsabs=1e-12, epsrel=1e-10)
    return val


def exact_first_moment(c: Coefficients, mu: AtomicMeasure, f: Callable[[np.ndarray], np.ndarray], t: float,
                       breakpoints: Sequence[float] = ()) -> float:
    """``int int f(y) p0(t, x, y) dy mu(dx)`` by adaptive quadrature (d = 1)."""
    _check(c)
    if t < 0:
        raise ValueError("t must be nonnegative")
    b = float(c.b0[0])
    a = float(c.a0[0, 0])
    return float(sum(m * _gauss_expect(f, float(p) + b * t, a * t, breakpoints)
                     for p, m in zip(mu.positions[:, 0], mu.masses)))


_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(60)
_GH_W = _GH_W / _GH_W.sum()


def _pair_expect(f, g, m1: float, m2: float, v: float, cov: float) -> float:
    """``E f(Y1) g(Y2)`` for a bivariate normal with equal variances ``v`` and covariance ``cov``."""
    if v <= 0:
        return float(f(np.array([m1]))[0] * g(np.array([m2]))[0])
    rho = max(-1.0, min(1.0, cov / v))
    sd = math.sqrt(v)
    z1 = _GH_X[:, None]
    z2 = rho * _GH_X[:, None] + math.sqrt(max(0.0, 1 - rho * rho)) * _GH_X[None, :]
    y1 = m1 + sd * np.broadcast_to(z1, z2.shape)
    y2 = m2 + sd * z2
    vals = f(y1.ravel()).reshape(y1.shape) * g(y2.ravel()).reshape(y2.shape)
    return float(_GH_W @ vals @ _GH_W)


def exact_second_moment(c: Coefficients, mu: AtomicMeasure, f: Callable[[np.ndarray], np.ndarray],
                        g: Callable[[np.ndarray], np.ndarray], t: float) -> dict[str, float]:
    """``E <X_t, f><X_t, g>`` from the two-particle formula.

    The branching term is multiplied by 1 (``"mp"``, unit branching
    variance, the convention of every simulator here) or by 2 (``"factor2"``).
    Gauss-Hermite quadrature: accurate for smooth ``f``, ``g``.
    """
    _check(c)
    if t < 0:
        raise ValueError("t must be nonnegative")
    b = float(c.b0[0])
    a = float(c.a0[0, 0])
    e = float(c.env_cov[0, 0])
    pos, ms = mu.positions[:, 0], mu.masses
    first = 0.0
    for p1, w1 in zip(pos, ms):
        for p2, w2 in zip(pos, ms):
            first += w1 * w2 * _pair_expect(f, g, p1 + b * t, p2 + b * t, a * t, e * t)
    branch = 0.0
    if t > 0:
        for p, w in zip(pos, ms):
            inner = lambda s: _pair_expect(f, g, p + b * t, p + b * t, a * t, a * s + e * (t - s))
            val, _ = integrate.quad(inner, 0.0, t, epsabs=1e-12, epsrel=1e-10, limit=200)
            branch += w * val
    return {"mp": first + branch, "factor2": first + 2 * branch}
