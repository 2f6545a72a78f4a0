"""Backward solver for the conditional log-Laplace functional.

Given one realized environment path ``W`` the function ``y_{s,t}`` solves,
backward in ``s`` from ``y_{t,t} = f``,

    y_{s,t} = f + int_s^t (L y_{r,t} - q y_{r,t}^2) dr + int_s^t sigma1 y'_{r,t} dW_r

with a backward Ito integral (integrand at the later end of each step). Then

    E[exp(-<X_t, f>) | W] = exp(-<mu, y_{0,t}>).

The coefficient ``q`` of the quadratic term is half the branching variance.
The simulators in this package use unit branching variance (quadratic
variation ``int <X_s, phi^2> ds``), hence the default ``q = 1/2``; ``q = 1``
gives the ``y' = -y^2`` normalization.

One step from ``s_{k+1}`` down to ``s_k``:

    (I - dt/2 a D2) y_k = y_{k+1} + dt (b D1 y_{k+1} - q y_{k+1}^2)
                          + sigma1 D1 y_{k+1} dW_k
                          + 1/2 sigma1 D1(sigma1 D1 y_{k+1}) (dW_k^2 - dt)

where ``dW_k = W(s_{k+1}) - W(s_k)``. The last term is the Milstein correction
for the scalar environment noise; ``milstein=False`` drops it. Values are
clipped at 0 and the ends are held at 0 (``f`` has compact support).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .model import AtomicMeasure, Coefficients, DensityField, UnsupportedCoefficients
from .noise import NoisePath
from .spde import StabilityViolation, SupportOutsideGrid

__all__ = [
    "NegativeTerminalData",
    "StabilityViolation",
    "SupportOutsideGrid",
    "BackwardSolution",
    "solve_backward",
    "conditional_laplace",
    "plateau",
    "MP_QUADRATIC",
]

MP_QUADRATIC = 0.5


class NegativeTerminalData(ValueError):
    pass


@dataclass
class BackwardSolution:
    """``y[k]`` approximates ``y_{k dt, t}`` on the grid ``x``; ``y[-1]`` is ``f``.

    With ``keep="final"`` only ``y_{0,t}`` and ``f`` are stored (``y`` has two rows).
    """

    t: float
    dt: float
    x: np.ndarray
    y: np.ndarray = field(repr=False)
    f: np.ndarray = field(repr=False)
    quad_coeff: float = MP_QUADRATIC

    @property
    def y0(self) -> np.ndarray:
        return self.y[0]

    def field(self, k: int = 0) -> DensityField:
        dx = float(self.x[1] - self.x[0])
        return DensityField(float(self.x[0]), float(self.x[-1]), dx, self.y[k].copy(), k * self.dt)


def plateau(height: float = 1.0, half_width: float = 1.0, ramp: float = 0.5) -> Callable[[np.ndarray], np.ndarray]:
    """``height`` on ``|x| <= half_width``, linear ramps to 0 over ``ramp``."""

    def f(x):
        x = np.abs(np.asarray(x, float))
        return height * np.clip((half_width + ramp - x) / ramp, 0.0, 1.0)

    return f


def _ddx(y: np.ndarray, dx: float) -> np.ndarray:
    out = np.zeros_like(y)
    out[1:-1] = (y[2:] - y[:-2]) / (2 * dx)
    return out


def solve_backward(
    c: Coefficients,
    f,
    t: float,
    w: NoisePath,
    grid: DensityField | tuple[float, float, float],
    dt: float | None = None,
    quad_coeff: float = MP_QUADRATIC,
    milstein: bool = True,
    keep: str = "all",
) -> BackwardSolution:
    """March ``y`` from ``s = t`` down to ``s = 0`` using ``w.increments[:t/dt]`` in reverse.

    ``f`` is a callable or an array on the grid; ``grid`` is a field or
    ``(x_min, x_max, dx)``.
    """
    if c.dim != 1:
        raise UnsupportedCoefficients("the backward solver is one-dimensional")
    if isinstance(grid, DensityField):
        x_min, x_max, dx = grid.x_min, grid.x_max, grid.dx
    else:
        x_min, x_max, dx = grid
    g = DensityField.on_grid(x_min, x_max, dx)
    x = g.x
    fv = np.asarray(f(x) if callable(f) else f, float).copy()
    if fv.shape != x.shape:
        raise ValueError("terminal data does not match the grid")
    if np.any(fv < 0):
        raise NegativeTerminalData("terminal data must be nonnegative")
    if fv[0] != 0 or fv[-1] != 0:
        raise SupportOutsideGrid("terminal data must vanish at both ends of the grid")
    dt = w.dt if dt is None else float(dt)
    if not math.isclose(dt, w.dt, rel_tol=1e-12):
        raise ValueError("dt must equal the environment path step")
    steps = int(round(t / dt))
    if steps < 0 or not math.isclose(steps * dt, t, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("t must be a nonnegative multiple of dt")
    if steps > w.steps:
        raise ValueError("environment path is shorter than t")

    p = c.profiles(x)
    a, b, s1 = p["a"], p["b"], p["sigma1"]
    if quad_coeff * dt * fv.max(initial=0.0) > 0.5:
        raise StabilityViolation("dt too large for the explicit quadratic term")
    if np.max(np.abs(b)) * dx > np.min(a):
        raise StabilityViolation("cell Peclet number above 1: refine dx")

    n = x.shape[0]
    r = 0.5 * a * dt / dx**2
    main = 1 + 2 * r
    lower = -r[1:]
    upper = -r[:-1]
    # Dirichlet ends
    main[0] = main[-1] = 1.0
    upper[0] = 0.0
    lower[-1] = 0.0
    lu = splu(diags([lower, main, upper], [-1, 0, 1], format="csc"))

    dW = np.asarray(w.increments[:steps, 0])
    y = fv.copy()
    rows = steps + 1 if keep == "all" else 2
    out = np.empty((rows, n))
    out[-1] = fv
    for k in range(steps - 1, -1, -1):
        yx = _ddx(y, dx)
        rhs = y + dt * (b * yx - quad_coeff * y * y) + s1 * yx * dW[k]
        if milstein:
            rhs += 0.5 * s1 * _ddx(s1 * yx, dx) * (dW[k] ** 2 - dt)
        rhs[0] = rhs[-1] = 0.0
        y = lu.solve(rhs)
        np.maximum(y, 0.0, out=y)
        if not np.all(np.isfinite(y)):
            raise StabilityViolation(f"non-finite solution at step {k}")
        if keep == "all":
            out[k] = y
    if keep != "all":
        out[0] = y
    return BackwardSolution(t=float(t), dt=dt, x=x, y=out, f=fv, quad_coeff=float(quad_coeff))


def conditional_laplace(mu: AtomicMeasure, sol: BackwardSolution) -> float:
    """``exp(-<mu, y_{0,t}>)`` with ``y`` interpolated linearly at the atoms."""
    if mu.size == 0:
        return 1.0
    if mu.dim != 1:
        raise SupportOutsideGrid("the backward solver is one-dimensional")
    p = mu.positions[:, 0]
    if p.min() < sol.x[0] or p.max() > sol.x[-1]:
        raise SupportOutsideGrid("mu has atoms outside the grid")
    return float(math.exp(-np.dot(mu.masses, np.interp(p, sol.x, sol.y[0]))))
