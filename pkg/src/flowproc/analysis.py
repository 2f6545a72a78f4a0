"""Post-processing: Hölder exponents, box counts and Monte Carlo summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .model import AtomicMeasure, DensityField

__all__ = [
    "InsufficientData",
    "RegressionReport",
    "McSummary",
    "estimate_holder",
    "structure_function",
    "box_occupancy",
    "mc_summary",
    "combined_z",
    "fbm_paths",
]


class InsufficientData(ValueError):
    pass


@dataclass(frozen=True)
class RegressionReport:
    """Least-squares fit of ``log S(delta)`` on ``log delta``; ``exponent = slope / 2`` clipped to [0, 1]."""

    scales: np.ndarray = field(repr=False)
    log_moments: np.ndarray = field(repr=False)
    slope: float
    slope_ci: tuple[float, float]
    intercept: float
    exponent: float
    fields: int

    def rows(self) -> list[dict]:
        return [{"scale": float(s), "log_scale": float(math.log(s)), "log_moment": float(m)}
                for s, m in zip(self.scales, self.log_moments)]


@dataclass(frozen=True)
class McSummary:
    mean: float
    variance: float
    se: float
    ci99: tuple[float, float]
    n: int


def _values(fields: Sequence) -> tuple[np.ndarray, float]:
    if len(fields) == 0:
        raise InsufficientData("no fields")
    if isinstance(fields[0], DensityField):
        dx = fields[0].dx
        if any(not math.isclose(f.dx, dx) or f.values.shape != fields[0].values.shape for f in fields):
            raise ValueError("fields must share one grid")
        return np.stack([f.values for f in fields]), dx
    raise TypeError("expected DensityField snapshots")


def structure_function(values: np.ndarray, lags: Sequence[int]) -> np.ndarray:
    """``mean |X(x + lag) - X(x)|^2`` pooled over rows and positions."""
    return np.array([np.mean((values[:, k:] - values[:, :-k]) ** 2) for k in lags])


def default_lags(n: int, lo: int = 4, ratio: float = 16.0, count: int = 9) -> np.ndarray:
    hi = min(int(lo * ratio), n // 4)
    return np.unique(np.round(np.geomspace(lo, hi, count)).astype(int))


def estimate_holder(fields: Sequence[DensityField], scales: Sequence[float] | None = None,
                    min_fields: int = 100) -> RegressionReport:
    """Spatial Hölder exponent from the pooled second-order structure function.

    ``scales`` are physical increments and must be at least ``4 dx``; they are
    rounded to whole grid lags. The default is 9 lags from ``4 dx`` to
    ``64 dx`` spaced geometrically.
    """
    if len(fields) < min_fields:
        raise InsufficientData(f"need at least {min_fields} fields, got {len(fields)}")
    vals, dx = _values(fields)
    n = vals.shape[1]
    if scales is None:
        lags = default_lags(n)
    else:
        lags = np.unique(np.round(np.asarray(scales, float) / dx).astype(int))
        if lags.min() < 4:
            raise InsufficientData("scales below 4 dx measure the grid, not the field")
    if lags.size < 4 or lags.max() < 10 * lags.min() * (1 - 1e-9) or lags.max() >= n:
        raise InsufficientData("need at least 4 scales spanning a decade inside the grid")
    S = structure_function(vals, lags)
    if np.any(S <= 0):
        raise InsufficientData("structure function vanishes at some scale")
    x = np.log(lags * dx)
    y = np.log(S)
    fit = stats.linregress(x, y)
    tq = stats.t.ppf(0.975, len(x) - 2)
    ci = (fit.slope - tq * fit.stderr, fit.slope + tq * fit.stderr)
    expo = float(np.clip(fit.slope / 2, 0.0, 1.0))
    return RegressionReport(scales=lags * dx, log_moments=y, slope=float(fit.slope), slope_ci=ci,
                            intercept=float(fit.intercept), exponent=expo, fields=len(fields))


def box_occupancy(m: AtomicMeasure, eps: float) -> tuple[int, float]:
    """Number of ``eps``-cells of the lattice ``eps Z^d`` holding an atom, and their total volume."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    if m.size == 0:
        return 0, 0.0
    cells = np.floor(m.positions / eps).astype(np.int64)
    count = int(np.unique(cells, axis=0).shape[0])
    return count, count * eps ** m.dim


def mc_summary(samples) -> McSummary:
    """Mean, unbiased variance, standard error and a normal-approximation 99% interval."""
    x = np.asarray(samples, float).reshape(-1)
    if x.size < 2:
        raise InsufficientData("need at least two samples")
    mean = float(x.mean())
    var = float(x.var(ddof=1))
    se = math.sqrt(var / x.size)
    z = stats.norm.ppf(0.995)
    return McSummary(mean, var, se, (mean - z * se, mean + z * se), int(x.size))


def combined_z(a: McSummary, b: McSummary) -> float:
    """``|mean_a - mean_b|`` in units of the combined standard error."""
    se = math.hypot(a.se, b.se)
    return abs(a.mean - b.mean) / se if se > 0 else (0.0 if a.mean == b.mean else math.inf)


def fbm_paths(hurst: float, n: int, dx: float, count: int, seed: int) -> np.ndarray:
    """Fractional Brownian motion rows on ``n`` nodes of spacing ``dx`` (Davies-Harte embedding).

    ``E |B(x) - B(y)|^2 = |x - y|^(2H)`` exactly, so the structure function has
    slope ``2H`` at every scale; used to calibrate :func:`estimate_holder`.
    """
    if not 0 < hurst < 1:
        raise ValueError("hurst must lie in (0, 1)")
    m = n - 1
    k = np.arange(m + 1, dtype=float)
    gamma = 0.5 * ((k + 1) ** (2 * hurst) - 2 * k ** (2 * hurst) + np.abs(k - 1) ** (2 * hurst))
    row = np.concatenate([gamma, gamma[-2:0:-1]])
    lam = np.fft.fft(row).real
    if lam.min() < -1e-9 * lam.max():
        raise ValueError("circulant embedding is not nonnegative")
    lam = np.clip(lam, 0, None)
    size = row.shape[0]
    rng = np.random.Generator(np.random.PCG64(seed))
    z = rng.standard_normal((count, size)) + 1j * rng.standard_normal((count, size))
    incr = np.fft.fft(np.sqrt(lam / size) * z, axis=1).real[:, :m]
    paths = np.zeros((count, n))
    np.cumsum(incr * dx ** hurst, axis=1, out=paths[:, 1:])
    return paths
