"""Model coefficients, measures, grid fields and Gaussian kernels.

A particle moves by ``dx = b(x) dt + sigma1(x) dW + sigma2(x) dB`` where ``W`` is
shared by the whole population and ``B`` is private. The generator is
``L f = b . grad f + 1/2 sum a_ij d_ij f`` with ``a = sigma1 sigma1^T + sigma2 sigma2^T``.

Closed-form transition densities are only provided for constant coefficients;
anything else must be estimated by simulation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "ModelError",
    "EllipticityViolation",
    "BoundViolation",
    "NonpositiveTime",
    "UnsupportedCoefficients",
    "GridTooCoarse",
    "Coefficients",
    "AtomicMeasure",
    "DensityField",
    "make_coefficients",
    "gaussian_kernel",
    "transition_p0",
    "pair_transition_q0",
    "discretize_L",
    "discretize_L_star",
    "integrate",
    "dirac",
    "coefficient_table",
    "FAMILY_CODES",
]

FAMILY_CODES = {"constant": 0, "sine": 1, "tanh": 2}


class ModelError(ValueError):
    pass


class EllipticityViolation(ModelError):
    pass


class BoundViolation(ModelError):
    pass


class NonpositiveTime(ModelError):
    pass


class UnsupportedCoefficients(ModelError):
    pass


class GridTooCoarse(ModelError):
    pass


# ---------------------------------------------------------------------------
# coefficients


def _scalar_family(spec) -> tuple[Callable[[np.ndarray], np.ndarray], bool, float]:
    """Scalar profile from a number or a named family. Returns (g, is_constant, value)."""
    if isinstance(spec, (int, float)):
        v = float(spec)
        return (lambda x: np.full(np.shape(x), v)), True, v
    if not isinstance(spec, Mapping):
        raise ModelError(f"cannot interpret coefficient spec {spec!r}")
    fam = spec.get("family", "constant")
    offset = float(spec.get("offset", 0.0))
    amp = float(spec.get("amplitude", 0.0))
    freq = float(spec.get("frequency", 1.0))
    phase = float(spec.get("phase", 0.0))
    if fam == "constant":
        v = float(spec.get("value", offset))
        return (lambda x: np.full(np.shape(x), v)), True, v
    if fam == "sine":
        return (lambda x: offset + amp * np.sin(freq * np.asarray(x, float) + phase)), False, math.nan
    if fam == "tanh":
        return (lambda x: offset + amp * np.tanh(freq * np.asarray(x, float))), False, math.nan
    raise ModelError(f"unknown coefficient family {fam!r}")


@dataclass(frozen=True)
class Coefficients:
    """Drift ``b`` and diffusion matrices ``sigma1`` (environment) and ``sigma2`` (private).

    The callables are vectorized: ``b(x)`` maps ``(n, d)`` to ``(n, d)`` and the
    sigmas map ``(n, d)`` to ``(n, d, d)``. For ``kind == "constant"`` the
    constant arrays are also kept in ``b0``, ``s1``, ``s2``.
    """

    dim: int
    b: Callable[[np.ndarray], np.ndarray]
    sigma1: Callable[[np.ndarray], np.ndarray]
    sigma2: Callable[[np.ndarray], np.ndarray]
    delta: float
    K: float
    kind: str = "constant"
    b0: np.ndarray | None = None
    s1: np.ndarray | None = None
    s2: np.ndarray | None = None
    spec: dict = field(default_factory=dict, compare=False)

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def a(self, x: np.ndarray) -> np.ndarray:
        s1 = self.sigma1(x)
        s2 = self.sigma2(x)
        return s1 @ np.swapaxes(s1, -1, -2) + s2 @ np.swapaxes(s2, -1, -2)

    @property
    def a0(self) -> np.ndarray:
        self._require_constant()
        return self.s1 @ self.s1.T + self.s2 @ self.s2.T

    @property
    def env_cov(self) -> np.ndarray:
        """``sigma1 sigma1^T`` for constant coefficients: covariance rate shared by all particles."""
        self._require_constant()
        return self.s1 @ self.s1.T

    def _require_constant(self) -> None:
        if not self.is_constant:
            raise UnsupportedCoefficients("closed forms need constant coefficients")

    def profiles(self, x: np.ndarray, h: float = 1e-4) -> dict[str, np.ndarray]:
        """d = 1 scalar profiles on nodes ``x``: b, b', sigma1, sigma1', a, a', a''.

        Derivatives are centered difference quotients with step ``h``
        (exactly zero for constant coefficients).
        """
        if self.dim != 1:
            raise UnsupportedCoefficients("scalar profiles exist only for d = 1")
        x = np.asarray(x, float)

        def ev(fn, pts):
            return fn(pts[:, None]).reshape(len(pts), -1)[:, 0]

        def av(pts):
            return self.a(pts[:, None]).reshape(len(pts))

        out = {"b": ev(self.b, x), "sigma1": ev(self.sigma1, x), "a": av(x)}
        if self.is_constant:
            z = np.zeros_like(x)
            out.update(db=z, dsigma1=z.copy(), da=z.copy(), dda=z.copy())
            return out
        xp, xm = x + h, x - h
        out["db"] = (ev(self.b, xp) - ev(self.b, xm)) / (2 * h)
        out["dsigma1"] = (ev(self.sigma1, xp) - ev(self.sigma1, xm)) / (2 * h)
        out["da"] = (av(xp) - av(xm)) / (2 * h)
        out["dda"] = (av(xp) - 2 * out["a"] + av(xm)) / (h * h)
        return out


def _family_row(spec) -> list[float]:
    if isinstance(spec, (list, tuple, np.ndarray)):
        spec = float(np.asarray(spec, float).reshape(-1)[0])
    if isinstance(spec, (int, float)):
        return [0.0, float(spec), 0.0, 0.0, 0.0]
    fam = spec.get("family", "constant")
    if fam == "constant":
        return [0.0, float(spec.get("value", spec.get("offset", 0.0))), 0.0, 0.0, 0.0]
    return [float(FAMILY_CODES[fam]), float(spec.get("offset", 0.0)), float(spec.get("amplitude", 0.0)),
            float(spec.get("frequency", 1.0)), float(spec.get("phase", 0.0))]


def coefficient_table(c: Coefficients) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray | None]:
    """Plain arrays for compiled kernels: ``(b0, s1, s2, table)``.

    Constant coefficients give ``b0`` of shape ``(d,)``, the two matrices and
    ``table = None``. Parametric ``d = 1`` coefficients give a ``(3, 5)`` table
    with rows ``b, sigma1, sigma2`` and columns
    ``(family code, offset, amplitude, frequency, phase)``.
    """
    if c.is_constant:
        return (np.ascontiguousarray(c.b0, float), np.ascontiguousarray(c.s1, float),
                np.ascontiguousarray(c.s2, float), None)
    rows = [_family_row(c.spec.get("b", 0.0)), _family_row(c.spec.get("sigma1", 0.0)),
            _family_row(c.spec.get("sigma2", 1.0))]
    z = np.zeros((1, 1))
    return np.zeros(1), z, z.copy(), np.array(rows, float)


def _matrix_callable(spec, dim: int, name: str):
    """Callable (n, d) -> (n, d, d) plus the constant matrix when there is one."""
    if isinstance(spec, (list, tuple, np.ndarray)):
        m = np.asarray(spec, float)
        if m.ndim == 0:
            m = m * np.eye(dim)
        elif m.ndim == 1:
            m = np.diag(m)
        if m.shape != (dim, dim):
            raise ModelError(f"{name} must be {dim}x{dim}, got shape {m.shape}")
        return (lambda x: np.broadcast_to(m, (np.shape(x)[0], dim, dim)).copy()), m
    g, const, v = _scalar_family(spec)
    if const:
        m = v * np.eye(dim)
        return (lambda x: np.broadcast_to(m, (np.shape(x)[0], dim, dim)).copy()), m
    if dim != 1:
        raise ModelError(f"parametric {name} is only supported in d = 1")
    return (lambda x: g(np.asarray(x, float)[:, 0]).reshape(-1, 1, 1)), None


def _vector_callable(spec, dim: int):
    if isinstance(spec, (list, tuple, np.ndarray)):
        v = np.asarray(spec, float).reshape(dim)
        return (lambda x: np.broadcast_to(v, (np.shape(x)[0], dim)).copy()), v
    g, const, val = _scalar_family(spec)
    if const:
        v = np.full(dim, val)
        return (lambda x: np.broadcast_to(v, (np.shape(x)[0], dim)).copy()), v
    if dim != 1:
        raise ModelError("parametric drift is only supported in d = 1")
    return (lambda x: g(np.asarray(x, float)[:, 0]).reshape(-1, 1)), None


def make_coefficients(spec: Mapping) -> Coefficients:
    """Build and validate coefficients from a plain mapping.

    Keys: ``dim`` (default 1); ``b``, ``sigma1``, ``sigma2`` as numbers,
    vectors/matrices or ``{"family": "sine"|"tanh"|"constant", ...}``;
    optional ``delta`` and ``K`` bounds; optional ``probe`` as
    ``{"low", "high", "points"}`` (default ``-5, 5, 201``).

    The bounds are checked on the probe grid only. When ``delta`` or ``K`` is
    omitted the observed value is recorded instead.
    """
    dim = int(spec.get("dim", 1))
    if dim < 1:
        raise ModelError("dim must be positive")
    b, b0 = _vector_callable(spec.get("b", 0.0), dim)
    s1, m1 = _matrix_callable(spec.get("sigma1", 0.0), dim, "sigma1")
    s2, m2 = _matrix_callable(spec.get("sigma2", 1.0), dim, "sigma2")
    kind = "constant" if (b0 is not None and m1 is not None and m2 is not None) else "parametric-smooth"

    probe = dict(spec.get("probe", {}))
    lo, hi, npts = float(probe.get("low", -5.0)), float(probe.get("high", 5.0)), int(probe.get("points", 201))
    line = np.linspace(lo, hi, npts)
    if dim == 1:
        pts = line[:, None]
    else:
        # constant coefficients in d > 1: a handful of points suffices
        pts = np.stack([line[:: max(1, npts // 8)]] * dim, axis=1)

    s2v = s2(pts)
    eig = np.linalg.eigvalsh(np.swapaxes(s2v, -1, -2) @ s2v)
    lam_min = float(eig.min())
    delta = spec.get("delta")
    if lam_min <= 0:
        raise EllipticityViolation("sigma2^T sigma2 is not positive definite on the probe grid")
    if delta is None:
        delta = lam_min / 2
    elif not (delta > 0 and lam_min >= 2 * delta - 1e-12):
        raise EllipticityViolation(
            f"smallest eigenvalue of sigma2^T sigma2 is {lam_min:.6g}, below 2*delta = {2 * delta:.6g}"
        )

    h = (hi - lo) / (npts - 1)
    norms = []
    for fn in (b, s1, s2):
        v = fn(pts).reshape(len(pts), -1)
        norms.append(np.abs(v).max())
        if dim == 1 and kind != "constant":
            d1 = np.diff(v, axis=0) / h
            d2 = np.diff(v, 2, axis=0) / h**2
            norms.extend([np.abs(d1).max(), np.abs(d2).max()])
    observed = float(max(norms))
    K = spec.get("K")
    if K is None:
        K = max(observed, 1e-300)
    elif observed > K * (1 + 1e-9):
        raise BoundViolation(f"coefficient norms reach {observed:.6g} > K = {K}")

    av = s1(pts) @ np.swapaxes(s1(pts), -1, -2) + s2v @ np.swapaxes(s2v, -1, -2)
    if np.linalg.eigvalsh(av).min() <= 0:
        raise EllipticityViolation("a = sigma1 sigma1^T + sigma2 sigma2^T is not positive definite")

    return Coefficients(
        dim=dim, b=b, sigma1=s1, sigma2=s2, delta=float(delta), K=float(K), kind=kind,
        b0=b0, s1=m1, s2=m2, spec=dict(spec),
    )


# ---------------------------------------------------------------------------
# measures and fields


@dataclass(frozen=True)
class AtomicMeasure:
    """Finite weighted point measure ``sum_i m_i delta_{x_i}``; positions are ``(n, d)``."""

    positions: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, float)
        if pos.ndim == 1:
            pos = pos[:, None]
        m = np.asarray(self.masses, float).reshape(-1)
        if pos.shape[0] != m.shape[0]:
            raise ValueError("positions and masses differ in length")
        if np.any(m < 0):
            raise ValueError("atom masses must be nonnegative")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "masses", m)

    @classmethod
    def zero(cls, dim: int = 1) -> "AtomicMeasure":
        return cls(np.zeros((0, dim)), np.zeros(0))

    @property
    def dim(self) -> int:
        return self.positions.shape[1]

    @property
    def size(self) -> int:
        return self.masses.shape[0]

    @property
    def total_mass(self) -> float:
        return float(math.fsum(self.masses))

    def tempered_mass(self, lam: float) -> float:
        r = np.linalg.norm(self.positions, axis=1)
        return float(np.sum(self.masses * np.exp(-lam * r)))

    def is_tempered(self, lam: float) -> bool:
        return lam > 0 and math.isfinite(self.tempered_mass(lam))


def dirac(x=0.0, mass: float = 1.0, dim: int = 1) -> AtomicMeasure:
    pos = np.broadcast_to(np.asarray(x, float), (dim,)).reshape(1, dim)
    return AtomicMeasure(pos, np.array([mass]))


def integrate(m: AtomicMeasure, f: Callable[[np.ndarray], np.ndarray]) -> float:
    """``<m, f>``. ``f`` takes an ``(n, d)`` array, or ``(n,)`` when ``d = 1``."""
    if m.size == 0:
        return 0.0
    x = m.positions[:, 0] if m.dim == 1 else m.positions
    return float(np.dot(m.masses, np.asarray(f(x), float).reshape(-1)))


@dataclass
class DensityField:
    """Nonnegative density on the regular grid ``x_min, x_min + dx, ..., x_max``."""

    x_min: float
    x_max: float
    dx: float
    values: np.ndarray
    time: float = 0.0

    @classmethod
    def on_grid(cls, x_min: float, x_max: float, dx: float, values=None, time: float = 0.0):
        n = int(round((x_max - x_min) / dx)) + 1
        vals = np.zeros(n) if values is None else np.asarray(values, float)
        if vals.shape[-1] != n:
            raise ValueError(f"expected {n} nodes, got {vals.shape[-1]}")
        return cls(float(x_min), float(x_min + (n - 1) * dx), float(dx), vals, time)

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.values.shape[-1])

    @property
    def mass(self):
        return self.values.sum(axis=-1) * self.dx

    def pair(self, phi: Callable[[np.ndarray], np.ndarray]):
        """``<X, phi>`` by the rectangle rule on the nodes."""
        return (self.values * phi(self.x)).sum(axis=-1) * self.dx

    def copy(self) -> "DensityField":
        return DensityField(self.x_min, self.x_max, self.dx, self.values.copy(), self.time)


# ---------------------------------------------------------------------------
# kernels


def gaussian_kernel(t: float, x, dim: int = 1):
    """Centered normal density with covariance ``t * I``.

    For ``dim == 1`` any array shape is a batch of points; otherwise the last
    axis holds the coordinates.
    """
    if not t > 0:
        raise NonpositiveTime(f"t must be positive, got {t}")
    x = np.asarray(x, float)
    r2 = x * x if dim == 1 else np.sum(x * x, axis=-1)
    return (2 * math.pi * t) ** (-dim / 2) * np.exp(-r2 / (2 * t))


def _gauss_pdf(diff: np.ndarray, cov: np.ndarray) -> np.ndarray:
    k = cov.shape[0]
    chol = np.linalg.cholesky(cov)
    z = np.linalg.solve(chol, diff[..., None])[..., 0] if diff.ndim > 1 else np.linalg.solve(chol, diff)
    logdet = 2 * np.sum(np.log(np.diag(chol)))
    return np.exp(-0.5 * np.sum(z * z, axis=-1) - 0.5 * (k * math.log(2 * math.pi) + logdet))


def _points(v, dim: int) -> np.ndarray:
    v = np.asarray(v, float)
    return v[..., None] if dim == 1 else v


def transition_p0(c: Coefficients, t: float, x, y):
    """Transition density of one particle: Gaussian, mean ``x + b t``, covariance ``a t``."""
    if not t > 0:
        raise NonpositiveTime(f"t must be positive, got {t}")
    if not c.is_constant:
        raise UnsupportedCoefficients("p0 has a closed form only for constant coefficients")
    diff = _points(y, c.dim) - _points(x, c.dim) - c.b0 * t
    diff = np.broadcast_arrays(diff)[0]
    shape = diff.shape[:-1]
    out = _gauss_pdf(diff.reshape(-1, c.dim), c.a0 * t)
    return out.reshape(shape) if shape else float(out[0])


def pair_transition_q0(c: Coefficients, t: float, from_, to):
    """Joint transition density of two particles driven by the same ``W``.

    ``from_`` and ``to`` are pairs ``(x1, x2)``; in ``d = 1`` the entries may be
    arrays that broadcast together.
    """
    if not t > 0:
        raise NonpositiveTime(f"t must be positive, got {t}")
    if not c.is_constant:
        raise UnsupportedCoefficients("q0 has a closed form only for constant coefficients")
    d = c.dim
    a, e = c.a0 * t, c.env_cov * t
    cov = np.block([[a, e], [e, a]])
    x1, x2 = (_points(v, d) for v in from_)
    y1, y2 = (_points(v, d) for v in to)
    diff = np.concatenate(np.broadcast_arrays(y1 - x1 - c.b0 * t, y2 - x2 - c.b0 * t), axis=-1)
    shape = diff.shape[:-1]
    if np.linalg.eigvalsh(cov).min() <= 1e-300:
        raise UnsupportedCoefficients("degenerate pair covariance")
    out = _gauss_pdf(diff.reshape(-1, 2 * d), cov)
    return out.reshape(shape) if shape else float(out[0])


# ---------------------------------------------------------------------------
# d = 1 finite differences


def _d1(u: np.ndarray, dx: float) -> np.ndarray:
    """First derivative: centered inside, second-order one-sided at the ends."""
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - u[..., :-2]) / (2 * dx)
    out[..., 0] = (-3 * u[..., 0] + 4 * u[..., 1] - u[..., 2]) / (2 * dx)
    out[..., -1] = (3 * u[..., -1] - 4 * u[..., -2] + u[..., -3]) / (2 * dx)
    return out


def _d2(u: np.ndarray, dx: float) -> np.ndarray:
    """Second derivative: centered inside, second-order one-sided at the ends."""
    out = np.empty_like(u)
    out[..., 1:-1] = (u[..., 2:] - 2 * u[..., 1:-1] + u[..., :-2]) / dx**2
    out[..., 0] = (2 * u[..., 0] - 5 * u[..., 1] + 4 * u[..., 2] - u[..., 3]) / dx**2
    out[..., -1] = (2 * u[..., -1] - 5 * u[..., -2] + 4 * u[..., -3] - u[..., -4]) / dx**2
    return out


def _check_grid(c: Coefficients, field: DensityField, budget: float) -> dict:
    if c.dim != 1:
        raise UnsupportedCoefficients("finite-difference operators are d = 1 only")
    if not field.dx > 0:
        raise GridTooCoarse("grid spacing must be positive")
    if field.values.shape[-1] < 4:
        raise GridTooCoarse("need at least 4 nodes")
    prof = c.profiles(field.x)
    if field.dx**2 * np.abs(prof["dda"]).max() > budget:
        raise GridTooCoarse(f"dx^2 max|a''| exceeds the budget {budget}")
    return prof


def discretize_L(c: Coefficients, field: DensityField, budget: float = 1e-2) -> DensityField:
    """``L u = 1/2 a u'' + b u'`` on the grid."""
    p = _check_grid(c, field, budget)
    u = field.values
    out = 0.5 * p["a"] * _d2(u, field.dx) + p["b"] * _d1(u, field.dx)
    return DensityField(field.x_min, field.x_max, field.dx, out, field.time)


def discretize_L_star(c: Coefficients, field: DensityField, budget: float = 1e-2) -> DensityField:
    """``L* u = 1/2 a u'' + (a' - b) u' + (1/2 a'' - b') u`` on the grid."""
    p = _check_grid(c, field, budget)
    u = field.values
    out = (
        0.5 * p["a"] * _d2(u, field.dx)
        + (p["da"] - p["b"]) * _d1(u, field.dx)
        + (0.5 * p["dda"] - p["db"]) * u
    )
    return DensityField(field.x_min, field.x_max, field.dx, out, field.time)
