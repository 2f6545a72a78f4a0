"""Experiment harness: ``flowproc <command> --config <path> [--seed N] [--replicates N] [--out DIR]``.

A run reads one JSON config, fills in defaults, validates every field, runs
the named pipeline and writes CSV tables plus a JSON summary. Nothing is
written when the config is invalid. Exit status is 0 on success, 2 when a
built-in check fails (the reports are still written) and 1 on any error.

``FLOWPROC_THREADS`` caps the number of worker processes. Replicates are
split into contiguous blocks; every replicate's randomness depends only on
``(seed, replicate index)``, and results are gathered by index, so the output
does not depend on the worker count.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import multiprocessing
import os
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import analysis, duality, loglaplace, particles, snake, spde
from .model import AtomicMeasure, Coefficients, DensityField, ModelError, make_coefficients
from .noise import make_noise_path, replicate_seed

__all__ = [
    "SCHEMA_VERSION",
    "COMMANDS",
    "ConfigError",
    "CheckFailure",
    "IoError",
    "Report",
    "resolve_config",
    "run_experiment",
    "write_report",
    "main",
]

SCHEMA_VERSION = "1.0"
COMMANDS = ("particles", "snake", "spde", "loglaplace", "duality", "verify-all")


class ConfigError(ValueError):
    pass


class CheckFailure(RuntimeError):
    pass


class IoError(OSError):
    pass


# ---------------------------------------------------------------------------
# configuration

_MODEL_DEFAULTS = {
    "dim": 1,
    "b": 0.0,
    "sigma1": 1.0,
    "sigma2": 1.0,
    "delta": None,
    "K": None,
    "mu": {"atoms": [{"x": 0.0, "mass": 1.0}]},
}

_NUMERICS_DEFAULTS: dict[str, dict[str, Any]] = {
    "particles": {"h": 0.01, "dt": 1e-3, "times": [1.0], "population_cap": particles.DEFAULT_CAP},
    "snake": {"h": 0.05, "ds": 4e-6, "levels": [0.0, 0.25], "horizon": None, "level_cap": None,
              "dl": None, "corrected": True},
    "spde": {"x_min": -8.0, "x_max": 8.0, "dx": 0.01, "dt": 2.5e-5, "t_final": 0.5, "snapshot_times": [0.5],
             "environment": True, "branching": True, "leak_fraction": spde.LEAK_FRACTION},
    "loglaplace": {"t": 0.5, "dt": 1e-3, "x_min": -6.0, "x_max": 6.0, "dx": 0.01,
                   "f": {"height": 1.0, "half_width": 1.0, "ramp": 0.5}, "quad_coeff": loglaplace.MP_QUADRATIC,
                   "milstein": True, "inner_replicates": 0, "h": 0.01, "tolerance": 0.10},
    "duality": {"n0": 2, "t": 1.0, "x_min": -10.0, "x_max": 10.0, "points": 128},
    "verify-all": {},
}

_MC_DEFAULTS = {
    "particles": 2000, "snake": 2000, "spde": 200, "loglaplace": 30, "duality": 10000, "verify-all": None,
}

_FUNCTIONAL_KINDS = ("one", "moment", "gaussian", "plateau")


def _err(msg: str) -> ConfigError:
    return ConfigError(msg)


def _merge(defaults: Mapping, given: Mapping, where: str) -> dict:
    if not isinstance(given, Mapping):
        raise _err(f"{where} must be an object")
    unknown = set(given) - set(defaults)
    if unknown:
        raise _err(f"unknown keys in {where}: {sorted(unknown)}")
    out = copy.deepcopy(dict(defaults))
    out.update(copy.deepcopy(dict(given)))
    return out


def _num(block: Mapping, key: str, where: str, positive: bool = False, allow_none: bool = False) -> float | None:
    v = block[key]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise _err(f"{where}.{key} must be a finite number")
    if positive and not v > 0:
        raise _err(f"{where}.{key} must be positive")
    return float(v)


def _int(block: Mapping, key: str, where: str, lo: int = 0) -> int:
    v = block[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise _err(f"{where}.{key} must be an integer >= {lo}")
    return v


def _bool(block: Mapping, key: str, where: str) -> bool:
    if not isinstance(block[key], bool):
        raise _err(f"{where}.{key} must be true or false")
    return block[key]


def _times(block: Mapping, key: str, where: str) -> list[float]:
    v = block[key]
    if not isinstance(v, list) or not v:
        raise _err(f"{where}.{key} must be a nonempty list of numbers")
    out = []
    for t in v:
        if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t) or t < 0:
            raise _err(f"{where}.{key} must hold finite nonnegative numbers")
        out.append(float(t))
    return out


def build_measure(spec: Mapping, dim: int) -> AtomicMeasure:
    """``{"atoms": [{"x": number or list, "mass": number}, ...]}``."""
    if not isinstance(spec, Mapping) or set(spec) != {"atoms"} or not isinstance(spec["atoms"], list):
        raise _err('model.mu must be {"atoms": [...]}')
    pos, mass = [], []
    for a in spec["atoms"]:
        if not isinstance(a, Mapping) or set(a) != {"x", "mass"}:
            raise _err('each atom needs exactly "x" and "mass"')
        x = np.atleast_1d(np.asarray(a["x"], float))
        m = a["mass"]
        if x.shape != (dim,) or not np.all(np.isfinite(x)):
            raise _err(f"atom position must have {dim} finite coordinates")
        if isinstance(m, bool) or not isinstance(m, (int, float)) or not (m >= 0 and math.isfinite(m)):
            raise _err("atom mass must be a finite nonnegative number")
        pos.append(x)
        mass.append(float(m))
    if not pos:
        return AtomicMeasure.zero(dim)
    return AtomicMeasure(np.array(pos), np.array(mass))


def _sq(x: np.ndarray, center: float) -> np.ndarray:
    x = np.asarray(x, float)
    return np.sum((x - center) ** 2, axis=-1) if x.ndim == 2 else (x - center) ** 2


def build_functional(spec: Mapping) -> tuple[str, Callable[[np.ndarray], np.ndarray]]:
    """Test function from ``{"kind": ..., parameters}``; returns ``(name, phi)``.

    Kinds: ``one``; ``moment`` (``power``, first coordinate); ``gaussian``
    (``center``, ``variance``: ``exp(-|x - center|^2 / (2 variance))``);
    ``plateau`` (``height``, ``half_width``, ``ramp``).
    """
    if not isinstance(spec, Mapping) or spec.get("kind") not in _FUNCTIONAL_KINDS:
        raise _err(f"functional kind must be one of {_FUNCTIONAL_KINDS}")
    kind = spec["kind"]
    params = {
        "one": {},
        "moment": {"power": 1},
        "gaussian": {"center": 0.0, "variance": 0.5},
        "plateau": {"height": 1.0, "half_width": 1.0, "ramp": 0.5},
    }[kind]
    p = _merge({"kind": kind, "name": None, **params}, spec, "functional")
    for k in params:
        _num(p, k, "functional")
    name = p["name"] or (kind if not params else kind + "_" + "_".join(f"{p[k]:g}" for k in params))
    if kind == "one":
        fn = lambda x: np.ones(np.shape(x)[0])
    elif kind == "moment":
        power = float(p["power"])
        fn = lambda x: (np.asarray(x, float) if np.ndim(x) == 1 else np.asarray(x, float)[:, 0]) ** power
    elif kind == "gaussian":
        c, v = float(p["center"]), float(p["variance"])
        if not v > 0:
            raise _err("gaussian variance must be positive")
        fn = lambda x: np.exp(-_sq(x, c) / (2 * v))
    else:
        g = loglaplace.plateau(float(p["height"]), float(p["half_width"]), float(p["ramp"]))
        fn = lambda x: g(x if np.ndim(x) == 1 else np.sqrt(_sq(x, 0.0)))
    return str(name), fn


def resolve_config(raw: Mapping, command: str, seed: int | None = None, replicates: int | None = None,
                   out: str | None = None) -> dict:
    """Expand defaults, apply command-line overrides and validate. Raises :class:`ConfigError`."""
    if command not in COMMANDS:
        raise _err(f"unknown command {command!r}; expected one of {COMMANDS}")
    if not isinstance(raw, Mapping):
        raise _err("config must be a JSON object")
    top = {"command": command, "model": {}, "numerics": {}, "mc": {}, "output": {},
           "functionals": [{"kind": "one"}]}
    cfg = _merge(top, raw, "config")
    if cfg["command"] != command:
        raise _err(f"config names command {cfg['command']!r} but {command!r} was requested")
    cfg["model"] = _merge(_MODEL_DEFAULTS, cfg["model"], "model")
    cfg["numerics"] = _merge(_NUMERICS_DEFAULTS[command], cfg["numerics"], "numerics")
    cfg["mc"] = _merge({"replicates": _MC_DEFAULTS[command], "seed": 0}, cfg["mc"], "mc")
    cfg["output"] = _merge({"dir": "flowproc-out", "prefix": command, "snapshots": False}, cfg["output"], "output")
    if seed is not None:
        cfg["mc"]["seed"] = seed
    if replicates is not None:
        cfg["mc"]["replicates"] = replicates
    if out is not None:
        cfg["output"]["dir"] = out
    _validate(cfg)
    return cfg


def _validate(cfg: dict) -> None:
    cmd = cfg["command"]
    mc, out = cfg["mc"], cfg["output"]
    _int(mc, "seed", "mc")
    if mc["replicates"] is not None:
        _int(mc, "replicates", "mc", lo=2)
    elif cmd != "verify-all":
        raise _err("mc.replicates must be set")
    if not isinstance(out["dir"], str) or not out["dir"]:
        raise _err("output.dir must be a nonempty string")
    if not isinstance(out["prefix"], str) or not out["prefix"] or os.sep in out["prefix"]:
        raise _err("output.prefix must be a plain file name stem")
    _bool(out, "snapshots", "output")
    if not isinstance(cfg["functionals"], list):
        raise _err("functionals must be a list")
    for f in cfg["functionals"]:
        build_functional(f)
    model = cfg["model"]
    if cmd != "verify-all":
        try:
            c = make_coefficients({k: v for k, v in model.items() if k != "mu"})
        except (ModelError, ValueError, TypeError) as e:
            raise _err(f"model: {e}") from e
        build_measure(model["mu"], c.dim)
    n = cfg["numerics"]
    w = "numerics"
    if cmd == "particles":
        h = _num(n, "h", w, positive=True)
        dt = _num(n, "dt", w, positive=True)
        if dt > h / 10 * (1 + 1e-12):
            raise _err("numerics.dt must not exceed h / 10")
        ts = _times(n, "times", w)
        if ts != sorted(ts):
            raise _err("numerics.times must be nondecreasing")
        _int(n, "population_cap", w, lo=1)
    elif cmd == "snake":
        _num(n, "h", w, positive=True)
        _num(n, "ds", w, positive=True)
        _times(n, "levels", w)
        _num(n, "horizon", w, positive=True, allow_none=True)
        _num(n, "level_cap", w, positive=True, allow_none=True)
        _num(n, "dl", w, positive=True, allow_none=True)
        _bool(n, "corrected", w)
        if model["mu"]["atoms"] and sum(a["mass"] for a in model["mu"]["atoms"]) <= 0:
            raise _err("snake needs an initial measure of positive mass")
    elif cmd == "spde":
        if c.dim != 1:
            raise _err("spde is one-dimensional")
        for k in ("x_min", "x_max"):
            _num(n, k, w)
        dx = _num(n, "dx", w, positive=True)
        dt = _num(n, "dt", w, positive=True)
        tf = _num(n, "t_final", w, positive=True)
        if not n["x_max"] > n["x_min"]:
            raise _err("numerics.x_max must exceed x_min")
        if any(t > tf * (1 + 1e-12) for t in _times(n, "snapshot_times", w)):
            raise _err("snapshot times must not exceed t_final")
        for k in ("environment", "branching"):
            _bool(n, k, w)
        _num(n, "leak_fraction", w, positive=True)
        grid = np.linspace(n["x_min"], n["x_max"], 101)
        a = c.profiles(grid)["a"]
        if dt > dx * dx / (2 * float(np.max(a))) * (1 + 1e-12):
            raise _err("numerics.dt violates dt <= dx^2 / (2 max a)")
    elif cmd == "loglaplace":
        if c.dim != 1:
            raise _err("loglaplace is one-dimensional")
        for k in ("x_min", "x_max"):
            _num(n, k, w)
        for k in ("t", "dt", "dx", "h", "tolerance"):
            _num(n, k, w, positive=True)
        _num(n, "quad_coeff", w, positive=True)
        _bool(n, "milstein", w)
        _int(n, "inner_replicates", w)
        f = _merge({"height": 1.0, "half_width": 1.0, "ramp": 0.5}, n["f"], "numerics.f")
        for k in f:
            _num(f, k, "numerics.f", positive=(k != "height"))
        if f["height"] < 0:
            raise _err("numerics.f.height must be nonnegative")
        n["f"] = f
        if f["half_width"] + f["ramp"] >= min(-n["x_min"], n["x_max"]):
            raise _err("terminal plateau must vanish before the grid ends")
        if n["inner_replicates"] and n["dt"] > n["h"] / 10 * (1 + 1e-12):
            raise _err("numerics.dt must not exceed h / 10 when particles are coupled")
        steps = n["t"] / n["dt"]
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise _err("numerics.t must be a multiple of dt")
    elif cmd == "duality":
        if not c.is_constant or c.dim != 1:
            raise _err("duality needs constant coefficients in d = 1")
        n0 = _int(n, "n0", w, lo=1)
        if n0 > duality.N_MAX:
            raise _err(f"numerics.n0 must be at most {duality.N_MAX}")
        _num(n, "t", w)
        if n["t"] < 0:
            raise _err("numerics.t must be nonnegative")
        for k in ("x_min", "x_max"):
            _num(n, k, w)
        _int(n, "points", w, lo=8)
        if len(cfg["functionals"]) != 1:
            raise _err("duality takes exactly one functional f; f0 is its tensor power")


# ---------------------------------------------------------------------------
# reports


@dataclass
class Table:
    columns: list[str]
    rows: list[Sequence] = field(default_factory=list)


@dataclass
class Report:
    """CSV tables by file stem suffix, the JSON summary, and the check results."""

    tables: dict[str, Table]
    summary: dict
    checks: list[dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c["passed"] for c in self.checks)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _jsonable(v):
    if isinstance(v, Mapping):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        x = float(v)
        return x if math.isfinite(x) else repr(x)
    return v


def table_csv(t: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(t.columns)
    for r in t.rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def _atomic_write(path: str, text: str) -> None:
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_report(report: Report, output: Mapping) -> list[str]:
    """Write ``<prefix>[_<table>].csv`` for every table and ``<prefix>_summary.json``.

    Each file is written to a temporary name and renamed into place.
    Returns the written paths. Raises :class:`IoError`.
    """
    d, prefix = output["dir"], output["prefix"]
    paths = []
    try:
        os.makedirs(d, exist_ok=True)
        for name, t in report.tables.items():
            p = os.path.join(d, f"{prefix}_{name}.csv" if name else f"{prefix}.csv")
            _atomic_write(p, table_csv(t))
            paths.append(p)
        summary = {"schema_version": SCHEMA_VERSION, **report.summary,
                   "checks": report.checks, "passed": report.passed}
        p = os.path.join(d, f"{prefix}_summary.json")
        _atomic_write(p, json.dumps(_jsonable(summary), indent=2, sort_keys=False) + "\n")
        paths.append(p)
    except OSError as e:
        raise IoError(str(e)) from e
    return paths


def _stats(x) -> dict:
    s = analysis.mc_summary(x)
    return {"mean": s.mean, "variance": s.variance, "se": s.se, "ci99": list(s.ci99), "n": s.n}


def _var_se(x: np.ndarray) -> float:
    """Standard error of the sample variance, from the fourth central moment."""
    x = np.asarray(x, float)
    c = x - x.mean()
    m4 = float(np.mean(c**4))
    v = float(np.mean(c**2))
    return math.sqrt(max(m4 - v * v, 0.0) / x.size)


def _check(name: str, estimate: float, target: float, tolerance: float, kind: str, se: float | None = None) -> dict:
    """``kind`` is ``"abs"`` (``|est - target| <= tolerance``) or ``"rel"`` (relative to ``|target|``)."""
    dev = abs(estimate - target)
    ok = dev <= tolerance if kind == "abs" else dev <= tolerance * abs(target)
    return {"name": name, "estimate": float(estimate), "target": float(target), "se": se,
            "tolerance": float(tolerance), "tolerance_kind": kind, "passed": bool(ok)}


# ---------------------------------------------------------------------------
# worker pool


def _workers() -> int:
    raw = os.environ.get("FLOWPROC_THREADS")
    cap = os.cpu_count() or 1
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("FLOWPROC_THREADS must be a positive integer") from None
    if n < 1:
        raise ConfigError("FLOWPROC_THREADS must be a positive integer")
    return min(n, cap)


def _blocks(R: int, k: int) -> list[tuple[int, int]]:
    k = max(1, min(k, R))
    edges = [R * i // k for i in range(k + 1)]
    return [(edges[i], edges[i + 1] - edges[i]) for i in range(k) if edges[i + 1] > edges[i]]


def _pmap(fn: Callable, cfg: dict, R: int) -> list:
    """``fn(cfg, offset, count)`` over replicate blocks, in replicate order."""
    blocks = _blocks(R, _workers())
    if len(blocks) == 1:
        return [fn(cfg, *blocks[0])]
    ctx = multiprocessing.get_context("fork" if sys.platform != "win32" else "spawn")
    with ProcessPoolExecutor(max_workers=len(blocks), mp_context=ctx) as ex:
        futs = [ex.submit(fn, cfg, o, n) for o, n in blocks]
        return [f.result() for f in futs]


def _model(cfg: dict) -> tuple[Coefficients, AtomicMeasure]:
    m = cfg["model"]
    c = make_coefficients({k: v for k, v in m.items() if k != "mu"})
    return c, build_measure(m["mu"], c.dim)


def _functionals(cfg: dict) -> tuple[list[str], list[Callable]]:
    pairs = [build_functional(f) for f in cfg["functionals"]]
    return [p[0] for p in pairs], [p[1] for p in pairs]


# ---------------------------------------------------------------------------
# pipelines


def _particles_block(cfg, offset, count):
    c, mu = _model(cfg)
    _, phis = _functionals(cfg)
    n = cfg["numerics"]
    return particles.run_particles(c, mu, n["h"], n["dt"], n["times"], count, cfg["mc"]["seed"], phis=phis,
                                   cap=n["population_cap"], replicate_offset=offset)


def _run_particles(cfg: dict) -> Report:
    names, _ = _functionals(cfg)
    R = cfg["mc"]["replicates"]
    runs = _pmap(_particles_block, cfg, R)
    times = runs[0].times
    counts = np.concatenate([r.counts for r in runs])
    F = np.concatenate([r.functionals for r in runs])
    seeds = [s for r in runs for s in r.seeds]
    pm = runs[0].particle_mass
    cols = ["replicate", "seed", "t", "count", "total_mass"] + names
    rows = [[r, seeds[r], float(t), int(counts[r, q]), float(counts[r, q] * pm), *map(float, F[r, q])]
            for r in range(R) for q, t in enumerate(times)]
    _, mu = _model(cfg)
    per_time = []
    checks = []
    for q, t in enumerate(times):
        ms = _stats(counts[:, q] * pm)
        per_time.append({"t": float(t), "total_mass": ms,
                         "functionals": {nm: _stats(F[:, q, p]) for p, nm in enumerate(names)}})
        checks.append(_check(f"mean_total_mass_t={t:g}", ms["mean"], mu.total_mass, 3 * ms["se"], "abs", ms["se"]))
    return Report({"": Table(cols, rows)}, {"estimates": per_time, "seeds": seeds}, checks)


def _snake_block(cfg, offset, count):
    c, mu = _model(cfg)
    _, phis = _functionals(cfg)
    n = cfg["numerics"]
    return snake.run_snake(c, mu, n["levels"], n["h"], n["ds"], count, cfg["mc"]["seed"],
                           level_cap=n["level_cap"], horizon=math.inf if n["horizon"] is None else n["horizon"],
                           dl=n["dl"], phis=phis, corrected=n["corrected"], replicate_offset=offset)


def _run_snake(cfg: dict) -> Report:
    names, _ = _functionals(cfg)
    R = cfg["mc"]["replicates"]
    runs = _pmap(_snake_block, cfg, R)
    levels = runs[0].levels
    counts = np.concatenate([r.counts for r in runs])
    mass = np.concatenate([r.mass for r in runs])
    diam = np.concatenate([r.diameter for r in runs])
    taus = np.concatenate([r.tau_steps for r in runs])
    F = np.concatenate([r.functionals for r in runs])
    seeds = [s for r in runs for s in r.seeds]
    ds = cfg["numerics"]["ds"]
    cols = ["replicate", "seed", "level", "count", "mass", "diameter", "tau"] + names
    rows = [[r, seeds[r], float(t), int(counts[r, q]), float(mass[r, q]), float(diam[r, q]), float(taus[r] * ds),
             *map(float, F[r, q])] for r in range(R) for q, t in enumerate(levels)]
    _, mu = _model(cfg)
    est, checks = [], []
    for q, t in enumerate(levels):
        ms = _stats(mass[:, q])
        est.append({"level": float(t), "mass": ms, "diameter_median": float(np.median(diam[:, q])),
                    "functionals": {nm: _stats(F[:, q, p]) for p, nm in enumerate(names)}})
        if t == 0:
            checks.append(_check("mass_level_0", ms["mean"], mu.total_mass, 3 * ms["se"], "abs", ms["se"]))
    return Report({"": Table(cols, rows)}, {"estimates": est, "seeds": seeds}, checks)


def _spde_config(cfg: dict, offset: int, count: int) -> spde.SpdeConfig:
    n = cfg["numerics"]
    return spde.SpdeConfig(x_min=n["x_min"], x_max=n["x_max"], dx=n["dx"], dt=n["dt"], t_final=n["t_final"],
                           snapshot_times=tuple(n["snapshot_times"]), replicates=count, seed=cfg["mc"]["seed"],
                           replicate_offset=offset, environment=n["environment"], branching=n["branching"],
                           leak_fraction=n["leak_fraction"])


def _spde_block(cfg, offset, count):
    c, mu = _model(cfg)
    _, phis = _functionals(cfg)
    return spde.run_spde(_spde_config(cfg, offset, count), c, mu, phis)


def _run_spde(cfg: dict) -> Report:
    names, _ = _functionals(cfg)
    R = cfg["mc"]["replicates"]
    runs = _pmap(_spde_block, cfg, R)
    first = runs[0]
    snaps = np.concatenate([r.snapshots for r in runs])
    seeds = [s for r in runs for s in r.seeds]
    dt = cfg["numerics"]["dt"]
    snap_idx = [int(round(t / dt)) for t in first.snapshot_times]
    F = np.concatenate([r.functionals[:, snap_idx] for r in runs])
    dx = cfg["numerics"]["dx"]
    mass = snaps.sum(axis=-1) * dx
    cols = ["replicate", "seed", "t", "mass"] + names
    rows = [[r, seeds[r], float(t), float(mass[r, q]), *map(float, F[r, q])]
            for r in range(R) for q, t in enumerate(first.snapshot_times)]
    tables = {"": Table(cols, rows)}
    if cfg["output"]["snapshots"]:
        tables["snapshots"] = Table(["replicate", "t", "x", "value"],
                                    [[r, float(t), float(x), float(v)] for r in range(R)
                                     for q, t in enumerate(first.snapshot_times)
                                     for x, v in zip(first.x, snaps[r, q])])
    _, mu = _model(cfg)
    est, checks = [], []
    for q, t in enumerate(first.snapshot_times):
        ms = _stats(mass[:, q])
        entry = {"t": float(t), "mass": ms, "functionals": {nm: _stats(F[:, q, p]) for p, nm in enumerate(names)}}
        if R >= 100 and t > 0:
            fields = [DensityField(float(first.x[0]), float(first.x[-1]), dx, snaps[r, q], float(t))
                      for r in range(R)]
            try:
                rep = analysis.estimate_holder(fields)
                entry["holder"] = {"exponent": rep.exponent, "slope": rep.slope, "slope_ci": list(rep.slope_ci),
                                   "rows": rep.rows()}
            except analysis.InsufficientData as e:
                entry["holder"] = {"error": str(e)}
        est.append(entry)
        checks.append(_check(f"mean_mass_t={t:g}", ms["mean"], mu.total_mass, 3 * ms["se"], "abs", ms["se"]))
    return Report(tables, {"estimates": est, "seeds": seeds}, checks)


def _laplace_block(cfg, offset, count):
    c, mu = _model(cfg)
    n = cfg["numerics"]
    f = loglaplace.plateau(**n["f"])
    steps = int(round(n["t"] / n["dt"]))
    out = []
    for r in range(offset, offset + count):
        s = replicate_seed(cfg["mc"]["seed"], r)
        w = make_noise_path(s, n["dt"], max(steps, 1), 1)
        sol = loglaplace.solve_backward(c, f, n["t"], w, (n["x_min"], n["x_max"], n["dx"]),
                                        quad_coeff=n["quad_coeff"], milstein=n["milstein"], keep="final")
        value = loglaplace.conditional_laplace(mu, sol)
        row = {"seed": s, "laplace": value, "y0": sol.y0, "x": sol.x}
        K = n["inner_replicates"]
        if K:
            run = particles.run_particles(c, mu, n["h"], n["dt"], [n["t"]], K, s, phis=[f], env_paths=[w] * K)
            e = np.exp(-run.functionals[:, 0, 0])
            row["particle"] = float(e.mean())
            row["particle_se"] = float(e.std(ddof=1) / math.sqrt(K))
        out.append(row)
    return out


def _run_loglaplace(cfg: dict) -> Report:
    R = cfg["mc"]["replicates"]
    res = [row for blk in _pmap(_laplace_block, cfg, R) for row in blk]
    coupled = cfg["numerics"]["inner_replicates"] > 0
    cols = ["replicate", "seed", "laplace"] + (["particle_estimate", "particle_se", "relative_error"] if coupled else [])
    rows = []
    for r, row in enumerate(res):
        line = [r, row["seed"], row["laplace"]]
        if coupled:
            line += [row["particle"], row["particle_se"], (row["particle"] - row["laplace"]) / row["laplace"]]
        rows.append(line)
    grid = Table(["replicate", "x", "y0"], [[r, float(x), float(y)] for r, row in enumerate(res)
                                            for x, y in zip(row["x"], row["y0"])])
    vals = np.array([row["laplace"] for row in res])
    summary = {"estimates": {"laplace": _stats(vals)}, "seeds": [row["seed"] for row in res]}
    checks = []
    if coupled:
        rel = np.array([(row["particle"] - row["laplace"]) / row["laplace"] for row in res])
        summary["estimates"]["relative_error"] = {"mean_abs": float(np.mean(np.abs(rel))), "mean": float(rel.mean()),
                                                  "se": float(rel.std(ddof=1) / math.sqrt(R))}
        checks.append(_check("coupling_mean_abs_relative_error", float(np.mean(np.abs(rel))), 0.0,
                             cfg["numerics"]["tolerance"], "abs"))
    return Report({"": Table(cols, rows), "y0": grid}, summary, checks)


def _duality_samples(cfg, offset, count):
    c, mu = _model(cfg)
    _, (phi,) = _functionals(cfg)
    n = cfg["numerics"]
    x = np.linspace(n["x_min"], n["x_max"], n["points"])
    f0 = duality.pair_tensor(*([phi] * n["n0"]), x=x)
    out = np.empty(count)
    for i, r in enumerate(range(offset, offset + count)):
        st = duality.run_dual_sample(c, n["n0"], f0, n["t"], x, cfg["mc"]["seed"], r)
        out[i] = duality._pair_with_product(mu, st.f, x) * st.exp_factor
    return out


def _run_duality(cfg: dict) -> Report:
    R = cfg["mc"]["replicates"]
    vals = np.concatenate(_pmap(_duality_samples, cfg, R))
    c, mu = _model(cfg)
    _, (phi,) = _functionals(cfg)
    n = cfg["numerics"]
    st = _stats(vals)
    summary = {"estimates": {"dual": st}}
    checks = []
    exact = None
    if n["n0"] == 1:
        exact = {"first_moment": duality.exact_first_moment(c, mu, phi, n["t"])}
        target = exact["first_moment"]
    elif n["n0"] == 2:
        exact = duality.exact_second_moment(c, mu, phi, phi, n["t"])
        target = exact["mp"]
    if exact is not None:
        summary["exact"] = exact
        tol = max(3 * st["se"], 1e-9 * abs(target))
        checks.append(_check("dual_vs_exact", st["mean"], target, tol, "abs", st["se"]))
    rows = [[r, float(v)] for r, v in enumerate(vals)]
    return Report({"": Table(["replicate", "sample"], rows)}, summary, checks)


# verify-all: desk-scale versions of the cross-checks


def _verify_particles(R: int, seed: int) -> list[dict]:
    c = make_coefficients({"b": 0.0, "sigma1": 1.0, "sigma2": 1.0})
    cfg = {"model": {**_MODEL_DEFAULTS}, "numerics": {"h": 0.01, "dt": 1e-3, "times": [1.0],
                                                       "population_cap": particles.DEFAULT_CAP},
           "mc": {"seed": seed}, "functionals": []}
    runs = _pmap(_particles_block, cfg, R)
    m = np.concatenate([r.mass[:, 0] for r in runs])
    s = analysis.mc_summary(m)
    return [
        _check("criticality_mean_mass", s.mean, 1.0, 3 * math.sqrt(1.0 / R), "abs", s.se),
        _check("mass_variance_equals_t", s.variance, 1.0, 0.15, "rel", _var_se(m)),
    ]


def _verify_duality(R: int, seed: int) -> list[dict]:
    cfg = {"model": {**_MODEL_DEFAULTS}, "numerics": {"n0": 2, "t": 1.0, "x_min": -10.0, "x_max": 10.0, "points": 32},
           "mc": {"seed": seed}, "functionals": [{"kind": "one"}]}
    v = np.concatenate(_pmap(_duality_samples, cfg, R))
    s = analysis.mc_summary(v)
    return [_check("dual_second_moment_of_mass", s.mean, 2.0, 3 * s.se, "abs", s.se)]


def _verify_loglaplace(seed: int) -> list[dict]:
    c = make_coefficients({"b": 0.0, "sigma1": 0.0, "sigma2": 1.0})
    t, ht = 1.0, 1.0
    w = make_noise_path(replicate_seed(seed, 0), 1e-3, 1000, 1)
    sol = loglaplace.solve_backward(c, loglaplace.plateau(ht, 6.0, 0.5), t, w, (-10.0, 10.0, 0.02), keep="final")
    val = loglaplace.conditional_laplace(AtomicMeasure(np.zeros((1, 1)), np.ones(1)), sol)
    target = math.exp(-ht / (1 + loglaplace.MP_QUADRATIC * ht * t))
    return [_check("riccati_laplace_sigma1_0", val, target, 0.02, "rel")]


def _verify_spde(R: int, seed: int) -> list[dict]:
    cfg = {"model": {**_MODEL_DEFAULTS}, "mc": {"seed": seed}, "functionals": [],
           "numerics": {"x_min": -8.0, "x_max": 8.0, "dx": 0.02, "dt": 1e-4, "t_final": 0.5,
                        "snapshot_times": [0.5], "environment": True, "branching": True,
                        "leak_fraction": spde.LEAK_FRACTION}}
    runs = _pmap(_spde_block, cfg, R)
    m = np.concatenate([r.mass[:, 0] for r in runs])
    s = analysis.mc_summary(m)
    vs = _var_se(m)
    return [
        _check("spde_mean_mass", s.mean, 1.0, 3 * s.se, "abs", s.se),
        _check("spde_mass_variance", s.variance, 0.5, 3 * vs, "abs", vs),
    ]


def _verify_snake(R: int, seed: int) -> list[dict]:
    cfg = {"model": {**_MODEL_DEFAULTS}, "mc": {"seed": seed}, "functionals": [],
           "numerics": {"h": 0.05, "ds": 4e-6, "levels": [0.0], "horizon": None, "level_cap": None, "dl": None,
                        "corrected": True}}
    runs = _pmap(_snake_block, cfg, R)
    m = np.concatenate([r.mass[:, 0] for r in runs])
    s = analysis.mc_summary(m)
    return [_check("snake_local_time_level_0", s.mean, 1.0, 3 * s.se, "abs", s.se)]


def _verify_holder(seed: int) -> list[dict]:
    out = []
    for H in (0.3, 0.5, 0.7):
        rows = analysis.fbm_paths(H, 1025, 1.0 / 1024, 200, seed + int(100 * H))
        fields = [DensityField(0.0, 1.0, 1.0 / 1024, r) for r in rows]
        out.append(_check(f"holder_calibration_H={H}", analysis.estimate_holder(fields).exponent, H, 0.07, "abs"))
    return out


def _verify_noise(seed: int) -> list[dict]:
    a = make_noise_path(seed, 0.01, 10_000, 1).increments
    b = make_noise_path(seed, 0.01, 10_000, 1).increments
    v = float(a.var(ddof=1))
    return [
        _check("noise_increment_variance", v, 0.01, 0.0003, "abs"),
        _check("noise_rebuild_identical", float(np.array_equal(a, b)), 1.0, 0.0, "abs"),
    ]


def _run_verify(cfg: dict) -> Report:
    seed = cfg["mc"]["seed"]
    R = cfg["mc"]["replicates"]
    timings = {}
    checks: list[dict] = []

    def timed(name, fn, *args):
        t0 = time.perf_counter()
        checks.extend(fn(*args))
        timings[name] = time.perf_counter() - t0

    timed("noise", _verify_noise, seed)
    timed("holder", _verify_holder, seed)
    timed("loglaplace", _verify_loglaplace, seed)
    timed("duality", _verify_duality, R or 10_000, seed)
    timed("particles", _verify_particles, R or 2000, seed)
    timed("spde", _verify_spde, R or 400, seed)
    timed("snake", _verify_snake, R or 2000, seed)
    cols = ["check", "estimate", "target", "se", "tolerance", "tolerance_kind", "passed"]
    rows = [[c["name"], c["estimate"], c["target"], "" if c["se"] is None else c["se"], c["tolerance"],
             c["tolerance_kind"], c["passed"]] for c in checks]
    return Report({"": Table(cols, rows)}, {"stage_seconds": timings}, checks)


_PIPELINES = {
    "particles": _run_particles,
    "snake": _run_snake,
    "spde": _run_spde,
    "loglaplace": _run_loglaplace,
    "duality": _run_duality,
    "verify-all": _run_verify,
}


def run_experiment(cfg: dict) -> tuple[Report, list[str]]:
    """Run a resolved config and write its reports. Raises :class:`CheckFailure` after writing
    when a built-in check fails."""
    _workers()
    t0 = time.perf_counter()
    report = _PIPELINES[cfg["command"]](cfg)
    report.summary = {"command": cfg["command"], "config": cfg, **report.summary,
                      "wall_time_seconds": time.perf_counter() - t0}
    paths = write_report(report, cfg["output"])
    if not report.passed:
        failed = [c["name"] for c in report.checks if not c["passed"]]
        raise CheckFailure(f"checks failed: {', '.join(failed)}")
    return report, paths


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowproc", description=__doc__.splitlines()[0])
    p.add_argument("command", help=f"one of: {', '.join(COMMANDS)}")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        try:
            with open(args.config, encoding="utf-8") as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config: {e}") from e
        cfg = resolve_config(raw, args.command, args.seed, args.replicates, args.out)
        _, paths = run_experiment(cfg)
    except CheckFailure as e:
        print(f"flowproc: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"flowproc: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # any other failure is an error exit
        print(f"flowproc: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    for p in paths:
        print(p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
