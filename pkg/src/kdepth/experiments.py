"""Monte-Carlo harnesses for the size, power and convergence studies.

A study is described by a :class:`StudyConfig` (usually loaded from a JSON
file).  Every cell of the parameter lattice is simulated independently;
replicate ``s`` of cell ``c`` draws from the substream ``(seed, c, s)``, so
results do not depend on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import trapezoid

from .core import unit_grid
from .depth import PooledRanks
from .fieldsim import FieldSpec, MaternParams, sample_fields, sine_mean_field, sine_sd_field
from .rng import derive_seed, substream
from .twosample import (
    _kd_labelled,
    kolmogorov_cdf,
    kolmogorov_quantile,
    kolmogorov_sf,
    permutation_null,
    qi_p_value,
    quality_index,
    scale_factor,
)

STUDIES = ("convergence", "size", "power_homogeneous", "power_heterogeneous")
POWER_PARAMETERS = ("mean", "sigma", "range", "smoothness")
CRITICAL_LEVELS = (0.90, 0.95, 0.99)
# [0, 3] holds all but ~3e-8 of the Kolmogorov law's mass
L2_UPPER = 3.0
L2_POINTS = 600
DEFAULT_BASELINE = {"mean": 0.0, "sigma": 1.0, "range": 0.4, "smoothness": 1.0, "n": 100, "m": 50}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _positive_list(d: dict, key: str, kind=float, required: bool = True):
    if d.get(key) is None:
        if required:
            raise ConfigError(key, "missing required key")
        return None
    v = d[key]
    if not isinstance(v, list):
        v = [v]
    if not v:
        raise ConfigError(key, "lattice must be nonempty")
    try:
        out = [kind(x) for x in v]
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a list of {kind.__name__}") from None
    if kind is int and any(float(x) != int(x) for x in v):
        raise ConfigError(key, "expected integers")
    return out


@dataclass
class StudyConfig:
    """Study description.

    Lattice keys by study:

    * ``size`` / ``convergence``: ``range``, ``smoothness``, ``n`` and
      optionally ``m`` (balanced ``m = n`` when absent).
    * ``power_homogeneous``: ``vary`` maps any of ``mean``, ``sigma``
      (multiplier), ``range``, ``smoothness`` to the list of values taken by
      Y; every other parameter stays at ``baseline``.
    * ``power_heterogeneous``: ``kappa`` amplitudes and ``component``
      (``"mean"``, ``"sd"`` or both).
    """

    study: str
    seed: int
    grid: tuple = (32, 32)
    family: str = "gaussian"
    df: float | None = None
    range: list = field(default_factory=list)
    smoothness: list = field(default_factory=list)
    n: list = field(default_factory=list)
    m: list | None = None
    vary: dict = field(default_factory=dict)
    kappa: list = field(default_factory=list)
    component: list = field(default_factory=lambda: ["sd"])
    baseline: dict = field(default_factory=lambda: dict(DEFAULT_BASELINE))
    sims_per_cell: int = 2000
    replicates: int = 100
    permutations: int = 500
    alpha: float = 0.05
    methods: list = field(default_factory=lambda: ["kd", "qi"])
    qi_sided: str = "lower"

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        for key in d:
            if key not in known:
                raise ConfigError(key, "unknown key")
        for key in ("study", "seed"):
            if key not in d:
                raise ConfigError(key, "missing required key")
        study = d["study"]
        if study not in STUDIES:
            raise ConfigError("study", f"must be one of {STUDIES}, got {study!r}")
        try:
            seed = int(d["seed"])
        except (TypeError, ValueError):
            raise ConfigError("seed", "must be an integer") from None
        if seed < 0:
            raise ConfigError("seed", "must be nonnegative")
        kw = {"study": study, "seed": seed}
        if "grid" in d:
            grid = _positive_list(d, "grid", int)
            if any(g < 1 for g in grid):
                raise ConfigError("grid", "dimensions must be positive")
            kw["grid"] = tuple(grid)
        family = d.get("family", "gaussian")
        if family not in ("gaussian", "student_t"):
            raise ConfigError("family", f"unknown family {family!r}")
        kw["family"] = family
        if family == "student_t":
            df = d.get("df")
            if df is None or not float(df) > 2:
                raise ConfigError("df", "student_t family needs df > 2")
            kw["df"] = float(df)
        if study in ("size", "convergence"):
            kw["range"] = _positive_list(d, "range")
            kw["smoothness"] = _positive_list(d, "smoothness")
            kw["n"] = _positive_list(d, "n", int)
            kw["m"] = _positive_list(d, "m", int, required=False)
            for key in ("range", "smoothness", "n", "m"):
                if kw[key] is not None and any(v <= 0 for v in kw[key]):
                    raise ConfigError(key, "values must be positive")
            if any(v < 2 for v in kw["n"] + (kw["m"] or [])):
                raise ConfigError("n", "sample sizes must be >= 2")
        base = dict(DEFAULT_BASELINE)
        if "baseline" in d:
            if not isinstance(d["baseline"], dict):
                raise ConfigError("baseline", "must be a mapping")
            for key, v in d["baseline"].items():
                if key not in DEFAULT_BASELINE:
                    raise ConfigError(f"baseline.{key}", "unknown key")
                base[key] = int(v) if key in ("n", "m") else float(v)
        kw["baseline"] = base
        if study == "power_homogeneous":
            vary = d.get("vary")
            if not isinstance(vary, dict) or not vary:
                raise ConfigError("vary", "must map at least one parameter to a list of values")
            clean = {}
            for key in vary:
                if key not in POWER_PARAMETERS:
                    raise ConfigError(f"vary.{key}", f"must be one of {POWER_PARAMETERS}")
                clean[key] = _positive_list(vary, key)
                if key != "mean" and any(v <= 0 for v in clean[key]):
                    raise ConfigError(f"vary.{key}", "values must be positive")
            kw["vary"] = clean
        if study == "power_heterogeneous":
            kw["kappa"] = _positive_list(d, "kappa")
            if any(not 0 <= k <= 1 for k in kw["kappa"]):
                raise ConfigError("kappa", "values must lie in [0, 1]")
            comp = d.get("component", ["sd"])
            comp = [comp] if isinstance(comp, str) else list(comp)
            if not comp or any(c not in ("mean", "sd") for c in comp):
                raise ConfigError("component", "must be 'mean', 'sd' or both")
            kw["component"] = comp
        for key, kind in (("sims_per_cell", int), ("replicates", int), ("permutations", int)):
            if key in d:
                try:
                    kw[key] = kind(d[key])
                except (TypeError, ValueError):
                    raise ConfigError(key, "must be an integer") from None
        sims = kw.get("sims_per_cell", cls.sims_per_cell)
        if study != "convergence" and sims < 100:
            raise ConfigError("sims_per_cell", "must be >= 100")
        if study == "convergence":
            if kw.get("permutations", cls.permutations) < 500:
                raise ConfigError("permutations", "must be >= 500")
            if kw.get("replicates", cls.replicates) < 1:
                raise ConfigError("replicates", "must be >= 1")
        if "alpha" in d:
            alpha = float(d["alpha"])
            if not 0 < alpha < 1:
                raise ConfigError("alpha", "must lie in (0, 1)")
            kw["alpha"] = alpha
        if "methods" in d:
            methods = d["methods"]
            methods = [methods] if isinstance(methods, str) else list(methods)
            if not methods or any(x not in ("kd", "qi") for x in methods):
                raise ConfigError("methods", "must be a nonempty subset of ['kd', 'qi']")
            kw["methods"] = [x for x in ("kd", "qi") if x in methods]
        if "qi_sided" in d:
            if d["qi_sided"] not in ("lower", "two"):
                raise ConfigError("qi_sided", "must be 'lower' or 'two'")
            kw["qi_sided"] = d["qi_sided"]
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "StudyConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError("<file>", f"invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError("<file>", "top level must be a mapping")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d


@dataclass
class StudyResult:
    study: str
    rows: list
    columns: list
    config: dict
    runtime: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.columns, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: _fmt(row.get(k)) for k in self.columns})
        return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def mc_standard_error(p: float, sims: int) -> float:
    return float(np.sqrt(p * (1.0 - p) / sims))


# --- cell construction ------------------------------------------------------


@dataclass(frozen=True)
class Cell:
    """One lattice point: the generating processes of X and Y plus labels."""

    x: FieldSpec
    y: FieldSpec
    n: int
    m: int
    labels: tuple


def _spec(grid, family, df, r, nu, mean=0.0, sd=1.0) -> FieldSpec:
    return FieldSpec(grid, MaternParams(1.0, r, nu), mean, sd, family, df)


def build_cells(cfg: StudyConfig) -> list[Cell]:
    grid = unit_grid(*cfg.grid)
    fam, df = cfg.family, cfg.df
    cells = []
    if cfg.study in ("size", "convergence"):
        ms = cfg.m if cfg.m is not None else [None]
        for n, m, nu, r in itertools.product(cfg.n, ms, cfg.smoothness, cfg.range):
            m = n if m is None else m
            spec = _spec(grid, fam, df, r, nu)
            labels = (("n", n), ("m", m), ("range", r), ("smoothness", nu))
            cells.append(Cell(spec, spec, n, m, labels))
        return cells
    b = cfg.baseline
    x = _spec(grid, fam, df, b["range"], b["smoothness"], b["mean"], b["sigma"])
    n, m = b["n"], b["m"]
    if cfg.study == "power_homogeneous":
        for param in POWER_PARAMETERS:
            for v in cfg.vary.get(param, []):
                p = {"mean": b["mean"], "sigma": b["sigma"], "range": b["range"],
                     "smoothness": b["smoothness"]}
                if param == "sigma":
                    p["sigma"] = b["sigma"] * v
                else:
                    p[param] = v
                y = _spec(grid, fam, df, p["range"], p["smoothness"], p["mean"], p["sigma"])
                shift = v if param == "sigma" else v - b[param]
                labels = (("n", n), ("m", m), ("parameter", param), ("value", v), ("shift", shift))
                cells.append(Cell(x, y, n, m, labels))
        return cells
    for comp, kappa in itertools.product(cfg.component, cfg.kappa):
        mean = sine_mean_field(grid, kappa) if comp == "mean" else b["mean"]
        sd = sine_sd_field(grid, kappa) if comp == "sd" else b["sigma"]
        y = _spec(grid, fam, df, b["range"], b["smoothness"], mean, sd)
        labels = (("n", n), ("m", m), ("parameter", comp), ("kappa", kappa))
        cells.append(Cell(x, y, n, m, labels))
    return cells


def draw_pair(cell: Cell, rng: np.random.Generator) -> np.ndarray:
    """Stacked members of X (first ``n`` rows) then Y."""
    X = sample_fields(cell.x, cell.n, rng)
    Y = sample_fields(cell.y, cell.m, rng)
    return np.vstack([X.members, Y.members])


# --- replicate workers ------------------------------------------------------


def _rejections(task) -> np.ndarray:
    """Per-replicate rejection flags ``(count, 2)`` for KD and QI."""
    cell, seed, cell_index, start, stop, alpha, qi_sided = task
    weights = cell.x.grid.weights
    labels = np.zeros(cell.n + cell.m, dtype=bool)
    labels[: cell.n] = True
    c = scale_factor(cell.n, cell.m)
    out = np.zeros((stop - start, 2), dtype=bool)
    for i, s in enumerate(range(start, stop)):
        pooled = PooledRanks(draw_pair(cell, substream(seed, cell_index, s)), weights)
        kd = _kd_labelled(pooled, labels)[0]
        out[i, 0] = kolmogorov_sf(c * kd) < alpha
        d_p, _ = pooled.depths(labels)
        qi = quality_index(d_p[labels], d_p[~labels])
        out[i, 1] = qi_p_value(qi, cell.n, cell.m, qi_sided)[1] < alpha
    return out


def _convergence_replicate(task) -> tuple[float, list]:
    cell, seed, cell_index, rep, permutations = task
    pooled = PooledRanks(draw_pair(cell, substream(seed, cell_index, rep, 0)), cell.x.grid.weights)
    null = permutation_null(pooled, cell.n, permutations, derive_seed(seed, cell_index, rep, 1))
    scaled = np.sort(scale_factor(cell.n, cell.m) * null)
    gaps = [
        kolmogorov_quantile(level) - float(np.quantile(scaled, level, method="inverted_cdf"))
        for level in CRITICAL_LEVELS
    ]
    return l2_distance(scaled), gaps


def l2_distance(sample) -> float:
    """Integrated squared gap between a sample's ECDF and the Kolmogorov CDF on [0, 3]."""
    t = np.linspace(0.0, L2_UPPER, L2_POINTS)
    ecdf = empirical_cdf(sample, t)
    return float(trapezoid((ecdf - kolmogorov_cdf(t)) ** 2, t))


def empirical_cdf(sample, t) -> np.ndarray:
    s = np.sort(np.asarray(sample, dtype=np.float64))
    return np.searchsorted(s, t, side="right") / s.size


def l2_between(sample_a, sample_b) -> float:
    """Integrated squared gap between two ECDFs on [0, 3]."""
    t = np.linspace(0.0, L2_UPPER, L2_POINTS)
    return float(trapezoid((empirical_cdf(sample_a, t) - empirical_cdf(sample_b, t)) ** 2, t))


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tasks))


def default_threads() -> int:
    env = os.environ.get("KDEPTH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _chunks(total: int, size: int):
    return [(a, min(a + size, total)) for a in range(0, total, size)]


# --- studies ----------------------------------------------------------------


def _finish(cfg, rows, columns, started) -> StudyResult:
    runtime = {"wall_seconds": time.perf_counter() - started, "cells": len({r["cell"] for r in rows})}
    return StudyResult(cfg.study, rows, columns, cfg.to_dict(), runtime)


def _rate_rows(cfg: StudyConfig, cells, threads: int, chunk: int = 100):
    tasks, owners = [], []
    for ci, cell in enumerate(cells):
        for a, b in _chunks(cfg.sims_per_cell, chunk):
            tasks.append((cell, cfg.seed, ci, a, b, cfg.alpha, cfg.qi_sided))
            owners.append(ci)
    results = _map(_rejections, tasks, threads)
    per_cell = [[] for _ in cells]
    for ci, res in zip(owners, results):
        per_cell[ci].append(res)
    rows = []
    for ci, cell in enumerate(cells):
        flags = np.vstack(per_cell[ci])
        for method, col in (("kd", 0), ("qi", 1)):
            if method not in cfg.methods:
                continue
            p = float(flags[:, col].mean())
            row = {"study": cfg.study, "cell": ci, "family": cfg.family}
            row.update(dict(cell.labels))
            row.update(method=method, estimate=p, se=mc_standard_error(p, flags.shape[0]),
                       sims=flags.shape[0], alpha=cfg.alpha)
            rows.append(row)
    return rows


def run_size_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Rejection frequency under the null for every (n, m, smoothness, range) cell."""
    if cfg.study != "size":
        raise ConfigError("study", f"expected 'size', got {cfg.study!r}")
    started = time.perf_counter()
    rows = _rate_rows(cfg, build_cells(cfg), threads)
    columns = ["study", "cell", "family", "n", "m", "range", "smoothness",
               "method", "estimate", "se", "sims", "alpha"]
    return _finish(cfg, rows, columns, started)


def run_power_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Rejection frequency as one parameter of Y moves away from the baseline."""
    if cfg.study not in ("power_homogeneous", "power_heterogeneous"):
        raise ConfigError("study", f"expected a power study, got {cfg.study!r}")
    started = time.perf_counter()
    rows = _rate_rows(cfg, build_cells(cfg), threads)
    if cfg.study == "power_homogeneous":
        labels = ["parameter", "value", "shift"]
    else:
        labels = ["parameter", "kappa"]
    columns = ["study", "cell", "family", "n", "m", *labels,
               "method", "estimate", "se", "sims", "alpha"]
    return _finish(cfg, rows, columns, started)


def run_convergence_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    """Distance between the permutation law of scaled KD and the Kolmogorov law.

    Each replicate reports the L2 distance and the Kolmogorov-minus-permutation
    critical value gaps; rows summarise their distribution per cell.
    """
    if cfg.study != "convergence":
        raise ConfigError("study", f"expected 'convergence', got {cfg.study!r}")
    started = time.perf_counter()
    cells = build_cells(cfg)
    tasks = [(cell, cfg.seed, ci, rep, cfg.permutations)
             for ci, cell in enumerate(cells) for rep in range(cfg.replicates)]
    results = _map(_convergence_replicate, tasks, threads)
    rows = []
    stats = ["l2"] + [f"gap_{int(round(100 * lv))}" for lv in CRITICAL_LEVELS]
    for ci, cell in enumerate(cells):
        res = results[ci * cfg.replicates:(ci + 1) * cfg.replicates]
        values = {"l2": np.array([r[0] for r in res])}
        for k, lv in enumerate(CRITICAL_LEVELS):
            values[stats[k + 1]] = np.array([r[1][k] for r in res])
        for name in stats:
            v = values[name]
            row = {"study": cfg.study, "cell": ci, "family": cfg.family}
            row.update(dict(cell.labels))
            row.update(
                statistic=name, median=float(np.median(v)), mean=float(v.mean()),
                q25=float(np.quantile(v, 0.25)), q75=float(np.quantile(v, 0.75)),
                min=float(v.min()), max=float(v.max()),
                replicates=cfg.replicates, permutations=cfg.permutations,
            )
            rows.append(row)
    columns = ["study", "cell", "family", "n", "m", "range", "smoothness", "statistic",
               "median", "mean", "q25", "q75", "min", "max", "replicates", "permutations"]
    return _finish(cfg, rows, columns, started)


def run_study(cfg: StudyConfig, threads: int = 1) -> StudyResult:
    if cfg.study == "size":
        return run_size_study(cfg, threads)
    if cfg.study == "convergence":
        return run_convergence_study(cfg, threads)
    return run_power_study(cfg, threads)


def write_result(result: StudyResult, path) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(result.to_csv())
    os.replace(tmp, path)
    return path
