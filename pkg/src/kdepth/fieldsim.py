"""Seeded samplers for Matérn Gaussian processes and t-processes on a Grid."""
from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.linalg import lapack
from scipy.spatial.distance import cdist
from scipy.special import gamma, kv

from .core import Ensemble, Grid

MAX_POINTS = 20000
FAMILIES = ("gaussian", "student_t")


@dataclass(frozen=True)
class MaternParams:
    sigma: float = 1.0
    range_r: float = 0.4
    smoothness_nu: float = 1.0

    def __post_init__(self):
        for name in ("sigma", "range_r", "smoothness_nu"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be positive, got {v}")


def matern_correlation(d, r: float, nu: float):
    """Unit-variance Matérn correlation ``2^(1-nu)/Gamma(nu) (d/r)^nu K_nu(d/r)``."""
    if not r > 0:
        raise ValueError(f"range must be positive, got {r}")
    if not nu > 0:
        raise ValueError(f"smoothness must be positive, got {nu}")
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise ValueError("distances must be nonnegative")
    x = d_arr / r
    with np.errstate(invalid="ignore", over="ignore"):
        c = (2.0 ** (1.0 - nu) / gamma(nu)) * x**nu * kv(nu, x)
    # K_nu underflows to 0 at large lags (fine) and is inf at 0 (replace)
    c = np.where(x == 0, 1.0, c)
    c = np.where(np.isnan(c), 0.0, c)
    return float(c) if np.ndim(d) == 0 else c


class CholeskyError(np.linalg.LinAlgError):
    pass


_FACTOR_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 8


def _cache_key(grid: Grid, params: MaternParams) -> str:
    h = hashlib.sha256()
    h.update(repr(grid.dims).encode())
    for c in grid.coords:
        h.update(np.ascontiguousarray(c).tobytes())
    h.update(repr((params.sigma, params.range_r, params.smoothness_nu)).encode())
    return h.hexdigest()


def _cholesky(cov: np.ndarray) -> np.ndarray:
    factor, info = lapack.dpotrf(cov, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        raise CholeskyError(f"leading minor of order {info} is not positive definite")
    if info < 0:
        raise ValueError(f"invalid argument {-info} to dpotrf")
    return factor


def build_covariance(grid: Grid, params: MaternParams) -> np.ndarray:
    """Lower Cholesky factor of the Matérn covariance over the grid points.

    Factors are cached by (coordinates, parameters) and returned read-only.
    """
    if grid.size > MAX_POINTS:
        raise ValueError(f"grid has {grid.size} points; dense factorisation capped at {MAX_POINTS}")
    key = _cache_key(grid, params)
    if key in _FACTOR_CACHE:
        _FACTOR_CACHE.move_to_end(key)
        return _FACTOR_CACHE[key]
    pts = grid.points()
    cov = params.sigma**2 * matern_correlation(
        cdist(pts, pts), params.range_r, params.smoothness_nu
    )
    try:
        factor = _cholesky(cov)
    except CholeskyError:
        cov[np.diag_indices_from(cov)] += 1e-10 * params.sigma**2
        try:
            factor = _cholesky(cov)
        except CholeskyError as exc:
            raise CholeskyError(f"Matérn covariance {params}: {exc} (after jitter)") from None
    factor.setflags(write=False)
    _FACTOR_CACHE[key] = factor
    if len(_FACTOR_CACHE) > _CACHE_SIZE:
        _FACTOR_CACHE.popitem(last=False)
    return factor


@dataclass(frozen=True, eq=False)
class FieldSpec:
    """Generating process for an ensemble of fields.

    ``mean_field`` and ``sd_field`` may be scalars (broadcast over the grid).
    The Matérn factor carries ``matern.sigma``, so with a non-constant
    ``sd_field`` that sigma must be 1.
    """

    grid: Grid
    matern: MaternParams
    mean_field: np.ndarray = 0.0
    sd_field: np.ndarray = 1.0
    family: str = "gaussian"
    df: float | None = None
    seed: int = 0

    def __post_init__(self):
        mean = np.broadcast_to(np.asarray(self.mean_field, dtype=np.float64), (self.grid.size,))
        sd = np.broadcast_to(np.asarray(self.sd_field, dtype=np.float64), (self.grid.size,))
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean_field must be finite")
        if not np.all(sd > 0) or not np.all(np.isfinite(sd)):
            raise ValueError("sd_field must be strictly positive")
        if np.ptp(sd) > 0 and self.matern.sigma != 1.0:
            raise ValueError("matern.sigma must be 1 when sd_field varies over the grid")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if self.family == "student_t":
            if self.df is None or not self.df > 2:
                raise ValueError(f"student_t family needs df > 2, got {self.df}")
        object.__setattr__(self, "mean_field", np.array(mean))
        object.__setattr__(self, "sd_field", np.array(sd))


def matern_spec(
    grid: Grid,
    range_r: float,
    smoothness_nu: float,
    mean: float = 0.0,
    sigma: float = 1.0,
    family: str = "gaussian",
    df: float | None = None,
    seed: int = 0,
) -> FieldSpec:
    """Stationary spec with constant mean and marginal standard deviation."""
    return FieldSpec(
        grid,
        MaternParams(1.0, range_r, smoothness_nu),
        mean_field=mean,
        sd_field=sigma,
        family=family,
        df=df,
        seed=seed,
    )


def sample_fields(
    spec: FieldSpec, count: int, rng: np.random.Generator | None = None, label: str = ""
) -> Ensemble:
    """Draw ``count`` i.i.d. fields from ``spec``.

    Draws come from ``np.random.default_rng(spec.seed)`` unless a generator is
    passed explicitly.  Standard normals are drawn first (``count`` rows of
    grid length), then, for t-processes, one chi-square mixing variable per
    member.
    """
    if count < 2:
        raise ValueError(f"count must be >= 2, got {count}")
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    L = build_covariance(spec.grid, spec.matern)
    z = rng.standard_normal((count, spec.grid.size))
    fields = z @ L.T
    if spec.family == "student_t":
        w = rng.chisquare(spec.df, size=count)
        fields /= np.sqrt(w / spec.df)[:, None]
    return Ensemble(spec.grid, spec.mean_field + spec.sd_field * fields, label)


def _sine_factor(u, kappa: float):
    return 0.5 * kappa * np.sin(4.0 * np.pi * u - np.pi / 2.0) + 1.0


def _sine_product(grid: Grid, kappa: float) -> np.ndarray:
    if grid.ndim != 2:
        raise ValueError(f"sine fields need a 2-D grid, got {grid.ndim}-D")
    if not 0.0 <= kappa <= 1.0:
        raise ValueError(f"kappa must lie in [0, 1], got {kappa}")
    f1 = _sine_factor(grid.coords[0], kappa)
    f2 = _sine_factor(grid.coords[1], kappa)
    return np.outer(f1, f2).ravel()


def sine_mean_field(grid: Grid, kappa: float) -> np.ndarray:
    """Product of one sine wave per axis, centred at 0."""
    return _sine_product(grid, kappa) - 1.0


def sine_sd_field(grid: Grid, kappa: float) -> np.ndarray:
    """Product of one sine wave per axis, centred at 1."""
    return _sine_product(grid, kappa)
