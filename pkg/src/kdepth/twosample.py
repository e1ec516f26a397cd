"""Depth-based Kolmogorov (KD) two-sample test, the QI baseline and BY-FDR."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .core import Ensemble, validate_pair
from .depth import PooledRanks, SortedReference, depth_profile
from .rng import substream

METHODS = ("kd_asymptotic", "kd_permutation", "qi_normal")
MIN_PERMUTATIONS = 99
P_FLOOR = 1e-300


@dataclass(frozen=True)
class NullDistribution:
    values: np.ndarray
    permutations: int
    seed: int

    def __post_init__(self):
        v = np.sort(np.asarray(self.values, dtype=np.float64))
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if v.size != self.permutations:
            raise ValueError("null distribution length must equal the permutation count")


@dataclass(frozen=True)
class TestResult:
    """Outcome of one two-sample test.

    For KD methods ``scaled`` is ``sqrt(nm/(n+m)) * statistic``; for QI it is
    the standardised z-score.
    """

    statistic: float
    scaled: float
    p_value: float
    method: str
    n: int
    m: int
    permutations: int | None = None
    k_pn: float | None = None
    k_qm: float | None = None
    null: NullDistribution | None = None

    __test__ = False  # not a pytest class

    def as_dict(self) -> dict:
        out = {
            "statistic": self.statistic,
            "scaled": self.scaled,
            "p_value": self.p_value,
            "method": self.method,
            "n": self.n,
            "m": self.m,
            "permutations": self.permutations,
        }
        if self.k_pn is not None:
            out["k_pn"] = self.k_pn
            out["k_qm"] = self.k_qm
        return out


def scale_factor(n: int, m: int) -> float:
    return float(np.sqrt(n * m / (n + m)))


def _one_sided_distance(d_ref: np.ndarray, d_other: np.ndarray) -> float:
    """Kolmogorov distance over the reference sample's own depth values.

    ``max_k |#{d_ref <= d_ref[k]}/n - #{d_other <= d_ref[k]}/m|``
    """
    ref_sorted = np.sort(d_ref)
    f = np.searchsorted(ref_sorted, d_ref, side="right") / d_ref.size
    g = np.searchsorted(np.sort(d_other), d_ref, side="right") / d_other.size
    return float(np.max(np.abs(f - g)))


def kd_from_depths(dx_p, dy_p, dx_q, dy_q) -> tuple[float, float, float]:
    """KD and its two one-sided parts from the four depth vectors.

    ``dx_p``/``dy_p`` are depths of X and Y members relative to X; ``dx_q``
    and ``dy_q`` are relative to Y.
    """
    k_pn = _one_sided_distance(dx_p, dy_p)
    k_qm = _one_sided_distance(dy_q, dx_q)
    return max(k_pn, k_qm), k_pn, k_qm


def k_pn_distance(X: Ensemble, Y: Ensemble) -> float:
    """Outlyingness of Y from the empirical law of X, measured over X."""
    validate_pair(X, Y)
    ref = SortedReference(X)
    dx = depth_profile(X, ref).values
    dy = depth_profile(Y, ref).values
    return _one_sided_distance(dx, dy)


def _pooled(X: Ensemble, Y: Ensemble) -> tuple[PooledRanks, np.ndarray]:
    validate_pair(X, Y)
    pooled = PooledRanks(np.vstack([X.members, Y.members]), X.grid.weights)
    labels = np.zeros(X.size + Y.size, dtype=bool)
    labels[: X.size] = True
    return pooled, labels


def _kd_labelled(pooled: PooledRanks, in_x: np.ndarray) -> tuple[float, float, float]:
    d_p, d_q = pooled.depths(in_x)
    return kd_from_depths(d_p[in_x], d_p[~in_x], d_q[in_x], d_q[~in_x])


def kd_statistic(X: Ensemble, Y: Ensemble) -> float:
    pooled, labels = _pooled(X, Y)
    return _kd_labelled(pooled, labels)[0]


# --- Kolmogorov distribution -------------------------------------------------

_J = np.arange(1, 201, dtype=np.float64)
_SMALL_T = 0.5


def _series_sf(t: np.ndarray, truncate: bool) -> np.ndarray:
    # 2 * sum_{j>=1} (-1)^(j-1) exp(-2 j^2 t^2); the CDF drops terms below
    # 1e-12, the upper tail keeps every representable term
    terms = np.exp(-2.0 * np.outer(t * t, _J * _J))
    if truncate:
        terms[terms < 1e-12] = 0.0
    signs = np.where(_J % 2 == 1, 1.0, -1.0)
    return 2.0 * terms @ signs


def _theta_cdf(t: np.ndarray) -> np.ndarray:
    # Jacobi-theta form of the same law, accurate where the series above
    # needs more than 200 terms
    k = 2.0 * _J[:8] - 1.0
    terms = np.exp(-np.outer(1.0 / (t * t), k * k) * np.pi**2 / 8.0)
    return np.sqrt(2.0 * np.pi) / t * terms.sum(axis=1)


def _kolmogorov(t, upper: bool):
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if np.any(t_arr < 0) or np.any(np.isnan(t_arr)):
        raise ValueError("kolmogorov distribution is defined for t >= 0")
    cdf = np.zeros_like(t_arr)
    sf = np.ones_like(t_arr)
    small = (t_arr >= 1e-8) & (t_arr < _SMALL_T)
    large = t_arr >= _SMALL_T
    if small.any():
        cdf[small] = _theta_cdf(t_arr[small])
        sf[small] = 1.0 - cdf[small]
    if large.any():
        sf[large] = _series_sf(t_arr[large], truncate=False)
        cdf[large] = 1.0 - _series_sf(t_arr[large], truncate=True)
    out = np.clip(sf if upper else cdf, 0.0, 1.0)
    return float(out[0]) if np.ndim(t) == 0 else out


def kolmogorov_cdf(t):
    """CDF of the Kolmogorov distribution, ``1 - 2 sum (-1)^(j-1) exp(-2 j^2 t^2)``.

    Accepts scalars or arrays; returns 0 for ``t < 1e-8``.
    """
    return _kolmogorov(t, upper=False)


def kolmogorov_sf(t):
    """Upper tail ``1 - kolmogorov_cdf(t)`` without cancellation for large ``t``."""
    return _kolmogorov(t, upper=True)


def kolmogorov_quantile(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    return float(optimize.brentq(lambda t: kolmogorov_cdf(t) - level, 1e-3, 10.0, xtol=1e-12))


# --- tests ---------------------------------------------------------------------


def _normalize_method(method: str) -> str:
    aliases = {"asymptotic": "kd_asymptotic", "permutation": "kd_permutation", "qi": "qi_normal"}
    method = aliases.get(method, method)
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return method


def permutation_null(
    pooled: PooledRanks, n: int, permutations: int, seed: int
) -> np.ndarray:
    """Unscaled KD over random relabellings of the pooled members.

    Replicate ``b`` draws its split from the substream ``(seed, b)``.
    """
    size = pooled.size
    out = np.empty(permutations)
    labels = np.zeros(size, dtype=bool)
    for b in range(permutations):
        perm = substream(seed, b).permutation(size)
        labels[:] = False
        labels[perm[:n]] = True
        out[b] = _kd_labelled(pooled, labels)[0]
    return out


def kd_test(
    X: Ensemble,
    Y: Ensemble,
    method: str = "kd_asymptotic",
    permutations: int = 500,
    seed: int = 0,
) -> TestResult:
    """KD test of equal distributions.

    ``method`` is ``"kd_asymptotic"`` (Kolmogorov limit law) or
    ``"kd_permutation"``; the short forms ``"asymptotic"`` and
    ``"permutation"`` are accepted.
    """
    method = _normalize_method(method)
    if method == "qi_normal":
        raise ValueError("use qi_test for the QI method")
    if method == "kd_permutation" and permutations < MIN_PERMUTATIONS:
        raise ValueError(f"permutations >= {MIN_PERMUTATIONS} required, got {permutations}")
    pooled, labels = _pooled(X, Y)
    kd, k_pn, k_qm = _kd_labelled(pooled, labels)
    n, m = X.size, Y.size
    c = scale_factor(n, m)
    if method == "kd_asymptotic":
        p = max(kolmogorov_sf(c * kd), P_FLOOR)
        return TestResult(kd, c * kd, p, method, n, m, None, k_pn, k_qm)
    null = permutation_null(pooled, n, permutations, seed)
    p = (1.0 + np.count_nonzero(null >= kd)) / (permutations + 1.0)
    dist = NullDistribution(c * null, permutations, seed)
    return TestResult(kd, c * kd, float(p), method, n, m, permutations, k_pn, k_qm, dist)


def quality_index(dx_p: np.ndarray, dy_p: np.ndarray) -> float:
    """Mean relative rank of Y's depths among X's depths (both relative to X)."""
    ranks = np.searchsorted(np.sort(dx_p), dy_p, side="right") / dx_p.size
    return float(ranks.mean())


def qi_p_value(qi: float, n: int, m: int, sided: str = "lower") -> tuple[float, float]:
    """z-score and normal-approximation p-value of a QI value."""
    z = (qi - 0.5) / np.sqrt((1.0 / n + 1.0 / m) / 12.0)
    if sided == "lower":
        p = stats.norm.cdf(z)
    elif sided == "two":
        p = min(1.0, 2.0 * min(stats.norm.cdf(z), stats.norm.sf(z)))
    else:
        raise ValueError(f"sided must be 'lower' or 'two', got {sided!r}")
    return float(z), max(float(p), P_FLOOR)


def qi_test(X: Ensemble, Y: Ensemble, sided: str = "lower") -> TestResult:
    """QI test with X as the reference sample.

    Small QI means Y sits in the outskirts of X; the default lower-tail test
    rejects for those values only.
    """
    validate_pair(X, Y)
    ref = SortedReference(X)
    qi = quality_index(depth_profile(X, ref).values, depth_profile(Y, ref).values)
    z, p = qi_p_value(qi, X.size, Y.size, sided)
    return TestResult(qi, z, p, "qi_normal", X.size, Y.size)


def by_fdr_adjust(p_values) -> np.ndarray:
    """Benjamini-Yekutieli adjusted p-values, in input order."""
    p = np.asarray(p_values, dtype=np.float64).ravel()
    if p.size == 0:
        return p.copy()
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("p-values must lie in [0, 1]")
    M = p.size
    c = np.sum(1.0 / np.arange(1, M + 1))
    order = np.argsort(p, kind="stable")
    ranked = p[order] * M * c / np.arange(1, M + 1)
    ranked = np.minimum.accumulate(ranked[::-1])[::-1]
    out = np.empty(M)
    out[order] = np.minimum(ranked, 1.0)
    return out
