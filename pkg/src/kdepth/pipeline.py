"""Background-versus-analysis comparison over a time series of ensembles.

One fixed background ensemble is tested against every analysis ensemble in
a reconstruction series, globally or within masked regions.  The p-values of
one series are adjusted jointly with Benjamini-Yekutieli.  Also provides the
OLS trend fit, ensemble mean/spread diagnostics, max-r² maps against proxy
locations, and a synthetic series generator with known ground truth.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .core import (
    Ensemble,
    Grid,
    RegionMask,
    check_same_grid,
    latlon_grid,
    subset_region,
    validate_pair,
)
from .depth import SortedReference
from .fieldsim import MaternParams, build_covariance
from .rng import derive_seed, substream
from .twosample import (
    P_FLOOR,
    TestResult,
    by_fdr_adjust,
    kd_from_depths,
    kd_test,
    kolmogorov_sf,
    scale_factor,
)


@dataclass(frozen=True, eq=False)
class ReconstructionSeries:
    background: Ensemble
    analyses: tuple
    times: np.ndarray

    def __post_init__(self):
        analyses = tuple(self.analyses)
        times = np.asarray(self.times, dtype=np.float64)
        if len(analyses) != times.size:
            raise ValueError(f"{len(analyses)} analyses but {times.size} times")
        if times.size == 0:
            raise ValueError("series needs at least one analysis")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise ValueError("times must be strictly increasing")
        for k, a in enumerate(analyses):
            try:
                validate_pair(self.background, a)
            except ValueError as exc:
                raise type(exc)(f"analysis {k} (time {times[k]:g}): {exc}") from None
        object.__setattr__(self, "analyses", analyses)
        object.__setattr__(self, "times", times)

    @property
    def grid(self) -> Grid:
        return self.background.grid

    def __len__(self):
        return len(self.analyses)


class PreparedBackground:
    """Background ensemble with its sorted columns and self-depths cached.

    Every year's test reuses these, so the background is sorted once per
    series instead of once per year.
    """

    def __init__(self, background: Ensemble):
        self.ensemble = background
        self.reference = SortedReference(background)
        self.self_depths = self.reference.depths(background.members)

    def kd(self, analysis: Ensemble) -> tuple[float, float, float]:
        validate_pair(self.ensemble, analysis)
        dy_p = self.reference.depths(analysis.members)
        ref_q = SortedReference(analysis)
        dx_q = ref_q.depths(self.ensemble.members)
        dy_q = ref_q.depths(analysis.members)
        return kd_from_depths(self.self_depths, dy_p, dx_q, dy_q)


@dataclass
class SeriesTests:
    times: np.ndarray
    results: list
    adjusted: np.ndarray
    region: int | None = None

    @property
    def statistics(self) -> np.ndarray:
        return np.array([r.statistic for r in self.results])

    @property
    def p_values(self) -> np.ndarray:
        return np.array([r.p_value for r in self.results])

    def rows(self) -> list[dict]:
        return [
            {
                "time": t,
                "kd": r.statistic,
                "scaled": r.scaled,
                "p_raw": r.p_value,
                "p_adjusted": float(a),
            }
            for t, r, a in zip(self.times.tolist(), self.results, self.adjusted)
        ]


def run_series_tests(
    series: ReconstructionSeries,
    mask: RegionMask | None = None,
    region: int | None = None,
    method: str = "asymptotic",
    permutations: int = 500,
    seed: int = 0,
) -> SeriesTests:
    """KD test of the background against each analysis, then BY adjustment.

    With ``region`` set, both ensembles are restricted to that region of
    ``mask`` and depths are recomputed on the regional subgrid.  Permutation
    tests for time index ``k`` use the substream seed ``(seed, k)``.
    """
    if region is not None and mask is None:
        raise ValueError(f"region {region} requested without a region mask")
    background = series.background
    analyses = series.analyses
    if region is not None:
        background = subset_region(background, mask, region)
        analyses = [subset_region(a, mask, region) for a in analyses]
    results = []
    if method in ("asymptotic", "kd_asymptotic"):
        prepared = PreparedBackground(background)
        for a in analyses:
            kd, k_pn, k_qm = prepared.kd(a)
            c = scale_factor(background.size, a.size)
            p = max(kolmogorov_sf(c * kd), P_FLOOR)
            results.append(
                TestResult(kd, c * kd, p, "kd_asymptotic", background.size, a.size, None, k_pn, k_qm)
            )
    elif method in ("permutation", "kd_permutation"):
        for k, a in enumerate(analyses):
            results.append(
                kd_test(background, a, "kd_permutation", permutations, derive_seed(seed, k))
            )
    else:
        raise ValueError(f"unknown method {method!r}")
    adjusted = by_fdr_adjust([r.p_value for r in results])
    return SeriesTests(series.times.copy(), results, adjusted, region)


@dataclass(frozen=True)
class Trend:
    slope: float
    intercept: float
    slope_se: float
    p_value: float
    n: int

    def as_dict(self) -> dict:
        return dict(slope=self.slope, intercept=self.intercept, slope_se=self.slope_se,
                    p_value=self.p_value, n=self.n)


def ols_trend(times, values) -> Trend:
    """Ordinary least squares line; ``p_value`` is the two-sided slope t-test."""
    t = np.asarray(times, dtype=np.float64)
    y = np.asarray(values, dtype=np.float64)
    if t.shape != y.shape or t.ndim != 1:
        raise ValueError("times and values must be 1-D and of equal length")
    if t.size < 3:
        raise ValueError(f"trend needs at least 3 points, got {t.size}")
    if np.ptp(t) == 0:
        raise ValueError("times are all equal")
    if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
        raise ValueError("times and values must be finite")
    fit = stats.linregress(t, y)
    p = float(fit.pvalue) if np.isfinite(fit.pvalue) else 1.0
    return Trend(float(fit.slope), float(fit.intercept), float(fit.stderr), p, t.size)


def ensemble_diagnostics(background: Ensemble, analysis: Ensemble) -> tuple[float, float]:
    """Weighted grid means of squared mean difference and squared sd ratio.

    Returns ``(mean_b - mean_a)^2`` and ``(sd_b / sd_a)^2`` averaged over the
    grid with its quadrature weights.
    """
    validate_pair(background, analysis)
    w = background.grid.weights
    sd_b = background.members.std(axis=0, ddof=1)
    sd_a = analysis.members.std(axis=0, ddof=1)
    if np.any(sd_b == 0):
        raise ValueError(f"background has zero spread at point {int(np.argmax(sd_b == 0))}")
    if np.any(sd_a == 0):
        raise ValueError(f"analysis has zero spread at point {int(np.argmax(sd_a == 0))}")
    diff = background.members.mean(axis=0) - analysis.members.mean(axis=0)
    return float(w @ diff**2), float(w @ (sd_b / sd_a) ** 2)


# --- proxies and correlation maps -------------------------------------------------


@dataclass(frozen=True)
class ProxyRecord:
    point: int
    first_time: float
    type: str = ""


@dataclass(frozen=True)
class ProxyCatalog:
    grid: Grid
    records: tuple

    def __post_init__(self):
        recs = tuple(self.records)
        for r in recs:
            if not 0 <= r.point < self.grid.size:
                raise ValueError(f"proxy location {r.point} is off the grid")
        object.__setattr__(self, "records", recs)

    def available(self, at_time: float) -> np.ndarray:
        """Distinct grid points holding at least one proxy available at ``at_time``."""
        pts = {r.point for r in self.records if r.first_time <= at_time}
        return np.array(sorted(pts), dtype=np.intp)

    def counts(self, times) -> np.ndarray:
        first = np.array([r.first_time for r in self.records])
        return np.array([int(np.sum(first <= t)) for t in np.asarray(times)])

    @classmethod
    def from_csv(cls, path, grid: Grid) -> "ProxyCatalog":
        """Read ``lat,lon,first_year,type`` rows, snapping to the nearest grid point."""
        if grid.ndim != 2:
            raise ValueError("proxy catalogs need a 2-D lat-lon grid")
        records = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            need = {"lat", "lon", "first_year", "type"}
            if reader.fieldnames is None or not need <= set(reader.fieldnames):
                raise ValueError(f"{path}: expected header lat,lon,first_year,type")
            for lineno, row in enumerate(reader, start=2):
                try:
                    lat, lon = float(row["lat"]), float(row["lon"])
                    first = float(row["first_year"])
                except (TypeError, ValueError):
                    raise ValueError(f"{path}:{lineno}: cannot parse {row!r}") from None
                records.append(ProxyRecord(snap_to_grid(grid, lat, lon), first, row["type"] or ""))
        return cls(grid, records)

    def to_csv(self, path) -> None:
        lats, lons = self.grid.coords
        nlon = self.grid.dims[1]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["lat", "lon", "first_year", "type"])
            for r in self.records:
                i, j = divmod(r.point, nlon)
                writer.writerow([repr(float(lats[i])), repr(float(lons[j])), repr(r.first_time), r.type])


def snap_to_grid(grid: Grid, lat: float, lon: float) -> int:
    lats, lons = grid.coords
    i = int(np.argmin(np.abs(lats - lat)))
    # longitudes compared on the circle
    dlon = np.abs((lons - lon + 180.0) % 360.0 - 180.0)
    j = int(np.argmin(dlon))
    return i * grid.dims[1] + j


@dataclass
class R2Map:
    values: np.ndarray
    undefined: np.ndarray
    proxies_used: np.ndarray
    proxies_excluded: np.ndarray = field(default_factory=lambda: np.array([], dtype=np.intp))


def max_r2_map(fields, proxies: ProxyCatalog, at_time: float) -> R2Map:
    """Max squared correlation between each point's series and available proxy sites.

    ``fields`` has shape ``(times, points)``.  Points with a constant series
    get NaN and are flagged in ``undefined``; proxy sites with a constant
    series are dropped and listed in ``proxies_excluded``.
    """
    x = np.asarray(fields, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != proxies.grid.size:
        raise ValueError("fields must have shape (times, grid points)")
    if x.shape[0] < 3:
        raise ValueError(f"need at least 3 time steps, got {x.shape[0]}")
    sites = proxies.available(at_time)
    if sites.size == 0:
        raise ValueError(f"no proxies available at time {at_time:g}")
    xc = x - x.mean(axis=0)
    norm = np.sqrt(np.einsum("tg,tg->g", xc, xc))
    scale = np.abs(x).max(axis=0)
    flat = norm <= 1e-12 * np.maximum(scale, 1e-300) * np.sqrt(x.shape[0])
    good_sites = sites[~flat[sites]]
    excluded = sites[flat[sites]]
    if good_sites.size == 0:
        raise ValueError("every available proxy site has a constant series")
    z = np.zeros_like(xc)
    z[:, ~flat] = xc[:, ~flat] / norm[~flat]
    r2 = (z.T @ z[:, good_sites]) ** 2
    values = np.clip(r2.max(axis=1), 0.0, 1.0)
    values[good_sites] = 1.0
    values[flat] = np.nan
    return R2Map(values, flat, good_sites, excluded)


# --- synthetic reconstruction series ---------------------------------------------

UNTOUCHED_REGION = 3


@dataclass
class SyntheticSeries:
    series: ReconstructionSeries
    mask: RegionMask
    proxies: ProxyCatalog
    strength: np.ndarray
    untouched_region: int = UNTOUCHED_REGION


def _wendland(u):
    u = np.clip(u, 0.0, 1.0)
    return (1.0 - u) ** 4 * (4.0 * u + 1.0)


def generate_synthetic_series(
    years: int = 50,
    members: int = 50,
    nlat: int = 24,
    nlon: int = 48,
    n_proxies: int = 60,
    start_year: int = 850,
    seed: int = 0,
    range_deg: float = 20.0,
    smoothness: float = 1.5,
    influence_deg: float = 30.0,
    max_weight: float = 0.8,
    gain: float = 0.5,
    weighting: str = "uniform",
) -> SyntheticSeries:
    """Synthetic background/analysis series with a known assimilation footprint.

    Background and each year's prior draw share one Matérn law on a lat-lon
    grid.  Proxies sit north of 15°N and switch on at evenly spread years.
    Year ``t``'s analysis pulls every prior member towards a random "truth"
    field with per-point weight

        w_t(s) = max_weight * (1 - exp(-gain * sum_q phi(|s - q| / influence_deg)))

    over proxies ``q`` available at ``t``, where ``phi`` is a compactly
    supported Wendland function.  Points farther than ``influence_deg`` from
    every proxy (everything south of 30°S, region 3 of the mask) keep the
    prior draw unchanged, so there the two ensembles share one law.
    """
    if years < 3:
        raise ValueError("years must be >= 3")
    lats = -90.0 + (np.arange(nlat) + 0.5) * 180.0 / nlat
    lons = (np.arange(nlon) + 0.5) * 360.0 / nlon
    grid = latlon_grid(lats, lons, weighting)
    pts = grid.points()
    L = build_covariance(grid, MaternParams(1.0, range_deg, smoothness))

    def draw(rng, count):
        return rng.standard_normal((count, grid.size)) @ L.T

    background = Ensemble(grid, draw(substream(seed, 0), members), "background")
    times = np.arange(start_year, start_year + years, dtype=np.float64)

    prng = substream(seed, 1)
    north = np.flatnonzero(pts[:, 0] > 15.0)
    sites = prng.choice(north, size=n_proxies, replace=True)
    # ~10% of proxies exist from the start; the rest switch on evenly
    first = np.linspace(times[0], times[-1], n_proxies)
    first[: max(1, n_proxies // 10)] = times[0]
    kinds = np.array(["tree", "coral", "ice"])[prng.integers(0, 3, n_proxies)]
    records = [ProxyRecord(int(p), float(f), str(k)) for p, f, k in zip(sites, first, kinds)]
    catalog = ProxyCatalog(grid, records)

    # per-point influence of each proxy site (degrees, no wraparound in lat)
    dlat = pts[:, None, 0] - pts[None, sites, 0]
    dlon = np.abs((pts[:, None, 1] - pts[None, sites, 1] + 180.0) % 360.0 - 180.0)
    phi = _wendland(np.hypot(dlat, dlon) / influence_deg)

    analyses, strength = [], []
    for k, t in enumerate(times):
        avail = first <= t
        w = max_weight * (1.0 - np.exp(-gain * phi[:, avail].sum(axis=1)))
        rng = substream(seed, 2, k)
        prior = draw(rng, members)
        truth = draw(rng, 2)[0]
        analysis = (1.0 - w) * prior + w * truth
        analyses.append(Ensemble(grid, analysis, f"analysis {int(t)}"))
        strength.append(float(grid.weights @ w))

    region = np.where(pts[:, 0] > 15.0, 1, np.where(pts[:, 0] >= -30.0, 2, UNTOUCHED_REGION))
    mask = RegionMask(grid, region)
    series = ReconstructionSeries(background, analyses, times)
    return SyntheticSeries(series, mask, catalog, np.array(strength))


def analysis_means(series: ReconstructionSeries) -> np.ndarray:
    """Ensemble-mean field of every analysis, shape ``(times, points)``."""
    return np.vstack([a.members.mean(axis=0) for a in series.analyses])


def check_mask(series: ReconstructionSeries, mask: RegionMask) -> None:
    check_same_grid(series.grid, mask.grid)


# --- file-driven runs ---------------------------------------------------------------

PIPELINE_KEYS = {
    "background", "times", "format", "region_mask", "regions", "method", "permutations",
    "seed", "weights", "proxies", "r2_times", "r2_source", "diagnostics", "output_dir",
}


class PipelineConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def read_time_manifest(path) -> tuple[np.ndarray, list[Path]]:
    """``time,path`` CSV; relative paths resolve against the manifest's folder."""
    path = Path(path)
    times, files = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["time", "path"]:
            raise ValueError(f"{path}: expected header time,path")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                times.append(float(row[0]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: bad time {row!r}") from None
            if len(row) < 2 or not row[1].strip():
                raise ValueError(f"{path}:{lineno}: missing file path")
            files.append((path.parent / row[1].strip()).resolve())
    if not times:
        raise ValueError(f"{path}: empty time manifest")
    t = np.array(times)
    if t.size > 1 and not np.all(np.diff(t) > 0):
        raise ValueError(f"{path}: inconsistent time manifest, times must be strictly increasing")
    return t, files


def write_time_manifest(path, times, files) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time", "path"])
        for t, f in zip(times, files):
            writer.writerow([repr(float(t)), str(f)])


def load_pipeline_config(d: dict) -> dict:
    """Validate a pipeline config mapping, filling defaults."""
    for key in d:
        if key not in PIPELINE_KEYS:
            raise PipelineConfigError(key, "unknown key")
    for key in ("background", "times"):
        if key not in d:
            raise PipelineConfigError(key, "missing required key")
    cfg = {
        "format": "binary", "region_mask": None, "regions": [], "method": "asymptotic",
        "permutations": 500, "seed": 0, "weights": "uniform", "proxies": None,
        "r2_times": [], "r2_source": "analysis_mean", "diagnostics": True, "output_dir": None,
    }
    cfg.update(d)
    if cfg["format"] not in ("binary", "csv"):
        raise PipelineConfigError("format", "must be 'binary' or 'csv'")
    if cfg["method"] not in ("asymptotic", "permutation"):
        raise PipelineConfigError("method", "must be 'asymptotic' or 'permutation'")
    if cfg["method"] == "permutation" and int(cfg["permutations"]) < 99:
        raise PipelineConfigError("permutations", "permutations >= 99 required")
    if cfg["weights"] not in ("uniform", "coslat"):
        raise PipelineConfigError("weights", "must be 'uniform' or 'coslat'")
    regions = cfg["regions"]
    cfg["regions"] = [int(r) for r in (regions if isinstance(regions, list) else [regions])]
    if cfg["regions"] and not cfg["region_mask"]:
        raise PipelineConfigError("region_mask", "regions requested without a region mask")
    r2 = cfg["r2_times"]
    cfg["r2_times"] = [float(t) for t in (r2 if isinstance(r2, list) else [r2])]
    if cfg["r2_times"] and not cfg["proxies"]:
        raise PipelineConfigError("proxies", "r2_times requested without a proxy catalog")
    if cfg["r2_source"] not in ("analysis_mean",):
        raise PipelineConfigError("r2_source", "only 'analysis_mean' is supported")
    try:
        cfg["seed"] = int(cfg["seed"])
        cfg["permutations"] = int(cfg["permutations"])
    except (TypeError, ValueError) as exc:
        raise PipelineConfigError("seed", f"must be an integer ({exc})") from None
    return cfg


def _write_csv(path: Path, columns, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    tmp.replace(path)


def run_pipeline(cfg: dict, base_dir, output_dir) -> list[Path]:
    """Run the full comparison described by a validated config; returns written files."""
    import json

    from .core import load_ensemble, load_region_mask, with_weighting, write_field

    base = Path(base_dir)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    fmt = cfg["format"]
    background = load_ensemble(base / cfg["background"], fmt)
    times, files = read_time_manifest(base / cfg["times"])
    analyses = [load_ensemble(f, fmt) for f in files]
    if cfg["weights"] != background.grid.weight_mode:
        grid = with_weighting(background.grid, cfg["weights"])
        background = Ensemble(grid, background.members, background.label)
        analyses = [Ensemble(grid, a.members, a.label) for a in analyses]
    series = ReconstructionSeries(background, analyses, times)
    mask = None
    if cfg["region_mask"]:
        mask = load_region_mask(base / cfg["region_mask"], series.grid)
        for r in cfg["regions"]:
            if r not in mask.regions:
                raise ValueError(f"empty region {r}: not present in the region mask")
    columns = ["time", "kd", "scaled", "p_raw", "p_adjusted"]
    written = []
    trends = {}
    runs = [(None, "global")] + [(r, f"region_{r}") for r in cfg["regions"]]
    for region, name in runs:
        res = run_series_tests(
            series, mask, region, cfg["method"], cfg["permutations"], cfg["seed"]
        )
        path = out / f"{name}.csv"
        _write_csv(path, columns, res.rows())
        written.append(path)
        if len(series) >= 3:
            trends[name] = ols_trend(series.times, res.statistics).as_dict()
    path = out / "trend.json"
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(trends, indent=2))
    tmp.replace(path)
    written.append(path)
    if cfg["diagnostics"]:
        rows = []
        for t, a in zip(series.times.tolist(), series.analyses):
            msd, ratio = ensemble_diagnostics(series.background, a)
            rows.append({"time": t, "mean_sq_diff": msd, "mean_sq_sd_ratio": ratio})
        path = out / "diagnostics.csv"
        _write_csv(path, ["time", "mean_sq_diff", "mean_sq_sd_ratio"], rows)
        written.append(path)
    if cfg["r2_times"]:
        catalog = ProxyCatalog.from_csv(base / cfg["proxies"], series.grid)
        fields = analysis_means(series)
        for t in cfg["r2_times"]:
            r2 = max_r2_map(fields, catalog, t)
            path = out / f"r2_{t:g}.dfe"
            write_field(series.grid, r2.values, path, label=f"max r2 at {t:g}")
            written.append(path)
    return written


def write_synthetic(synth: SyntheticSeries, directory, format: str = "binary") -> list[Path]:
    """Write a synthetic series plus a ready-to-run ``pipeline.json``."""
    import json

    from .core import write_ensemble, write_region_mask

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ext = ".csv" if format == "csv" else ".dfe"
    written = []
    bg = d / f"background{ext}"
    write_ensemble(synth.series.background, bg, format)
    written.append(bg)
    names = []
    for t, a in zip(synth.series.times, synth.series.analyses):
        p = d / f"analysis_{int(t)}{ext}"
        write_ensemble(a, p, format)
        names.append(p.name)
        written.append(p)
    write_time_manifest(d / "times.csv", synth.series.times, names)
    write_region_mask(synth.mask, d / "regions.csv")
    synth.proxies.to_csv(d / "proxies.csv")
    times = synth.series.times
    config = {
        "background": bg.name,
        "times": "times.csv",
        "format": format,
        "region_mask": "regions.csv",
        "regions": synth.mask.regions,
        "proxies": "proxies.csv",
        "r2_times": [float(times[len(times) // 2]), float(times[-1])],
        "method": "asymptotic",
        "seed": 0,
    }
    (d / "pipeline.json").write_text(json.dumps(config, indent=2))
    with open(d / "strength.csv", "w") as fh:
        fh.write("time,strength\n")
        fh.writelines(f"{t!r},{s!r}\n" for t, s in zip(times.tolist(), synth.strength.tolist()))
    written += [d / n for n in ("times.csv", "regions.csv", "proxies.csv", "pipeline.json", "strength.csv")]
    return written
