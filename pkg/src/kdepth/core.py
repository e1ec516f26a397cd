"""Grid and ensemble data model, region subsetting and file IO.

Flat point ordering is row-major over ``Grid.dims`` everywhere.  A grid
produced by :func:`subset_region` is one-dimensional; its single coordinate
axis holds the retained flat indices of the parent grid.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DFE1"
WEIGHT_MODES = ("uniform", "coslat", "custom")


class GridMismatchError(ValueError):
    pass


class EnsembleFormatError(ValueError):
    pass


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Grid:
    """Tensor-product discretisation of the spatial domain.

    Parameters
    ----------
    dims : sequence of int
        Points per axis.
    coords : sequence of arrays
        Strictly increasing coordinates for each axis.
    weights : array, optional
        Per-point quadrature weights (flat, row-major).  Uniform when omitted.
    weight_mode : str
        ``"uniform"``, ``"coslat"`` or ``"custom"``; informational, written to
        file headers.
    """

    dims: tuple
    coords: tuple
    weights: np.ndarray = None
    weight_mode: str = "uniform"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims or any(d < 1 for d in dims):
            raise ValueError(f"dims must be positive integers, got {self.dims}")
        if len(self.coords) != len(dims):
            raise ValueError("one coordinate array per axis is required")
        coords = []
        for axis, (d, c) in enumerate(zip(dims, self.coords)):
            c = _frozen(c)
            if c.shape != (d,):
                raise ValueError(f"axis {axis}: expected {d} coordinates, got {c.shape}")
            if d > 1 and not np.all(np.diff(c) > 0):
                raise ValueError(f"axis {axis}: coordinates must be strictly increasing")
            coords.append(c)
        size = int(np.prod(dims))
        if self.weights is None:
            w = np.full(size, 1.0 / size)
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
        if w.shape != (size,):
            raise ValueError(f"weights length {w.size} != point count {size}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) >= 1e-12:
            raise ValueError(f"weights must sum to 1 (got {w.sum()!r})")
        if self.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "coords", tuple(coords))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def points(self) -> np.ndarray:
        """Coordinates of every point, shape ``(size, ndim)``, row-major."""
        mesh = np.meshgrid(*self.coords, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.dims == other.dims
            and all(np.array_equal(a, b) for a, b in zip(self.coords, other.coords))
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.dims, self.weights.tobytes()))


def unit_grid(*dims: int) -> Grid:
    """Uniform grid on ``[0, 1]^p`` with ``dims[k]`` equispaced points per axis."""
    return Grid(dims, [np.linspace(0.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims])


def _normalized(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    w = w / w.sum()
    # a second pass pulls the float sum to within a few ulps of 1
    return w / w.sum()


def latlon_grid(lats, lons, weighting: str = "uniform") -> Grid:
    """Latitude-longitude grid (degrees), latitude as axis 0.

    ``weighting="coslat"`` uses cosine-latitude area weights.
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    if weighting == "uniform":
        return Grid((lats.size, lons.size), (lats, lons))
    if weighting == "coslat":
        w = np.repeat(np.cos(np.deg2rad(lats)).clip(min=0.0), lons.size)
        return Grid((lats.size, lons.size), (lats, lons), _normalized(w), "coslat")
    raise ValueError(f"unknown weighting {weighting!r}")


def with_weighting(grid: Grid, weighting: str) -> Grid:
    """Copy of a 2-D lat-lon grid with the requested weighting mode."""
    if weighting == grid.weight_mode:
        return grid
    if grid.ndim != 2:
        raise ValueError("weighting modes apply to 2-D lat-lon grids only")
    return latlon_grid(grid.coords[0], grid.coords[1], weighting)


@dataclass(frozen=True, eq=False)
class Ensemble:
    grid: Grid
    members: np.ndarray
    label: str = ""

    def __post_init__(self):
        x = np.array(self.members, dtype=np.float64, copy=True)
        if x.ndim != 2:
            raise ValueError("members must be a (count, points) matrix")
        if x.shape[1] != self.grid.size:
            raise ValueError(
                f"members have {x.shape[1]} points but the grid has {self.grid.size}"
            )
        if x.shape[0] < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {x.shape[0]}")
        bad = np.argwhere(~np.isfinite(x))
        if bad.size:
            i, j = bad[0]
            raise ValueError(f"non-finite value at member {i}, point {j}")
        x.setflags(write=False)
        object.__setattr__(self, "members", x)

    @property
    def size(self) -> int:
        return self.members.shape[0]

    def __len__(self):
        return self.size


@dataclass(frozen=True, eq=False)
class RegionMask:
    grid: Grid
    region_id: np.ndarray = field(repr=False)

    def __post_init__(self):
        ids = np.asarray(self.region_id)
        if ids.shape != (self.grid.size,):
            raise ValueError(f"mask length {ids.size} != grid point count {self.grid.size}")
        if not np.issubdtype(ids.dtype, np.integer):
            if not np.all(ids == np.round(ids)):
                raise ValueError("region ids must be integers")
        if np.any(ids < 0):
            raise ValueError("region ids must be nonnegative")
        object.__setattr__(self, "region_id", _frozen(ids, np.int64))

    @property
    def regions(self) -> list[int]:
        return sorted(int(r) for r in np.unique(self.region_id) if r != 0)


def validate_pair(a: Ensemble, b: Ensemble) -> None:
    """Raise :class:`GridMismatchError` unless both ensembles share one grid."""
    check_same_grid(a.grid, b.grid)


def check_same_grid(ga: Grid, gb: Grid) -> None:
    if ga is gb:
        return
    if ga.ndim != gb.ndim:
        raise GridMismatchError(f"grid dimension mismatch: {ga.ndim} vs {gb.ndim} axes")
    for axis, (da, db) in enumerate(zip(ga.dims, gb.dims)):
        if da != db:
            raise GridMismatchError(f"grid size mismatch on axis {axis}: {da} vs {db}")
    for axis, (ca, cb) in enumerate(zip(ga.coords, gb.coords)):
        if not np.array_equal(ca, cb):
            raise GridMismatchError(f"grid coordinate mismatch on axis {axis}")
    if not np.array_equal(ga.weights, gb.weights):
        raise GridMismatchError("grid weight mismatch")


def subset_region(ens: Ensemble, mask: RegionMask, region: int) -> Ensemble:
    """Restrict ``ens`` to the points of ``mask`` labelled ``region``.

    Weights of the retained points are renormalised to sum to one.
    """
    try:
        check_same_grid(ens.grid, mask.grid)
    except GridMismatchError as exc:
        raise GridMismatchError(f"mask does not match ensemble grid: {exc}") from None
    idx = np.flatnonzero(mask.region_id == region)
    if idx.size == 0:
        raise ValueError(f"empty region {region}")
    if idx.size == ens.grid.size:
        return ens
    w = ens.grid.weights[idx]
    if w.sum() <= 0:
        raise ValueError(f"region {region} has zero total weight")
    grid = Grid((idx.size,), (idx.astype(np.float64),), _normalized(w), "custom")
    return Ensemble(grid, ens.members[:, idx], ens.label)


def whole_domain_mask(grid: Grid) -> RegionMask:
    return RegionMask(grid, np.ones(grid.size, dtype=np.int64))


# --- file formats -----------------------------------------------------------


def _grid_header(grid: Grid) -> dict:
    head = {
        "p": grid.ndim,
        "dims": list(grid.dims),
        "weight_mode": grid.weight_mode,
        "coords": [c.tolist() for c in grid.coords],
    }
    if grid.weight_mode == "custom":
        head["weights"] = grid.weights.tolist()
    return head


def _grid_from_header(head: dict) -> Grid:
    try:
        dims = [int(d) for d in head["dims"]]
        mode = head.get("weight_mode", "uniform")
        coords = head.get("coords")
    except (KeyError, TypeError, ValueError) as exc:
        raise EnsembleFormatError(f"malformed header: {exc}") from None
    if "p" in head and int(head["p"]) != len(dims):
        raise EnsembleFormatError("malformed header: p disagrees with dims")
    if coords is None:
        coords = [np.linspace(0.0, 1.0, d) if d > 1 else np.zeros(1) for d in dims]
    try:
        if mode == "custom":
            return Grid(dims, coords, head["weights"], "custom")
        if mode == "coslat":
            if len(dims) != 2:
                raise EnsembleFormatError("coslat weighting needs a 2-D grid")
            return latlon_grid(coords[0], coords[1], "coslat")
        return Grid(dims, coords)
    except (KeyError, ValueError) as exc:
        if isinstance(exc, EnsembleFormatError):
            raise
        raise EnsembleFormatError(f"malformed header: {exc}") from None


def _atomic_write(path: Path, writer) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        writer(fh)
    os.replace(tmp, path)


def write_ensemble(ens: Ensemble, path, format: str = "binary") -> None:
    """Write ``ens`` as binary (``DFE1``) or as CSV with a ``.grid.json`` sidecar."""
    path = Path(path)
    if format == "binary":
        head = _grid_header(ens.grid)
        head["members"] = ens.size
        head["label"] = ens.label

        def writer(fh):
            fh.write(MAGIC)
            fh.write(json.dumps(head).encode("utf-8") + b"\n")
            fh.write(np.ascontiguousarray(ens.members, dtype="<f8").tobytes())

        _atomic_write(path, writer)
    elif format == "csv":
        side = _grid_header(ens.grid)
        side["label"] = ens.label
        _atomic_write(
            sidecar_path(path), lambda fh: fh.write(json.dumps(side).encode("utf-8"))
        )

        def writer(fh):
            lines = ["member,point,value"]
            for i, row in enumerate(ens.members):
                lines.extend(f"{i},{j},{v!r}" for j, v in enumerate(row.tolist()))
            fh.write(("\n".join(lines) + "\n").encode("ascii"))

        _atomic_write(path, writer)
    else:
        raise ValueError(f"unknown format {format!r}")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".grid.json")


def _read_binary(path: Path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise EnsembleFormatError(f"{path}: bad magic bytes, not a DFE1 file")
        line = fh.readline()
        payload = fh.read()
    try:
        head = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise EnsembleFormatError(f"{path}: malformed header ({exc})") from None
    if not isinstance(head, dict) or "members" not in head:
        raise EnsembleFormatError(f"{path}: malformed header (no member count)")
    grid = _grid_from_header(head)
    count = int(head["members"])
    expected = count * grid.size * 8
    if len(payload) < expected:
        raise EnsembleFormatError(
            f"{path}: payload truncated ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise EnsembleFormatError(f"{path}: payload longer than header declares")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return grid, values.reshape(count, grid.size), head.get("label", "")


def _read_csv(path: Path):
    side = sidecar_path(path)
    if not side.exists():
        raise EnsembleFormatError(f"{path}: missing grid descriptor {side.name}")
    try:
        head = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise EnsembleFormatError(f"{side}: malformed grid descriptor ({exc})") from None
    grid = _grid_from_header(head)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["member", "point", "value"]:
            raise EnsembleFormatError(f"{path}: malformed header, expected member,point,value")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2])))
            except (ValueError, IndexError):
                raise EnsembleFormatError(f"{path}:{lineno}: cannot parse {row!r}") from None
    if not rows:
        raise EnsembleFormatError(f"{path}: no values")
    members = max(r[0] for r in rows) + 1
    out = np.full((members, grid.size), np.nan)
    seen = np.zeros(out.shape, dtype=bool)
    for i, j, v in rows:
        if i < 0 or not 0 <= j < grid.size:
            raise EnsembleFormatError(f"{path}: index ({i}, {j}) outside declared grid")
        out[i, j] = v
        seen[i, j] = True
    if not seen.all():
        i, j = np.argwhere(~seen)[0]
        raise EnsembleFormatError(f"{path}: dimension mismatch, no value for member {i}, point {j}")
    return grid, out, head.get("label", "")


def load_ensemble(path, format: str | None = None) -> Ensemble:
    """Read an ensemble file.  ``format`` is inferred from the extension if omitted."""
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "binary"
    if format == "binary":
        grid, values, label = _read_binary(path)
    elif format == "csv":
        grid, values, label = _read_csv(path)
    else:
        raise ValueError(f"unknown format {format!r}")
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        i, j = bad[0]
        raise EnsembleFormatError(f"{path}: non-finite value at member {i}, point {j}")
    try:
        return Ensemble(grid, values, label)
    except ValueError as exc:
        raise EnsembleFormatError(f"{path}: {exc}") from None


def write_field(grid: Grid, values, path, label: str = "") -> None:
    """Single gridded field in the ``DFE1`` layout (member count 1)."""
    values = np.asarray(values, dtype="<f8").reshape(1, grid.size)
    head = _grid_header(grid)
    head.update(members=1, label=label, kind="field")

    def writer(fh):
        fh.write(MAGIC)
        fh.write(json.dumps(head).encode("utf-8") + b"\n")
        fh.write(values.tobytes())

    _atomic_write(Path(path), writer)


def load_field(path) -> tuple[Grid, np.ndarray]:
    grid, values, _ = _read_binary(Path(path))
    if values.shape[0] != 1:
        raise EnsembleFormatError(f"{path}: expected a single field")
    return grid, values[0]


def load_region_mask(path, grid: Grid) -> RegionMask:
    """Read a ``point_index,region_id`` CSV; unlisted points are unassigned (0)."""
    ids = np.zeros(grid.size, dtype=np.int64)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["point_index", "region_id"]:
            raise ValueError(f"{path}: expected header point_index,region_id")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                j, r = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if not 0 <= j < grid.size:
                raise ValueError(f"{path}:{lineno}: point index {j} outside grid")
            ids[j] = r
    return RegionMask(grid, ids)


def write_region_mask(mask: RegionMask, path) -> None:
    lines = ["point_index,region_id"]
    lines += [f"{j},{r}" for j, r in enumerate(mask.region_id.tolist())]
    _atomic_write(Path(path), lambda fh: fh.write(("\n".join(lines) + "\n").encode()))


__all__ = [
    "Grid",
    "Ensemble",
    "RegionMask",
    "GridMismatchError",
    "EnsembleFormatError",
    "unit_grid",
    "latlon_grid",
    "with_weighting",
    "validate_pair",
    "check_same_grid",
    "subset_region",
    "whole_domain_mask",
    "load_ensemble",
    "write_ensemble",
    "load_field",
    "write_field",
    "load_region_mask",
    "write_region_mask",
]
