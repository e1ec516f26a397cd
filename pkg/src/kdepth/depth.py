"""Pointwise and integrated Tukey depth of gridded fields.

The marginal CDF at each grid point uses the weak inequality:
``P_s(x) = #{reference values <= x} / n``.  Tied field values therefore
share CDF mass; no continuity correction is applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Ensemble, validate_pair


@dataclass(frozen=True, eq=False)
class DepthProfile:
    values: np.ndarray
    reference_label: str = ""

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if np.any(v < 0) or np.any(v > 1):
            raise ValueError("depth values must lie in [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size


def tukey_from_counts(counts, n: int) -> np.ndarray:
    """Univariate Tukey depth ``1 - |1 - 2 c/n|`` from counts ``c`` of reference values <= x."""
    return 1.0 - np.abs(1.0 - 2.0 * (np.asarray(counts) / n))


def integrate(pointwise: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum over grid points of a ``(points, members)`` depth matrix.

    Rows are accumulated in grid order, so the result does not depend on how
    many members are evaluated together.
    """
    pointwise = np.ascontiguousarray(pointwise)
    return (pointwise * weights[:, None]).sum(axis=0)


def pointwise_tukey_depth(value: float, reference_values) -> float:
    ref = np.asarray(reference_values, dtype=np.float64).ravel()
    if ref.size == 0:
        raise ValueError("empty reference list")
    if not np.all(np.isfinite(ref)):
        raise ValueError("reference values must be finite")
    return float(tukey_from_counts(np.count_nonzero(ref <= value), ref.size))


class SortedReference:
    """Reference ensemble with every grid column sorted once.

    Depth queries are answered by binary search in the sorted columns, so a
    reference reused across many query ensembles is only sorted once.
    """

    def __init__(self, reference: Ensemble):
        self.ensemble = reference
        self.grid = reference.grid
        self.n = reference.size
        # (points, members): each row is one sorted column
        self.columns = np.sort(reference.members.T, axis=1)
        self.columns.setflags(write=False)

    def count_le(self, values: np.ndarray) -> np.ndarray:
        """Counts of reference values <= each query value, shape ``(points, q)``."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim == 1:
            values = values[None, :]
        if values.shape[1] != self.grid.size:
            raise ValueError(
                f"member length {values.shape[1]} != grid point count {self.grid.size}"
            )
        out = np.empty((self.grid.size, values.shape[0]), dtype=np.intp)
        for g, col in enumerate(self.columns):
            out[g] = np.searchsorted(col, values[:, g], side="right")
        return out

    def pointwise(self, values: np.ndarray) -> np.ndarray:
        return tukey_from_counts(self.count_le(values), self.n)

    def depths(self, values: np.ndarray) -> np.ndarray:
        return integrate(self.pointwise(values), self.grid.weights)


def integrated_depth(member, reference: Ensemble | SortedReference) -> float:
    if not isinstance(reference, SortedReference):
        reference = SortedReference(reference)
    member = np.asarray(member, dtype=np.float64).ravel()
    if member.size != reference.grid.size:
        raise ValueError(
            f"member length {member.size} != grid point count {reference.grid.size}"
        )
    return float(reference.depths(member[None, :])[0])


def depth_profile(sample: Ensemble, reference: Ensemble | SortedReference) -> DepthProfile:
    """Integrated depth of every member of ``sample`` relative to ``reference``.

    ``sample`` may be the reference itself (within-sample depths).
    """
    if isinstance(reference, SortedReference):
        validate_pair(sample, reference.ensemble)
        ref = reference
    else:
        validate_pair(sample, reference)
        ref = SortedReference(reference)
    values = ref.depths(sample.members)
    # guard against float drift just outside [0, 1]
    values = np.clip(values, 0.0, 1.0)
    return DepthProfile(values, ref.ensemble.label)


class PooledRanks:
    """Per-point ranks of a pooled set of fields, for fast relabelling.

    Built once from the stacked members of two ensembles.  For any labelling
    of the pooled members into two groups, :meth:`depths` returns the
    integrated depth of every pooled member relative to each group without
    re-sorting, which is what permutation tests need.
    """

    def __init__(self, members: np.ndarray, weights: np.ndarray):
        cols = np.ascontiguousarray(np.asarray(members, dtype=np.float64).T)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.size = cols.shape[1]
        order = np.argsort(cols, axis=1)
        ordered = np.take_along_axis(cols, order, axis=1)
        pos = np.broadcast_to(np.arange(self.size), cols.shape)
        tied = np.zeros(cols.shape, dtype=bool)
        tied[:, :-1] = ordered[:, 1:] == ordered[:, :-1]
        if tied.any():
            # every member of a tie group points at the group's last slot
            last = np.where(tied, self.size, pos)
            last = np.minimum.accumulate(last[:, ::-1], axis=1)[:, ::-1]
        else:
            last = pos
        self.order = order
        self.last = np.empty(cols.shape, dtype=np.intp)
        np.put_along_axis(self.last, order, last, axis=1)

    def counts(self, in_first: np.ndarray):
        """Counts of first-group and second-group values <= each pooled value.

        Both returned arrays have shape ``(points, pooled members)``.
        """
        in_first = np.asarray(in_first, dtype=bool)
        cum = np.cumsum(in_first[self.order], axis=1, dtype=np.intp)
        first = np.take_along_axis(cum, self.last, axis=1)
        return first, self.last + 1 - first

    def depths(self, in_first: np.ndarray):
        """Integrated depths of all pooled members w.r.t. each group."""
        in_first = np.asarray(in_first, dtype=bool)
        n = int(in_first.sum())
        m = in_first.size - n
        c_first, c_second = self.counts(in_first)
        d_first = integrate(tukey_from_counts(c_first, n), self.weights)
        d_second = integrate(tukey_from_counts(c_second, m), self.weights)
        return np.clip(d_first, 0.0, 1.0), np.clip(d_second, 0.0, 1.0)
