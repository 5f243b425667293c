"""Exact nearest-neighbour queries under the maximum (L-infinity) norm.

Neighbours are ordered by distance, ties by ascending row index, and the
query row itself is never returned.  Both backends scan all rows; the numba
kernel stops a distance evaluation as soon as one coordinate already rules
the candidate out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _backend


@dataclass(frozen=True, eq=False)
class SampleSet:
    """An immutable ``n x d`` matrix of finite samples (rows are samples)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True, order="C")
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2:
            raise ValueError("samples must be a 2-D array (n rows, d columns)")
        if arr.shape[0] < 2 or arr.shape[1] < 1:
            raise ValueError("need at least 2 samples of dimension >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def d(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray


def _check_count(s: SampleSet, m: int) -> None:
    if not 1 <= m <= s.n - 1:
        raise ValueError(f"neighbour count must be in [1, {s.n - 1}], got {m}")


def knn_query(s: SampleSet, i: int, m: int) -> NeighborList:
    """The ``m`` nearest rows to row ``i`` (excluding ``i``)."""
    _check_count(s, m)
    if not 0 <= i < s.n:
        raise IndexError(f"row {i} out of range")
    idx, dist = knn_all(s, m, rows=np.array([i]))
    return NeighborList(idx[0], dist[0])


def kth_distance(s: SampleSet, i: int, k: int) -> float:
    return float(knn_query(s, i, k).distances[-1])


def knn_all(s: SampleSet, m: int, rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour indices and distances for every row in ``rows``.

    Returns ``(indices, distances)``, each of shape ``(len(rows), m)``.
    """
    _check_count(s, m)
    rows = np.arange(s.n) if rows is None else np.asarray(rows, dtype=np.int64)
    if _backend.use_numba():
        # widest columns first so most candidates are rejected early; a max
        # over coordinates does not depend on their order
        order = np.argsort(-s.data.std(axis=0), kind="stable")
        return _knn_numba(np.ascontiguousarray(s.data[:, order]), m, rows)
    return _knn_numpy(s.data, m, rows)


def _knn_numpy(x, m, rows, chunk=None):
    n, d = x.shape
    chunk = chunk or max(1, (1 << 22) // n)
    out_idx = np.empty((len(rows), m), dtype=np.int64)
    out_dist = np.empty((len(rows), m), dtype=np.float64)
    for start in range(0, len(rows), chunk):
        sel = rows[start : start + chunk]
        dist = np.zeros((len(sel), n))
        for c in range(d):
            np.maximum(dist, np.abs(x[sel, c][:, None] - x[None, :, c]), out=dist)
        dist[np.arange(len(sel)), sel] = np.inf
        # stable sort keeps equal distances in ascending row order
        order = np.argsort(dist, axis=1, kind="stable")[:, :m]
        out_idx[start : start + len(sel)] = order
        out_dist[start : start + len(sel)] = np.take_along_axis(dist, order, axis=1)
    return out_idx, out_dist


if _backend.HAS_NUMBA:

    @_backend.njit(cache=True, parallel=True)
    def _knn_numba(x, m, rows):
        n, d = x.shape
        nq = rows.shape[0]
        out_idx = np.empty((nq, m), dtype=np.int64)
        out_dist = np.empty((nq, m), dtype=np.float64)
        for q in _backend.prange(nq):
            i = rows[q]
            best_d = np.full(m, np.inf)
            best_i = np.full(m, -1, dtype=np.int64)
            for j in range(n):
                if j == i:
                    continue
                worst = best_d[m - 1]
                dist = 0.0
                c = 0
                # blocks of 8 coordinates vectorise; later rows never
                # displace an equal distance, hence >=
                while c < d:
                    stop = min(c + 8, d)
                    for cc in range(c, stop):
                        dist = max(dist, abs(x[i, cc] - x[j, cc]))
                    if dist >= worst:
                        break
                    c = stop
                if dist >= worst:
                    continue
                pos = m - 1
                while pos > 0 and best_d[pos - 1] > dist:
                    best_d[pos] = best_d[pos - 1]
                    best_i[pos] = best_i[pos - 1]
                    pos -= 1
                best_d[pos] = dist
                best_i[pos] = j
            out_idx[q] = best_i
            out_dist[q] = best_d
        return out_idx, out_dist

else:  # pragma: no cover
    _knn_numba = None
