"""Exact nearest-neighbor search restricted to treatment groups.

All comparisons are made on squared Euclidean distances accumulated
coordinate by coordinate, so that every code path (search, catchment tests,
reference scans in the tests) sees bit-identical distances. Ties are broken by
ascending unit index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import InfeasibleMError

_CHUNK_ELEMS = 2_000_000


def sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between the rows of ``a`` (p, d) and ``b`` (q, d)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    out = (a[:, None, 0] - b[None, :, 0]) ** 2
    for k in range(1, a.shape[1]):
        out += (a[:, None, k] - b[None, :, k]) ** 2
    return out


def _chunks(n_rows, n_cols):
    step = max(1, _CHUNK_ELEMS // max(n_cols, 1))
    for start in range(0, n_rows, step):
        yield slice(start, min(n_rows, start + step))


def _knn_brute(queries, points, k):
    """Positions (into ``points``) of the k nearest rows, ordered by (distance, position)."""
    nq, npts = len(queries), len(points)
    pos = np.empty((nq, k), dtype=np.intp)
    dist = np.empty((nq, k))
    for sl in _chunks(nq, npts):
        D = sqdist(queries[sl], points)
        if k >= npts or npts <= 64:
            order = np.argsort(D, axis=1, kind="stable")[:, :k]
        else:
            part = np.argpartition(D, k - 1, axis=1)[:, :k]
            kth = np.take_along_axis(D, part, axis=1).max(axis=1)
            tied = (D <= kth[:, None]).sum(axis=1) > k
            pd_ = np.take_along_axis(D, part, axis=1)
            sub = np.lexsort((part, pd_), axis=1)
            order = np.take_along_axis(part, sub, axis=1)
            if tied.any():
                order[tied] = np.argsort(D[tied], axis=1, kind="stable")[:, :k]
        pos[sl] = order
        dist[sl] = np.take_along_axis(D, order, axis=1)
    return pos, dist


def _knn_sorted_1d(queries, points, k, sorter, sorted_vals):
    """Window search on sorted 1-D data; rows with boundary ties fall back to brute force."""
    q = queries[:, 0]
    npts = len(points)
    p = np.searchsorted(sorted_vals, q)
    lo = np.clip(p - k, 0, npts)
    hi = np.clip(p + k, 0, npts)
    cand = lo[:, None] + np.arange(2 * k)[None, :]
    valid = cand < hi[:, None]
    cand = np.minimum(cand, npts - 1)
    D = np.where(valid, (sorted_vals[cand] - q[:, None]) ** 2, np.inf)
    gpos = np.where(valid, sorter[cand], npts)
    order = np.lexsort((gpos, D), axis=1)[:, :k]
    pos = np.take_along_axis(gpos, order, axis=1)
    dist = np.take_along_axis(D, order, axis=1)
    kth = dist[:, -1]
    left = lo > 0
    right = hi < npts
    flag = np.zeros(len(q), dtype=bool)
    flag[left] |= (sorted_vals[lo[left] - 1] - q[left]) ** 2 <= kth[left]
    flag[right] |= (sorted_vals[np.minimum(hi[right], npts - 1)] - q[right]) ** 2 <= kth[right]
    if flag.any():
        pos[flag], dist[flag] = _knn_brute(queries[flag], points, k)
    return pos, dist


@dataclass(frozen=True, eq=False)
class MatchIndex:
    """Group-partitioned covariates with maps back to unit indices."""

    dataset: Dataset
    members: tuple  # members[w]: unit indices of group w, ascending
    points: tuple  # points[w]: covariates of group w
    sorters: tuple  # 1-D only: argsort of points[w][:, 0]

    def group_size(self, w: int) -> int:
        return len(self.members[w])

    def knn(self, queries, group: int, k: int):
        """Unit indices and squared distances of the ``k`` nearest group members.

        Rows are ordered by increasing distance, ties by ascending unit index.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=float))
        size = self.group_size(group)
        if not 1 <= k <= size:
            raise InfeasibleMError(f"M={k} exceeds group {group} size {size}")
        pts = self.points[group]
        if pts.shape[1] == 1 and size > 2 * k:
            sorter = self.sorters[group]
            pos, dist = _knn_sorted_1d(queries, pts, k, sorter, pts[sorter, 0])
        else:
            pos, dist = _knn_brute(queries, pts, k)
        return self.members[group][pos], dist

    def neighbor_table(self, k: int):
        """For every unit, its ``k`` nearest opposite-group units (indices, squared distances)."""
        ds = self.dataset
        nbr = np.empty((ds.n, k), dtype=np.intp)
        dist = np.empty((ds.n, k))
        for w in (0, 1):
            rows = self.members[w]
            nbr[rows], dist[rows] = self.knn(ds.x[rows], 1 - w, k)
        return nbr, dist


def build_index(dataset: Dataset) -> MatchIndex:
    members = tuple(dataset.group(w) for w in (0, 1))
    points = tuple(np.ascontiguousarray(dataset.x[m]) for m in members)
    sorters = tuple(np.argsort(p[:, 0], kind="stable") if dataset.d == 1 else None for p in points)
    for arr in (*points, *[s for s in sorters if s is not None]):
        arr.setflags(write=False)
    return MatchIndex(dataset, members, points, sorters)


@dataclass(frozen=True, eq=False)
class MatchedSets:
    """Matched sets ``sets[i]`` (ordered by distance) and matched-times counts."""

    m: int
    sets: np.ndarray  # (n, m) unit indices
    sq_dists: np.ndarray  # (n, m)
    k_counts: np.ndarray  # (n,)
    tied_sets: list | None = None  # over-complete candidate sets, bootstrap only

    def to_json(self) -> str:
        return json.dumps(
            {
                "m": self.m,
                "units": [
                    {"unit": i + 1, "matches": (self.sets[i] + 1).tolist(), "k": int(self.k_counts[i])}
                    for i in range(len(self.sets))
                ],
            }
        )


def match_counts(sets: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(sets.ravel(), minlength=n).astype(np.int64)


def match_sets(index: MatchIndex, m: int) -> MatchedSets:
    ds = index.dataset
    if m > min(ds.n0, ds.n1):
        raise InfeasibleMError(f"M={m} exceeds the smaller group size {min(ds.n0, ds.n1)}")
    nbr, dist = index.neighbor_table(m)
    return MatchedSets(m, nbr, dist, match_counts(nbr, ds.n))


def _mth_sq(index, z, group, m):
    size = index.group_size(group)
    if not 1 <= m <= size:
        raise InfeasibleMError(f"M={m} exceeds group {group} size {size}")
    D = sqdist(np.atleast_2d(z), index.points[group])[0]
    return np.partition(D, m - 1)[m - 1]


def mth_nn_distance(index: MatchIndex, query, group: int, m: int) -> float:
    """Distance from ``query`` to its m-th nearest member of ``group``."""
    return float(np.sqrt(_mth_sq(index, np.asarray(query, dtype=float), group, m)))


def catchment_contains(index: MatchIndex, x, z, group: int, m: int, boundary: str = "closed") -> bool:
    """Whether ``z`` lies in the catchment area of ``x`` relative to ``group``'s sample."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    r2 = _mth_sq(index, z, group, m)
    d2 = sqdist(x, z)[0, 0]
    if boundary == "closed":
        return bool(d2 <= r2)
    if boundary == "open":
        return bool(d2 < r2)
    raise ValueError(f"unknown boundary {boundary!r}")


def weighted_mth_sqdist(points: np.ndarray, weights, queries: np.ndarray, m: int) -> np.ndarray:
    """Squared m-th NN distance of each query within a weighted multiset of points.

    ``weights[k]`` copies of ``points[k]`` are present. The returned value ``t``
    is the smallest point distance with at least ``m`` copies at distance <= t
    and fewer than ``m`` copies strictly closer.
    """
    points = np.atleast_2d(points)
    queries = np.atleast_2d(queries)
    if weights is None:
        weights = np.ones(len(points), dtype=np.int64)
    weights = np.asarray(weights)
    keep = weights > 0
    sup, w = points[keep], weights[keep]
    if m < 1 or w.sum() < m:
        raise InfeasibleMError(f"M={m} exceeds the total weight {int(w.sum())}")
    k = min(m, len(sup))
    out = np.empty(len(queries))
    for sl in _chunks(len(queries), len(sup)):
        D = sqdist(queries[sl], sup)
        if k < len(sup):
            part = np.argpartition(D, k - 1, axis=1)[:, :k]
        else:
            part = np.broadcast_to(np.arange(len(sup)), D.shape)
        pd_ = np.take_along_axis(D, part, axis=1)
        order = np.argsort(pd_, axis=1, kind="stable")
        pd_ = np.take_along_axis(pd_, order, axis=1)
        cw = np.cumsum(w[np.take_along_axis(part, order, axis=1)], axis=1)
        out[sl] = pd_[np.arange(len(pd_)), np.argmax(cw >= m, axis=1)]
    return out


def catchment_counts(eval_points: np.ndarray, centers: np.ndarray, center_sqr: np.ndarray,
                     center_weights=None, strict: bool = False) -> np.ndarray:
    """``sum_j w_j 1(|x - c_j|^2 <= center_sqr[j])`` for each evaluation point ``x``.

    With ``strict`` the comparison is ``<``.
    """
    eval_points = np.atleast_2d(eval_points)
    centers = np.atleast_2d(centers)
    if center_weights is None:
        center_weights = np.ones(len(centers))
    center_weights = np.asarray(center_weights, dtype=float)
    keep = center_weights > 0
    centers, center_sqr, center_weights = centers[keep], center_sqr[keep], center_weights[keep]
    out = np.empty(len(eval_points))
    for sl in _chunks(len(eval_points), len(centers)):
        D = sqdist(eval_points[sl], centers)
        inside = D < center_sqr[None, :] if strict else D <= center_sqr[None, :]
        out[sl] = inside @ center_weights
    return out
