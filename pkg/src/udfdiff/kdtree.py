"""Exact nearest-neighbor index (median-split k-d tree) and UDF targets."""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .geometry import PointCloud

LEAF_SIZE = 16

# pruning slack: a box is skipped only when its lower bound clearly exceeds the best distance
_PRUNE_REL = 1e-9
_NO_INDEX = np.iinfo(np.int64).max


def pair_sq_dist(dx, dy, dz):
    """Squared distance with a fixed evaluation order, shared by tree and brute force."""
    return dx * dx + dy * dy + dz * dz


def brute_force_nn(queries: np.ndarray, ref: np.ndarray, chunk: int = 2048):
    """Exhaustive nearest-neighbor distance and index for each query."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    r = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    dist = np.empty(len(q))
    idx = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), chunk):
        qs = q[s : s + chunk]
        d2 = pair_sq_dist(
            qs[:, None, 0] - r[None, :, 0],
            qs[:, None, 1] - r[None, :, 1],
            qs[:, None, 2] - r[None, :, 2],
        )
        j = np.argmin(d2, axis=1)
        idx[s : s + chunk] = j
        dist[s : s + chunk] = np.sqrt(d2[np.arange(len(qs)), j])
    return dist, idx


class NnIndex:
    """Immutable k-d tree over a point cloud.

    Nodes split at the median of their widest axis until at most ``leaf_size``
    points remain. Queries run in batches: every query first descends to its
    home leaf for an initial bound, then a breadth-first sweep visits only the
    nodes whose bounding box can still beat that bound.
    """

    def __init__(self, points: np.ndarray, leaf_size: int = LEAF_SIZE):
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise ParameterError("cannot index an empty cloud")
        self.leaf_size = leaf_size
        order = np.arange(len(pts))
        lo, hi, start, end, left, right, dim, val = [], [], [], [], [], [], [], []

        def new_node(s, e):
            sub = pts[order[s:e]]
            lo.append(sub.min(axis=0))
            hi.append(sub.max(axis=0))
            start.append(s)
            end.append(e)
            left.append(-1)
            right.append(-1)
            dim.append(0)
            val.append(0.0)
            return len(start) - 1

        stack = [new_node(0, len(pts))]
        while stack:
            node = stack.pop()
            s, e = start[node], end[node]
            if e - s <= leaf_size:
                continue
            ax = int(np.argmax(hi[node] - lo[node]))
            mid = (e - s) // 2
            seg = order[s:e]
            part = np.argpartition(pts[seg, ax], mid, kind="introselect")
            order[s:e] = seg[part]
            dim[node] = ax
            val[node] = pts[order[s + mid], ax]
            left[node] = new_node(s, s + mid)
            right[node] = new_node(s + mid, e)
            stack.extend((left[node], right[node]))

        def frozen(a, dtype):
            arr = np.asarray(a, dtype=dtype)
            arr.setflags(write=False)
            return arr

        self.points = frozen(pts, np.float64)
        self.order = frozen(order, np.int64)
        self.lo = frozen(lo, np.float64)
        self.hi = frozen(hi, np.float64)
        self.start = frozen(start, np.int64)
        self.end = frozen(end, np.int64)
        self.left = frozen(left, np.int64)
        self.right = frozen(right, np.int64)
        self.dim = frozen(dim, np.int64)
        self.val = frozen(val, np.float64)
        self.is_leaf = frozen(np.asarray(left) < 0, bool)
        # padded leaf membership table for gathered distance evaluation
        leaf_ids = np.flatnonzero(self.is_leaf)
        slots = np.full((len(start), leaf_size), -1, dtype=np.int64)
        for n in leaf_ids:
            members = order[start[n] : end[n]]
            slots[n, : len(members)] = members
        self._slots = frozen(slots, np.int64)

    def __len__(self) -> int:
        return len(self.points)

    def _scan(self, qi, nodes, queries, best_d2, best_idx):
        members = self._slots[nodes]  # (P, leaf_size)
        valid = members >= 0
        ref = self.points[np.where(valid, members, 0)]
        q = queries[qi]
        d2 = pair_sq_dist(
            q[:, None, 0] - ref[:, :, 0],
            q[:, None, 1] - ref[:, :, 1],
            q[:, None, 2] - ref[:, :, 2],
        )
        d2 = np.where(valid, d2, np.inf)
        pair_d2 = d2.min(axis=1)
        pair_idx = np.where(d2 == pair_d2[:, None], members, _NO_INDEX).min(axis=1)
        before = best_d2[qi]
        np.minimum.at(best_d2, qi, pair_d2)
        best_idx[qi[best_d2[qi] < before]] = _NO_INDEX
        # among equal distances keep the smallest reference index, like argmin
        hit = pair_d2 == best_d2[qi]
        np.minimum.at(best_idx, qi[hit], pair_idx[hit])

    def query(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Return (distance, reference index) of the nearest point for every query."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        nq = len(q)
        best_d2 = np.full(nq, np.inf)
        best_idx = np.full(nq, _NO_INDEX, dtype=np.int64)
        if nq == 0:
            return np.sqrt(best_d2), best_idx
        all_q = np.arange(nq)

        # descend to each query's home leaf for an initial bound
        node = np.zeros(nq, dtype=np.int64)
        inner = ~self.is_leaf[node]
        while inner.any():
            n = node[inner]
            go_left = q[all_q[inner], self.dim[n]] < self.val[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])
            inner = ~self.is_leaf[node]
        home = node.copy()
        self._scan(all_q, home, q, best_d2, best_idx)

        qi = all_q
        nodes = np.zeros(nq, dtype=np.int64)
        while len(qi):
            gap = np.maximum(self.lo[nodes] - q[qi], 0.0) + np.maximum(q[qi] - self.hi[nodes], 0.0)
            lb = pair_sq_dist(gap[:, 0], gap[:, 1], gap[:, 2])
            keep = lb <= best_d2[qi] * (1.0 + _PRUNE_REL)
            qi, nodes = qi[keep], nodes[keep]
            leaf = self.is_leaf[nodes]
            scan = leaf & (nodes != home[qi])
            if scan.any():
                self._scan(qi[scan], nodes[scan], q, best_d2, best_idx)
            inner = ~leaf
            qi = np.concatenate([qi[inner], qi[inner]])
            nodes = np.concatenate([self.left[nodes[inner]], self.right[nodes[inner]]])
        return np.sqrt(best_d2), best_idx


def build_index(cloud: PointCloud | np.ndarray, leaf_size: int = LEAF_SIZE) -> NnIndex:
    pts = cloud.points if isinstance(cloud, PointCloud) else cloud
    return NnIndex(pts, leaf_size)


def udf_targets(queries: PointCloud | np.ndarray, index: NnIndex, clamp: float = 0.5) -> np.ndarray:
    """Clamped unsigned distance from each query to the indexed cloud."""
    if not clamp > 0:
        raise ParameterError("clamp must be > 0")
    pts = queries.points if isinstance(queries, PointCloud) else queries
    dist, _ = index.query(pts)
    return np.minimum(dist, clamp)
