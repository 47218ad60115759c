"""Point-cloud preprocessing: unit-sphere normalization, farthest point
sampling, KNN grouping, and an exact kd-tree.

Ties are broken by the lower point index everywhere, so every routine here
is reproducible against a brute-force scan.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ContractError(f"expected an (N, 3) point array, got shape {pts.shape}")
    if len(pts) == 0:
        raise ContractError("empty cloud")
    if not np.all(np.isfinite(pts)):
        raise ContractError("cloud has non-finite coordinates")
    return pts


def sqdist(a, b):
    """Squared Euclidean distance with a fixed summation order (x, then y, then z).

    Both the kd-tree and the brute-force paths use this, which is what makes
    their results bitwise comparable.
    """
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def normalize_unit_sphere(points):
    """Center on the centroid and scale so the farthest point has norm 1.

    Returns ``(normalized, centroid, scale)``; the original cloud is
    ``normalized * scale + centroid``.  A cloud whose points all coincide
    maps to the origin with ``scale = 1``.
    """
    pts = as_points(points)
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    scale = float(np.sqrt(sqdist(centered, 0.0).max()))
    if scale == 0.0:
        scale = 1.0
    return centered / scale, centroid, scale


def fps(points, g, start_index=0, rng=None, return_distances=False):
    """Greedy farthest point sampling.

    The first pick is ``start_index`` (or a random index drawn from ``rng``
    when ``start_index`` is None).  Each later pick maximizes the distance to
    the already-chosen set.  With ``return_distances`` the squared selection
    distance of every pick is returned as well (0 for the first).
    """
    pts = as_points(points)
    n = len(pts)
    if not 1 <= g <= n:
        raise ContractError(f"cannot sample {g} centers from {n} points")
    if start_index is None:
        if rng is None:
            raise ContractError("random FPS start needs an rng")
        start_index = int(rng.integers(n))
    if not 0 <= start_index < n:
        raise ContractError(f"start index {start_index} out of range for {n} points")
    chosen = np.empty(g, dtype=np.int64)
    picked = np.zeros(g)
    chosen[0] = start_index
    mind = sqdist(pts, pts[start_index])
    mind[start_index] = -1.0
    for i in range(1, g):
        j = int(np.argmax(mind))
        chosen[i] = j
        picked[i] = mind[j]
        mind = np.minimum(mind, sqdist(pts, pts[j]))
        mind[chosen[: i + 1]] = -1.0
    return (chosen, picked) if return_distances else chosen


class KdTree:
    """Static kd-tree: median split on the widest-spread axis, small leaves.

    Queries are exact and vectorized over query batches.
    """

    def __init__(self, points, leaf_size=32):
        self.points = as_points(points)
        self.leaf_size = leaf_size
        self.axis, self.split, self.left, self.right, self.leaves = [], [], [], [], []
        self.root = self._build(np.arange(len(self.points)))

    def __len__(self):
        return len(self.points)

    def _new_node(self):
        self.axis.append(-1)
        self.split.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.leaves.append(None)
        return len(self.axis) - 1

    def _build(self, idx):
        node = self._new_node()
        if len(idx) <= self.leaf_size:
            self.leaves[node] = np.sort(idx)
            return node
        sub = self.points[idx]
        axis = int(np.argmax(sub.max(axis=0) - sub.min(axis=0)))
        order = np.argsort(sub[:, axis], kind="stable")
        mid = len(idx) // 2
        self.axis[node] = axis
        self.split[node] = float(sub[order[mid], axis])
        left = self._build(idx[order[:mid]])
        right = self._build(idx[order[mid:]])
        self.left[node], self.right[node] = left, right
        return node

    def depth(self, node=None):
        node = self.root if node is None else node
        if self.leaves[node] is not None:
            return 1
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def query(self, queries, k=1):
        """Return ``(indices, sqdists)`` of shape (Q, k), nearest first."""
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if not 1 <= k <= len(self.points):
            raise ContractError(f"k={k} outside 1..{len(self.points)}")
        best_d = np.full((len(q), k), np.inf)
        best_i = np.full((len(q), k), len(self.points), dtype=np.int64)
        self._visit(self.root, np.arange(len(q)), q, best_d, best_i)
        return best_i, best_d

    def _visit(self, node, sel, q, best_d, best_i):
        leaf = self.leaves[node]
        if leaf is not None:
            self._scan_leaf(leaf, sel, q, best_d, best_i)
            return
        axis, split = self.axis[node], self.split[node]
        go_left = q[sel, axis] < split
        near = [(self.left[node], self.right[node], sel[go_left]),
                (self.right[node], self.left[node], sel[~go_left])]
        for near_child, _, sub in near:
            if len(sub):
                self._visit(near_child, sub, q, best_d, best_i)
        for _, far_child, sub in near:
            if len(sub):
                gap = q[sub, axis] - split
                # '<=' keeps equal-distance candidates reachable for the index tie-break
                need = sub[gap * gap <= best_d[sub, -1]]
                if len(need):
                    self._visit(far_child, need, q, best_d, best_i)

    def _scan_leaf(self, leaf, sel, q, best_d, best_i):
        d = sqdist(q[sel][:, None, :], self.points[leaf][None, :, :])
        k = best_d.shape[1]
        if k == 1:
            j = np.argmin(d, axis=1)
            cand_d = d[np.arange(len(sel)), j]
            cand_i = leaf[j]
            cur_d, cur_i = best_d[sel, 0], best_i[sel, 0]
            better = (cand_d < cur_d) | ((cand_d == cur_d) & (cand_i < cur_i))
            upd = sel[better]
            best_d[upd, 0] = cand_d[better]
            best_i[upd, 0] = cand_i[better]
            return
        all_d = np.concatenate([best_d[sel], d], axis=1)
        all_i = np.concatenate([best_i[sel], np.broadcast_to(leaf, d.shape)], axis=1)
        order = np.lexsort((all_i, all_d), axis=-1)[:, :k]
        best_d[sel] = np.take_along_axis(all_d, order, axis=1)
        best_i[sel] = np.take_along_axis(all_i, order, axis=1)


def kd_nearest(tree: KdTree, q):
    """Exact nearest neighbour of a single query point: ``(index, sqdist)``."""
    idx, d = tree.query(np.asarray(q, dtype=np.float64).reshape(1, 3), k=1)
    return int(idx[0, 0]), float(d[0, 0])


def brute_knn(queries, points, k=1, chunk=512):
    """O(Q*N) reference search with the same tie-break as the kd-tree."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    pts = np.asarray(points, dtype=np.float64)
    out_i = np.empty((len(q), k), dtype=np.int64)
    out_d = np.empty((len(q), k))
    for s in range(0, len(q), chunk):
        d = sqdist(q[s:s + chunk, None, :], pts[None, :, :])
        # argmin returns the first minimum, the same tie-break as a stable sort
        order = np.argmin(d, axis=1)[:, None] if k == 1 else np.argsort(d, axis=1, kind="stable")[:, :k]
        out_i[s:s + chunk] = order
        out_d[s:s + chunk] = np.take_along_axis(d, order, axis=1)
    return out_i, out_d


@dataclass
class GroupedPointCloud:
    """FPS centers with their M nearest neighbours stored center-relative."""

    centers: np.ndarray          # (G, 3)
    groups: np.ndarray           # (G, M, 3), relative to centers
    center_indices: np.ndarray   # (G,)
    neighbor_indices: np.ndarray  # (G, M), nearest first

    @property
    def num_groups(self):
        return self.groups.shape[0]

    @property
    def group_size(self):
        return self.groups.shape[1]

    def absolute(self):
        return self.groups + self.centers[:, None, :]


def knn_group(points, centers, m, tree=None, method="kdtree"):
    """Group the ``m`` nearest points around each center index.

    The center itself is its own first neighbour.  Groups may overlap.
    """
    pts = as_points(points)
    centers = np.asarray(centers, dtype=np.int64)
    if not 1 <= m <= len(pts):
        raise ContractError(f"group size {m} outside 1..{len(pts)}")
    cpts = pts[centers]
    if method == "brute":
        nbr, _ = brute_knn(cpts, pts, m)
    else:
        tree = tree if tree is not None else KdTree(pts)
        nbr, _ = tree.query(cpts, m)
    groups = pts[nbr] - cpts[:, None, :]
    return GroupedPointCloud(cpts, groups, centers, nbr)


def tokenize_cloud(points, num_groups, group_size, start_index=0, rng=None):
    """FPS + KNN in one call."""
    pts = as_points(points)
    idx = fps(pts, num_groups, start_index=start_index, rng=rng)
    return knn_group(pts, idx, group_size)
