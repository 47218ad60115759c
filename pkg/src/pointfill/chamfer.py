"""Symmetric Chamfer distance between a reconstruction and a target cloud.

``l2sq`` averages squared nearest-neighbour distances in both directions;
``l1`` averages plain Euclidean distances instead.  Nearest neighbours come
from either the kd-tree or an O(N*M) scan; both use the same distance
arithmetic and tie-break, so their results agree exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .geometry import KdTree, as_points, brute_knn, sqdist

VARIANTS = ("l2sq", "l1")
REPORT_SCALE = 1000.0


@dataclass
class ChamferResult:
    loss: float
    nearest_forward: np.ndarray   # for each reconstructed point, index into the target
    nearest_backward: np.ndarray  # for each target point, index into the reconstruction
    variant: str = "l2sq"

    def __str__(self):
        return f"chamfer[{self.variant}] = {self.loss * REPORT_SCALE:.4f} (x1e-3)"


def _check_variant(variant):
    if variant not in VARIANTS:
        raise ContractError(f"unknown Chamfer variant {variant!r}; expected one of {VARIANTS}")


def nearest(queries, points, method="auto"):
    if method == "auto":
        method = "brute" if len(queries) * len(points) <= 262144 else "kdtree"
    if method == "brute":
        idx, _ = brute_knn(queries, points, 1)
    elif method == "kdtree":
        idx, _ = KdTree(points).query(queries, 1)
    else:
        raise ContractError(f"unknown nearest-neighbour method {method!r}")
    return idx[:, 0]


def _dist(a, b, variant):
    d2 = sqdist(a, b)
    return d2 if variant == "l2sq" else np.sqrt(d2)


def chamfer(p_recon, p_gt, variant="l2sq", method="auto") -> ChamferResult:
    _check_variant(variant)
    recon, gt = as_points(p_recon), as_points(p_gt)
    fwd = nearest(recon, gt, method)
    bwd = nearest(gt, recon, method)
    loss = _dist(recon, gt[fwd], variant).mean() + _dist(gt, recon[bwd], variant).mean()
    return ChamferResult(float(loss), fwd, bwd, variant)


def chamfer_backward(result: ChamferResult, p_recon, p_gt, variant=None):
    """Gradient of the loss w.r.t. the reconstructed points, nearest pairs held fixed."""
    variant = variant or result.variant
    _check_variant(variant)
    recon, gt = as_points(p_recon), as_points(p_gt)
    fwd_diff = recon - gt[result.nearest_forward]
    bwd_diff = recon[result.nearest_backward] - gt
    if variant == "l1":
        fwd_diff = _unit(fwd_diff)
        bwd_diff = _unit(bwd_diff)
    scale = 2.0 if variant == "l2sq" else 1.0
    grad = scale * fwd_diff / len(recon)
    np.add.at(grad, result.nearest_backward, scale * bwd_diff / len(gt))
    return grad


def _unit(v):
    n = np.sqrt(sqdist(v, 0.0))[:, None]
    return np.divide(v, n, out=np.zeros_like(v), where=n > 0)


def chamfer_loss(pred: T.Tensor, targets, variant="l2sq", method="auto") -> T.Tensor:
    """Batch mean of per-sample Chamfer losses as a tape operation.

    ``pred`` has shape (B, N, 3); ``targets`` is a sequence of (K_b, 3)
    arrays (treated as constants).
    """
    _check_variant(variant)
    if pred.ndim != 3 or pred.shape[-1] != 3 or len(targets) != pred.shape[0]:
        raise ContractError(f"prediction {pred.shape} does not fit {len(targets)} targets")
    results, grads = [], []
    for b, gt in enumerate(targets):
        recon = pred.data[b].astype(np.float64)
        res = chamfer(recon, gt, variant, method)
        results.append(res.loss)
        grads.append(chamfer_backward(res, recon, gt, variant))
    batch = len(targets)
    grad = np.stack(grads) / batch
    loss = np.asarray(np.mean(results), dtype=pred.dtype)

    def backward(g):
        return ((g * grad).astype(pred.dtype),)

    return T.custom_op(loss, (pred,), backward, f"chamfer_{variant}")
