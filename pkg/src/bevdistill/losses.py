"""Training losses and query-to-GT assignment.

* detection: sigmoid focal classification over all queries, L1 on the 11-D
  anchor of matched queries, a centerness quality term (target
  ``exp(-|center error|)``) and a yawness term (target: predicted and true yaw
  vectors point the same way), summed over decoder layers;
* depth: per-pixel binary cross-entropy between the predicted bin distribution
  and the one-hot LiDAR bin, plus a down-weighted L1 on an auxiliary scalar depth;
* distillation: ``1 - cos`` between the projected BEV feature and the
  pseudo-label, averaged over the valid cells only.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from . import numerics as nx
from .decoder import ANCHOR_DIM, COS, SIN, LayerOutput
from .geometry import CameraModel, project_points
from .lifting import DepthBins
from .numerics import Tensor


@dataclass
class LossWeights:
    det: float = 1.0
    distill: float = 7.0
    depth: float = 1.0

    def __post_init__(self):
        if min(self.det, self.distill, self.depth) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class DetLossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    cls_weight: float = 2.0
    box_weight: float = 0.25
    centerness_weight: float = 1.0
    yawness_weight: float = 1.0
    box_dim_weights: np.ndarray = field(default_factory=lambda: np.array([1, 1, 1, 1, 1, 1, 1, 1, 0.2, 0.2, 0.2], dtype=np.float64))
    deep_supervision: bool = True


# ---------------------------------------------------------------------------
# assignment


def focal_cost(cls_logits: np.ndarray, gt_classes: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """``Q×G`` classification cost: focal positive cost minus focal negative cost at the GT class."""
    p = nx._stable_sigmoid(cls_logits)[:, gt_classes]
    eps = 1e-12
    pos = alpha * (1 - p) ** gamma * -np.log(p + eps)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p + eps)
    return pos - neg


def box_cost(pred: np.ndarray, gt: np.ndarray, dim_weights: np.ndarray | None = None) -> np.ndarray:
    w = np.ones(ANCHOR_DIM) if dim_weights is None else dim_weights
    return np.sum(np.abs(pred[:, None, :] - gt[None, :, :]) * w, axis=2)


def assignment_cost(cls_logits, pred_anchors, gt_anchors, gt_classes, cfg: DetLossConfig | None = None) -> np.ndarray:
    cfg = cfg or DetLossConfig()
    return cfg.cls_weight * focal_cost(cls_logits, gt_classes, cfg.alpha, cfg.gamma) + cfg.box_weight * box_cost(
        pred_anchors, gt_anchors, cfg.box_dim_weights
    )


def hungarian(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost one-to-one matching of rows to columns (``min(R, C)`` pairs)."""
    if cost.size == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    if not np.all(np.isfinite(cost)):
        raise FloatingPointError("assignment cost contains non-finite entries")
    r, c = linear_sum_assignment(cost)
    return r.astype(np.int64), c.astype(np.int64)


def assign(cls_logits, pred_anchors, gt_anchors, gt_classes, cfg: DetLossConfig | None = None):
    """(query indices, gt indices) of the Hungarian matching; unmatched queries are negatives."""
    gt_anchors = np.asarray(gt_anchors, dtype=np.float64).reshape(-1, ANCHOR_DIM)
    if len(gt_anchors) == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    cost = assignment_cost(np.asarray(cls_logits), np.asarray(pred_anchors), gt_anchors, np.asarray(gt_classes, dtype=np.int64), cfg)
    return hungarian(cost)


# ---------------------------------------------------------------------------
# elementary losses


def _power(x: Tensor, gamma: float) -> Tensor:
    if gamma == 2:
        return nx.square(x)
    if gamma == 1:
        return x
    return nx.exp(nx.log(nx.maximum(x, 1e-300)) * gamma)


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise-summed sigmoid focal loss for binary ``targets`` of the logits' shape."""
    t = np.asarray(targets, dtype=np.float64)
    p = nx.sigmoid(logits)
    log_p = nx.log_sigmoid(logits)
    log_1mp = nx.log_sigmoid(-logits)
    pos = _power(1 - p, gamma)
    neg = _power(p, gamma)
    loss = -(alpha * t) * pos * log_p - ((1 - alpha) * (1 - t)) * neg * log_1mp
    return nx.tsum(loss)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    t = np.asarray(targets, dtype=np.float64)
    return nx.tsum(-(nx.log_sigmoid(logits) * t) - nx.log_sigmoid(-logits) * (1 - t))


def quality_focal_loss(logits: Tensor, targets: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Focal form for soft targets: ``|t - p|^gamma · BCE(p, t)``."""
    t = np.asarray(targets, dtype=np.float64)
    p = nx.sigmoid(logits)
    bce = -(nx.log_sigmoid(logits) * t) - nx.log_sigmoid(-logits) * (1 - t)
    mod = _power(nx.absolute(p - t), gamma)
    return nx.tsum(mod * bce)


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetTargets:
    query_idx: np.ndarray
    gt_idx: np.ndarray
    centerness: np.ndarray  # per matched pair
    yawness: np.ndarray  # per matched pair


def det_targets(layer: LayerOutput, gt_anchors: np.ndarray, gt_classes: np.ndarray, cfg: DetLossConfig | None = None) -> DetTargets:
    """Matching and quality targets for one layer, computed from current predictions (held fixed)."""
    cfg = cfg or DetLossConfig()
    qi, gi = assign(layer.cls_logits.data, layer.anchors.data, gt_anchors, gt_classes, cfg)
    pred = layer.anchors.data[qi]
    gt = np.asarray(gt_anchors, dtype=np.float64).reshape(-1, ANCHOR_DIM)[gi]
    center = np.exp(-np.linalg.norm(pred[:, :3] - gt[:, :3], axis=1))
    yaw = (np.sum(pred[:, [SIN, COS]] * gt[:, [SIN, COS]], axis=1) > 0).astype(np.float64)
    return DetTargets(qi, gi, center, yaw)


def det_loss_layer(
    layer: LayerOutput,
    gt_anchors: np.ndarray,
    gt_classes: np.ndarray,
    cfg: DetLossConfig | None = None,
    targets: DetTargets | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Detection loss of one decoder layer.

    The matching and quality targets are functions of the predictions that
    carry no gradient; pass ``targets`` to hold them at given values.
    """
    cfg = cfg or DetLossConfig()
    gt_anchors = np.asarray(gt_anchors, dtype=np.float64).reshape(-1, ANCHOR_DIM)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if targets is None:
        targets = det_targets(layer, gt_anchors, gt_classes, cfg)
    n_gt = max(len(gt_anchors), 1)
    onehot = np.zeros(layer.cls_logits.shape)
    onehot[targets.query_idx, gt_classes[targets.gt_idx]] = 1.0
    cls = sigmoid_focal_loss(layer.cls_logits, onehot, cfg.alpha, cfg.gamma) * (cfg.cls_weight / n_gt)
    parts = {"cls": cls.item()}
    total = cls
    if len(targets.query_idx):
        pred = nx.take_rows(layer.anchors, targets.query_idx)
        box = nx.tsum(nx.absolute(pred - gt_anchors[targets.gt_idx]) * cfg.box_dim_weights) * (cfg.box_weight / n_gt)
        q = nx.take_rows(layer.quality, targets.query_idx)
        cen = quality_focal_loss(q[:, 0], targets.centerness) * (cfg.centerness_weight / n_gt)
        yaw = bce_with_logits(q[:, 1], targets.yawness) * (cfg.yawness_weight / n_gt)
        total = total + box + cen + yaw
        parts.update(box=box.item(), centerness=cen.item(), yawness=yaw.item())
    else:
        parts.update(box=0.0, centerness=0.0, yawness=0.0)
    return total, parts


def det_loss(
    layers: Sequence[LayerOutput],
    gt_anchors: np.ndarray,
    gt_classes: np.ndarray,
    cfg: DetLossConfig | None = None,
    targets: Sequence[DetTargets] | None = None,
) -> tuple[Tensor, dict[str, float]]:
    """Detection loss summed over layers (only the last one without deep supervision)."""
    cfg = cfg or DetLossConfig()
    use = list(range(len(layers))) if cfg.deep_supervision else [len(layers) - 1]
    total = None
    parts: dict[str, float] = {}
    for n, li in enumerate(use):
        t = None if targets is None else targets[n]
        loss, p = det_loss_layer(layers[li], gt_anchors, gt_classes, cfg, t)
        total = loss if total is None else total + loss
        for k, v in p.items():
            parts[k] = parts.get(k, 0.0) + v
    return total, parts


# ---------------------------------------------------------------------------
# depth


@dataclass
class DepthTarget:
    pixel: np.ndarray  # flat pixel index at the lifting resolution
    bin: np.ndarray  # one-hot bin index
    depth: np.ndarray  # metres


def depth_targets(lidar: np.ndarray, cam: CameraModel, bins: DepthBins) -> DepthTarget:
    """Nearest LiDAR depth per feature pixel (``cam`` at the lifting resolution).

    Points project to the pixel whose centre is nearest; pixels with no point,
    or whose depth lies outside the bin range, are left out.
    """
    uv, depth, ok = project_points(lidar, cam)
    u = np.rint(uv[:, 0]).astype(np.int64)
    v = np.rint(uv[:, 1]).astype(np.int64)
    idx = np.where(ok, v * cam.width + u, -1)
    nearest = kernels.scatter_min(idx, np.ascontiguousarray(depth), cam.width * cam.height)
    pix = np.flatnonzero(np.isfinite(nearest))
    d = nearest[pix]
    b = bins.index(d)
    keep = b >= 0
    return DepthTarget(pix[keep], b[keep], d[keep])


def depth_loss(
    probs: Sequence[Tensor],
    aux: Sequence[Tensor],
    targets: Sequence[DepthTarget],
    aux_weight: float = 0.1,
    eps: float = 1e-6,
) -> tuple[Tensor, dict[str, float]]:
    """Mean over supervised pixels of the bin BCE, plus ``aux_weight`` × mean L1 of the aux depth."""
    n = sum(len(t.pixel) for t in targets)
    if n == 0:
        return Tensor(0.0), {"depth_bce": 0.0, "depth_l1": 0.0, "depth_pixels": 0}
    bce_total = None
    l1_total = None
    for p, a, t in zip(probs, aux, targets):
        if len(t.pixel) == 0:
            continue
        rows = nx.clip(nx.take_rows(p, t.pixel), eps, 1 - eps)
        onehot = np.zeros(rows.shape)
        onehot[np.arange(len(t.pixel)), t.bin] = 1.0
        bce = nx.tsum(-(nx.log(rows) * onehot) - nx.log(1 - rows) * (1 - onehot))
        l1 = nx.tsum(nx.absolute(nx.take_rows(a, t.pixel) - t.depth))
        bce_total = bce if bce_total is None else bce_total + bce
        l1_total = l1 if l1_total is None else l1_total + l1
    bce_mean = bce_total * (1.0 / n)
    l1_mean = l1_total * (1.0 / n)
    return bce_mean + l1_mean * aux_weight, {"depth_bce": bce_mean.item(), "depth_l1": l1_mean.item(), "depth_pixels": n}


# ---------------------------------------------------------------------------
# distillation


def distill_loss(pred: Tensor, pseudo: np.ndarray, valid: np.ndarray, eps: float = 1e-12) -> tuple[Tensor, dict[str, float]]:
    """``mean over valid cells of 1 - cos(pred, pseudo)``; only valid cells enter the graph.

    An empty mask gives a zero loss and ``empty_mask = 1`` in the breakdown.
    """
    res_a, res_b, c = pred.shape
    cells = np.flatnonzero(np.asarray(valid).reshape(-1))
    if len(cells) == 0:
        warnings.warn("distillation mask is empty; loss set to 0", RuntimeWarning, stacklevel=2)
        return Tensor(0.0), {"distill": 0.0, "empty_mask": 1, "valid_cells": 0}
    rows = nx.take_rows(nx.reshape(pred, (res_a * res_b, c)), cells)
    target = np.asarray(pseudo, dtype=np.float64).reshape(-1, c)[cells]
    tn = target / np.maximum(np.linalg.norm(target, axis=1, keepdims=True), eps)
    cos = nx.tsum(nx.l2_normalize(rows, axis=1, eps=eps) * tn, axis=1)
    # rounding can push |cos| a few ulp past 1; both ends are stationary points of 1 - cos
    cos = nx.clip(cos, -1.0, 1.0)
    loss = nx.mean(1.0 - cos)
    return loss, {"distill": loss.item(), "empty_mask": 0, "valid_cells": len(cells)}


# ---------------------------------------------------------------------------
# total


def total_loss(weights: LossWeights, det: Tensor | None, distill: Tensor | None, depth: Tensor | None) -> tuple[Tensor, dict[str, float]]:
    """``w_det·det + w_distill·distill + w_depth·depth``; a missing component counts as 0."""
    total = Tensor(0.0)
    parts = {}
    for name, w, comp in (("det", weights.det, det), ("distill", weights.distill, distill), ("depth", weights.depth, depth)):
        value = 0.0 if comp is None else comp.item()
        parts[name] = value
        if comp is not None and w != 0:
            total = total + comp * w
    parts["total"] = total.item()
    return total, parts
