"""Bipartite matching and the hierarchical training loss.

Each decoder layer's predictions are matched independently against the
ground truth of its stream; the total is the weighted sum of classification
and mask losses over both streams and all supervised layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import LossWeights
from .errors import CapacityError, NumericError, ShapeError, UsageError
from .model import ModelOutputs, SegmentPrediction
from .tensor import (
    Tensor,
    add,
    bce_with_logits_mean,
    div,
    log,
    mul,
    nll_from_logits,
    reshape,
    sigmoid,
    take_rows,
    tmean,
    tsum,
)

NO_OBJECT_WEIGHT = 0.1


@dataclass
class StreamTargets:
    """Ground-truth segments of one stream at the loss resolution."""

    classes: np.ndarray          # (G,) int class ids, < K for the stream
    masks: np.ndarray            # (G, h, w) float 0/1

    @property
    def count(self) -> int:
        return len(self.classes)


@dataclass
class GroundTruthSegments:
    """Per-stream targets derived from a sample.

    Masks come from id maps, so they are pairwise disjoint at the source
    resolution; max-pooling to the loss stride may introduce boundary-cell
    overlap, which the mask losses tolerate.
    """

    plant: StreamTargets
    leaf: StreamTargets


@dataclass
class LossBreakdown:
    total: Tensor
    l_cls_plant: float
    l_mask_plant: float
    l_cls_leaf: float
    l_mask_leaf: float
    per_layer: list[dict] = field(default_factory=list)

    @property
    def total_value(self) -> float:
        return self.total.item()


def downsample_mask(mask: np.ndarray, stride: int) -> np.ndarray:
    """Max-pool a binary mask by ``stride`` (any hit in a block keeps it)."""
    if stride == 1:
        return mask.astype(bool)
    h, w = mask.shape
    if h % stride or w % stride:
        raise ShapeError(f"mask size {h}x{w} not divisible by stride {stride}")
    return mask.reshape(h // stride, stride, w // stride, stride).any(axis=(1, 3))


def ground_truth_segments(sample, mask_stride: int) -> GroundTruthSegments:
    """Derive plant and leaf stream targets from a HierarchicalSample.

    Plant stream: one segment per plant instance (crop class 1, weed class 2,
    partial labels fold into their class), plus merged stuff segments for
    weed pixels without instances handled per-instance anyway, and soil
    (class 0). Leaf stream: one segment (class 0) per leaf instance.
    """
    sem = sample.semantics
    plant_classes: list[int] = []
    plant_masks: list[np.ndarray] = []
    for pid in np.unique(sample.plant_instances):
        if pid == 0:
            continue
        m = sample.plant_instances == pid
        labels = sem[m]
        crop_pixels = np.isin(labels, (1, 3)).sum()
        cls = 1 if crop_pixels * 2 >= labels.size else 2
        plant_classes.append(cls)
        plant_masks.append(downsample_mask(m, mask_stride))
    soil = sem == 0
    if soil.any():
        plant_classes.append(0)
        plant_masks.append(downsample_mask(soil, mask_stride))

    leaf_classes: list[int] = []
    leaf_masks: list[np.ndarray] = []
    for lid in np.unique(sample.leaf_instances):
        if lid == 0:
            continue
        leaf_classes.append(0)
        leaf_masks.append(downsample_mask(sample.leaf_instances == lid, mask_stride))

    def pack(classes, masks, h, w):
        if not classes:
            return StreamTargets(np.zeros(0, dtype=np.intp), np.zeros((0, h, w), dtype=np.float32))
        return StreamTargets(np.asarray(classes, dtype=np.intp),
                             np.stack(masks).astype(np.float32))

    h, w = sem.shape[0] // mask_stride, sem.shape[1] // mask_stride
    return GroundTruthSegments(
        plant=pack(plant_classes, plant_masks, h, w),
        leaf=pack(leaf_classes, leaf_masks, h, w),
    )


# -- elementary losses ---------------------------------------------------------


def bce_mask_loss(pred_logits, target) -> Tensor:
    """Mean binary cross entropy of sigmoid(pred_logits) against a 0/1 target."""
    logits = pred_logits if isinstance(pred_logits, Tensor) else Tensor(pred_logits)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_mask_loss: {logits.shape} vs {t.shape}")
    return bce_with_logits_mean(logits, t.astype(logits.dtype))


def dice_loss(pred_probs, target) -> Tensor:
    """1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1)."""
    p = pred_probs if isinstance(pred_probs, Tensor) else Tensor(pred_probs)
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != p.shape:
        raise ShapeError(f"dice_loss: {p.shape} vs {t.shape}")
    if p.data.min() < -1e-6 or p.data.max() > 1 + 1e-6:
        raise UsageError("dice_loss expects probabilities in [0, 1]")
    t = t.astype(p.dtype)
    inter = tsum(mul(p, t))
    denom = add(tsum(p), float(t.sum()) + 1.0)
    return add(1.0, mul(div(add(mul(inter, 2.0), 1.0), denom), -1.0))


def class_loss(class_probs, assigned_classes, no_object_weight: float = NO_OBJECT_WEIGHT) -> Tensor:
    """Mean over queries of -w * log p(target); no-object targets weighted 0.1."""
    p = class_probs if isinstance(class_probs, Tensor) else Tensor(class_probs)
    idx = np.asarray(assigned_classes, dtype=np.intp)
    n, kp1 = p.shape
    if idx.shape != (n,):
        raise ShapeError("class_loss: one target class per query required")
    if n and (idx.min() < 0 or idx.max() >= kp1):
        raise UsageError("class_loss: target class out of range")
    weights = np.ones(kp1, dtype=p.dtype)
    weights[kp1 - 1] = no_object_weight
    pick = np.zeros((n, kp1), dtype=p.dtype)
    pick[np.arange(n), idx] = weights[idx]
    return mul(tsum(mul(log(p), pick)), -1.0 / max(n, 1))


# -- matching -------------------------------------------------------------------


def match_cost_matrix(pred: SegmentPrediction, gt: StreamTargets, w: LossWeights) -> np.ndarray:
    """Dense (N, G) matching cost; gradients never flow through it.

    cost[i, j] = lambda_cls * (-p_i(c_j))
               + lambda_mask * (bce(m_i, t_j) + dice(sigmoid(m_i), t_j))
    """
    n = pred.num_queries
    g = gt.count
    if g > n:
        raise CapacityError(f"{g} ground-truth segments exceed {n} queries")
    probs = pred.class_probs.data
    x = pred.mask_logits.data.reshape(n, -1).astype(np.float64)
    t = gt.masks.reshape(g, -1).astype(np.float64)
    hw = x.shape[1]
    cls_cost = -probs[:, gt.classes].astype(np.float64)
    base = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).mean(axis=1)
    bce = base[:, None] - (x @ t.T) / hw
    s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                 np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    inter = s @ t.T
    dice = 1.0 - (2.0 * inter + 1.0) / (s.sum(axis=1)[:, None] + t.sum(axis=1)[None, :] + 1.0)
    return w.lambda_cls * cls_cost + w.lambda_mask * (bce + dice)


def hungarian_assign(cost: np.ndarray) -> np.ndarray:
    """Optimal injective assignment of ground truths (columns) to queries (rows).

    Returns, for each column j, the row index it is assigned to. Shortest
    augmenting path over potentials; tie scanning proceeds in ascending row
    order so equal-cost choices favor the lower query index.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {c.shape}")
    n, g = c.shape
    if g == 0:
        return np.zeros(0, dtype=np.intp)
    if g > n:
        raise CapacityError(f"{g} ground-truth segments exceed {n} queries")
    if not np.isfinite(c).all():
        raise NumericError("hungarian_assign: non-finite cost entry")

    a = np.ascontiguousarray(c.T)          # (g, n): rows to place, columns to use
    inf = np.inf
    u = np.zeros(g + 1)
    v = np.zeros(n + 1)
    assigned = np.zeros(n + 1, dtype=np.intp)   # column -> 1-based row, 0 free
    way = np.zeros(n + 1, dtype=np.intp)
    for i in range(1, g + 1):
        assigned[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = assigned[j0]
            cur = a[i0 - 1] - u[i0] - v[1:]
            improve = ~used[1:] & (cur < minv[1:])
            if improve.any():
                minv[1:] = np.where(improve, cur, minv[1:])
                way[1:][improve] = j0
            open_cols = np.where(used[1:], inf, minv[1:])
            j1 = int(np.argmin(open_cols)) + 1
            delta = open_cols[j1 - 1]
            u[assigned[used]] += delta
            v[used] -= delta
            minv[1:][~used[1:]] -= delta
            j0 = j1
            if assigned[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            assigned[j0] = assigned[j_prev]
            j0 = j_prev
    rows = np.zeros(g, dtype=np.intp)
    cols = np.nonzero(assigned[1:] > 0)[0]
    rows[assigned[1:][cols] - 1] = cols
    return rows


def _stream_layer_loss(pred: SegmentPrediction, gt: StreamTargets, w: LossWeights):
    """(class loss, mask loss) tensors for one layer of one stream."""
    n = pred.num_queries
    k = pred.num_classes
    cls_weights = np.ones(k + 1)
    cls_weights[k] = NO_OBJECT_WEIGHT
    if gt.count == 0:
        targets = np.full(n, k, dtype=np.intp)
        l_cls = nll_from_logits(pred.class_logits, targets, cls_weights)
        zero = Tensor(np.asarray(0.0, dtype=pred.class_logits.dtype))
        return l_cls, zero
    cost = match_cost_matrix(pred, gt, w)
    rows = hungarian_assign(cost)
    targets = np.full(n, k, dtype=np.intp)
    targets[rows] = gt.classes
    l_cls = nll_from_logits(pred.class_logits, targets, cls_weights)

    hw = pred.mask_logits.shape[1] * pred.mask_logits.shape[2]
    logits_flat = reshape(pred.mask_logits, (n, hw))
    sel = take_rows(logits_flat, rows)                       # (G, hw)
    t = gt.masks.reshape(gt.count, hw).astype(pred.mask_logits.dtype)
    l_bce = bce_with_logits_mean(sel, t)                     # mean over pairs of per-pair means
    probs = sigmoid(sel)
    inter = tsum(mul(probs, t), axis=1)
    denom = add(tsum(probs, axis=1), t.sum(axis=1) + 1.0)
    dice = add(1.0, mul(div(add(mul(inter, 2.0), 1.0), denom), -1.0))
    l_mask = add(l_bce, tmean(dice))
    return l_cls, l_mask


def total_loss(outputs: ModelOutputs, gt: GroundTruthSegments, w: LossWeights) -> LossBreakdown:
    """Deep-supervised hierarchical loss over all layers of both streams.

    Every layer is matched independently; layers contribute with equal
    weight: total = sum_layers [ lc*Lp_cls + lm*Lp_mask + lc*Ll_cls + lm*Ll_mask ].
    """
    if not outputs.plant or not outputs.leaf:
        raise UsageError("total_loss needs at least one supervised layer per stream")
    sums: dict[str, Tensor | None] = {
        "cls_plant": None, "mask_plant": None, "cls_leaf": None, "mask_leaf": None}
    per_layer: list[dict] = []
    for stream, preds, targets in (("plant", outputs.plant, gt.plant),
                                   ("leaf", outputs.leaf, gt.leaf)):
        for pred in preds:
            l_cls, l_mask = _stream_layer_loss(pred, targets, w)
            per_layer.append({
                "stream": stream,
                "layer_index": pred.layer_index,
                "l_cls": l_cls.item(),
                "l_mask": l_mask.item(),
            })
            ck, mk = f"cls_{stream}", f"mask_{stream}"
            sums[ck] = l_cls if sums[ck] is None else add(sums[ck], l_cls)
            sums[mk] = l_mask if sums[mk] is None else add(sums[mk], l_mask)
    total = add(
        add(mul(sums["cls_plant"], w.lambda_cls), mul(sums["mask_plant"], w.lambda_mask)),
        add(mul(sums["cls_leaf"], w.lambda_cls), mul(sums["mask_leaf"], w.lambda_mask)),
    )
    return LossBreakdown(
        total=total,
        l_cls_plant=sums["cls_plant"].item(),
        l_mask_plant=sums["mask_plant"].item(),
        l_cls_leaf=sums["cls_leaf"].item(),
        l_mask_leaf=sums["mask_leaf"].item(),
        per_layer=per_layer,
    )
