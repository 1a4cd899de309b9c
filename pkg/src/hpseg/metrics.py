"""Hierarchical panoptic evaluation.

Panoptic quality for the countable classes (crop, leaf), IoU for the
amorphous ones (weed, soil), with the under-50%-visible exclusion rule.
Tallies are summed over the dataset before the final divisions, and the two
reported averages are PQ = (PQ_crop + PQ_leaf)/2 and PQ_dagger = mean of all
four components.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

THING_CLASSES = ("crop", "leaf")
STUFF_CLASSES = ("weed", "soil")
METRIC_ORDER = ("pq_crop", "pq_leaf", "iou_weed", "iou_soil", "pq", "pq_dagger")


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks.

    Both empty counts as perfect agreement (1.0); exactly one empty is 0.0.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"iou: shapes differ {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


@dataclass
class MatchSet:
    """TP pairs (pred id, gt id, IoU) plus unmatched ids on both sides."""

    tp: list[tuple[int, int, float]] = field(default_factory=list)
    fp: list[int] = field(default_factory=list)
    fn: list[int] = field(default_factory=list)

    @property
    def sum_iou(self) -> float:
        return sum(p[2] for p in self.tp)


def _as_instances(x, side: str) -> dict[int, np.ndarray]:
    """Normalize an id map or an id->mask mapping into {id: bool mask}.

    Mapping inputs are validated for pairwise disjointness (an id map cannot
    overlap by construction).
    """
    if isinstance(x, np.ndarray):
        out = {}
        for v in np.unique(x):
            if v != 0:
                out[int(v)] = x == v
        return out
    return _as_instances(_as_id_map(x, side), side)


def _as_id_map(x, side: str) -> np.ndarray:
    """Normalize to an int id map (0 = background)."""
    if isinstance(x, np.ndarray):
        return x
    items = dict(x)
    id_map = None
    for key, mask in items.items():
        key = int(key)
        if key <= 0:
            raise DataError(f"{side} instance ids must be positive, got {key}")
        mask = np.asarray(mask, dtype=bool)
        if id_map is None:
            id_map = np.zeros(mask.shape, dtype=np.int64)
        elif id_map.shape != mask.shape:
            raise ShapeError(f"{side} instance masks have differing shapes")
        clash = mask & (id_map != 0)
        if clash.any():
            y, x_ = np.argwhere(clash)[0]
            raise DataError(f"{side} instances overlap at pixel ({y}, {x_})")
        id_map[mask] = key
    if id_map is None:
        id_map = np.zeros((0, 0), dtype=np.int64)
    return id_map


def pq_class(pred, gt) -> tuple[float, MatchSet]:
    """Panoptic quality for one class: 100 * sum(IoU of TPs) / (TP + FP/2 + FN/2).

    Matching takes every pair with IoU > 0.5; such a matching is unique.
    Inputs are id maps (0 = background) or id->mask mappings.
    """
    pred_map = _as_id_map(pred, "prediction").astype(np.int64)
    gt_map = _as_id_map(gt, "ground-truth").astype(np.int64)
    if pred_map.size and gt_map.size and pred_map.shape != gt_map.shape:
        raise ShapeError(f"pq_class: shapes differ {pred_map.shape} vs {gt_map.shape}")

    def areas(id_map):
        ids, counts = np.unique(id_map[id_map > 0], return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    pred_areas = areas(pred_map)
    gt_areas = areas(gt_map)
    ms = MatchSet()
    matched_pred: set[int] = set()
    matched_gt: set[int] = set()
    if pred_map.size and gt_map.size:
        both = (pred_map > 0) & (gt_map > 0)
        if both.any():
            base = int(gt_map.max()) + 1
            keys = pred_map[both] * base + gt_map[both]
            uniq, counts = np.unique(keys, return_counts=True)
            for key, inter in zip(uniq.tolist(), counts.tolist()):
                pid, gid = divmod(key, base)
                union = pred_areas[pid] + gt_areas[gid] - inter
                v = inter / union
                if v > 0.5:
                    ms.tp.append((pid, gid, v))
                    matched_pred.add(pid)
                    matched_gt.add(gid)
    ms.tp.sort()
    ms.fp = [pid for pid in sorted(pred_areas) if pid not in matched_pred]
    ms.fn = [gid for gid in sorted(gt_areas) if gid not in matched_gt]
    denom = len(ms.tp) + 0.5 * len(ms.fp) + 0.5 * len(ms.fn)
    if denom == 0:
        return 100.0, ms
    return 100.0 * ms.sum_iou / denom, ms


def apply_ignore_rule(gt_instances, pred_instances, visibility: dict | None = None,
                      extra_ignore: np.ndarray | None = None):
    """Drop under-visible ground truth and predictions swallowed by ignore regions.

    GT instances with visibility < 0.5 leave the match pool and their pixels
    join the ignore region; predictions with more than half their area inside
    the region are removed without counting as false positives. Without any
    metadata this is the identity transform.
    """
    gt_instances = _as_instances(gt_instances, "ground-truth")
    pred_instances = _as_instances(pred_instances, "prediction")
    shape = None
    for masks in (gt_instances, pred_instances):
        for m in masks.values():
            shape = m.shape
            break
        if shape:
            break
    if shape is None:
        shape = extra_ignore.shape if extra_ignore is not None else (0, 0)
    ignore = np.zeros(shape, dtype=bool)
    if extra_ignore is not None:
        ignore |= np.asarray(extra_ignore, dtype=bool)
    gt_kept = {}
    for gid, mask in gt_instances.items():
        if visibility is not None and visibility.get(gid, 1.0) < 0.5:
            ignore |= mask
        else:
            gt_kept[gid] = mask
    pred_kept = {}
    for pid, mask in pred_instances.items():
        area = mask.sum()
        if area and (mask & ignore).sum() > 0.5 * area:
            continue
        pred_kept[pid] = mask
    return gt_kept, pred_kept, ignore


@dataclass
class ThingTally:
    sum_iou: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def add(self, ms: MatchSet) -> None:
        self.sum_iou += ms.sum_iou
        self.tp += len(ms.tp)
        self.fp += len(ms.fp)
        self.fn += len(ms.fn)

    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        if denom == 0:
            return 100.0
        return 100.0 * self.sum_iou / denom


@dataclass
class StuffTally:
    intersection: int = 0
    union: int = 0

    def add_masks(self, pred: np.ndarray, gt: np.ndarray) -> None:
        self.intersection += int(np.logical_and(pred, gt).sum())
        self.union += int(np.logical_or(pred, gt).sum())

    def iou(self) -> float:
        if self.union == 0:
            return 100.0
        return 100.0 * self.intersection / self.union


@dataclass
class ImageTally:
    crop: ThingTally = field(default_factory=ThingTally)
    leaf: ThingTally = field(default_factory=ThingTally)
    weed: StuffTally = field(default_factory=StuffTally)
    soil: StuffTally = field(default_factory=StuffTally)


@dataclass
class MetricReport:
    pq_crop: float
    pq_leaf: float
    iou_weed: float
    iou_soil: float
    pq: float
    pq_dagger: float
    counts: dict = field(default_factory=dict)

    @classmethod
    def from_components(cls, pq_crop: float, pq_leaf: float,
                        iou_weed: float, iou_soil: float) -> "MetricReport":
        return cls(
            pq_crop=pq_crop, pq_leaf=pq_leaf, iou_weed=iou_weed, iou_soil=iou_soil,
            pq=(pq_crop + pq_leaf) / 2.0,
            pq_dagger=(pq_crop + pq_leaf + iou_weed + iou_soil) / 4.0,
        )

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in METRIC_ORDER}


def format_metric(value: float) -> str:
    """0-100 scale, 2 decimals, round-half-even."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


def _instance_class(mask: np.ndarray, semantics: np.ndarray) -> int:
    """Majority semantic class of an instance; partial labels fold to the class."""
    labels = semantics[mask]
    folded = np.where(labels == 3, 1, np.where(labels == 4, 2, labels))
    crop_pixels = int((folded == 1).sum())
    return 1 if 2 * crop_pixels >= labels.size else 2


def evaluate_sample(gt_sample, pred_semantics: np.ndarray, pred_plants: np.ndarray,
                    pred_leaves: np.ndarray) -> ImageTally:
    """Tally one image: PQ inputs for crop and leaf, IoU counts for weed and soil.

    The ignore region is the union of partial-label pixels (semantic 3/4) and
    the pixels of ground-truth plants whose stored visibility is below 0.5.
    Ground-truth leaves and predictions lying mostly inside it are excluded
    from matching on both sides; stuff IoU is computed outside it.
    """
    sem = gt_sample.semantics
    if pred_semantics.shape != sem.shape:
        raise ShapeError(
            f"prediction resolution {pred_semantics.shape} != ground truth {sem.shape}")
    visibility = getattr(gt_sample, "visibility", None)

    gt_plants = _as_instances(gt_sample.plant_instances, "ground-truth")
    ignored_ids = set()
    for pid, mask in gt_plants.items():
        if visibility and pid in visibility:
            if visibility[pid] < 0.5:
                ignored_ids.add(pid)
        elif _majority_partial(mask, sem):
            ignored_ids.add(pid)
    # partial-label pixels not claimed by a kept instance, plus ignored plants
    ignore = np.isin(sem, (3, 4))
    for pid, mask in gt_plants.items():
        if pid not in ignored_ids:
            ignore &= ~mask
    for pid in ignored_ids:
        ignore |= gt_plants[pid]

    def keep_pred(mask):
        area = mask.sum()
        return area > 0 and (mask & ignore).sum() <= 0.5 * area

    tally = ImageTally()

    gt_crops = {pid: m for pid, m in gt_plants.items()
                if pid not in ignored_ids and _instance_class(m, sem) == 1}
    pred_plant_inst = _as_instances(pred_plants, "prediction")
    pred_crops = {pid: m for pid, m in pred_plant_inst.items()
                  if keep_pred(m) and _instance_class(m, pred_semantics) == 1}
    _, ms = pq_class(pred_crops, gt_crops)
    tally.crop.add(ms)

    gt_leaves = {lid: m for lid, m in
                 _as_instances(gt_sample.leaf_instances, "ground-truth").items()
                 if (m & ignore).sum() <= 0.5 * m.sum()}
    pred_leaf_inst = {lid: m for lid, m in
                      _as_instances(pred_leaves, "prediction").items() if keep_pred(m)}
    _, ms = pq_class(pred_leaf_inst, gt_leaves)
    tally.leaf.add(ms)

    valid = ~ignore
    pred_sem_folded = np.where(pred_semantics == 3, 1,
                               np.where(pred_semantics == 4, 2, pred_semantics))
    tally.weed.add_masks((pred_sem_folded == 2) & valid, (sem == 2) & valid)
    tally.soil.add_masks((pred_sem_folded == 0) & valid, (sem == 0) & valid)
    return tally


def _majority_partial(mask: np.ndarray, semantics: np.ndarray) -> bool:
    labels = semantics[mask]
    return 2 * int(np.isin(labels, (3, 4)).sum()) > labels.size


def aggregate(tallies) -> MetricReport:
    """Dataset-level report from per-image tallies (sum first, divide once)."""
    crop, leaf = ThingTally(), ThingTally()
    weed, soil = StuffTally(), StuffTally()
    for t in tallies:
        crop.sum_iou += t.crop.sum_iou
        crop.tp += t.crop.tp
        crop.fp += t.crop.fp
        crop.fn += t.crop.fn
        leaf.sum_iou += t.leaf.sum_iou
        leaf.tp += t.leaf.tp
        leaf.fp += t.leaf.fp
        leaf.fn += t.leaf.fn
        weed.intersection += t.weed.intersection
        weed.union += t.weed.union
        soil.intersection += t.soil.intersection
        soil.union += t.soil.union
    report = MetricReport.from_components(crop.pq(), leaf.pq(), weed.iou(), soil.iou())
    report.counts = {
        "crop": {"tp": crop.tp, "fp": crop.fp, "fn": crop.fn, "sum_iou": crop.sum_iou},
        "leaf": {"tp": leaf.tp, "fp": leaf.fp, "fn": leaf.fn, "sum_iou": leaf.sum_iou},
        "weed": {"intersection": weed.intersection, "union": weed.union},
        "soil": {"intersection": soil.intersection, "union": soil.union},
    }
    return report


def evaluate_directories(pred_dir, gt_dir, workers: int = 1) -> MetricReport:
    """Evaluate a prediction split directory against a ground-truth one.

    Both directories contain semantics/plant_instances/leaf_instances map
    folders; the ground truth may also carry visibility sidecars. Results are
    aggregated in name order, so worker count never changes the report.
    """
    from .data import list_names, load_maps

    names = list_names(gt_dir)
    if not names:
        raise DataError(f"no samples found under {gt_dir}")

    def one(name: str) -> ImageTally:
        gt = load_maps(gt_dir, name, require_image=False)
        pred = load_maps(pred_dir, name, require_image=False, validate=False)
        return evaluate_sample(gt, pred.semantics, pred.plant_instances, pred.leaf_instances)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            tallies = list(pool.map(one, names))
    else:
        tallies = [one(n) for n in names]
    return aggregate(tallies)


def write_report(report: MetricReport, path) -> str:
    """CSV ``metric,value`` in the documented order, plus a tally CSV beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["metric,value"]
    for name in METRIC_ORDER:
        lines.append(f"{name},{format_metric(getattr(report, name))}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    tally_path = path.with_name(path.stem + "_tallies" + path.suffix)
    rows = ["class,tp,fp,fn,sum_iou,intersection,union"]
    for cls in THING_CLASSES:
        c = report.counts.get(cls, {})
        rows.append(f"{cls},{c.get('tp', 0)},{c.get('fp', 0)},{c.get('fn', 0)},"
                    f"{c.get('sum_iou', 0.0):.6f},,")
    for cls in STUFF_CLASSES:
        c = report.counts.get(cls, {})
        rows.append(f"{cls},,,,,{c.get('intersection', 0)},{c.get('union', 0)}")
    tally_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return str(tally_path)
