"""Convert raw segment predictions into hierarchical panoptic maps.

Queries are filtered by class confidence, then compete per pixel with
score-weighted mask probabilities; segments that keep too little of their
own thresholded mask are dropped as occluded. The plant stream defines the
semantic map and plant instances, the leaf stream independently defines
leaf instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import InferenceConfig
from .errors import ShapeError
from .model import HierarchicalModel, SegmentPrediction, image_to_tensor
from .tensor import Tensor, bilinear_resize, no_grad, sigmoid

SOIL, CROP, WEED = 0, 1, 2
PLANT_THINGS = frozenset({CROP})
PLANT_STUFF = frozenset({SOIL, WEED})
LEAF_THINGS = frozenset({0})


@dataclass
class KeptQuery:
    index: int
    label: int
    score: float


@dataclass
class SegmentInfo:
    segment_id: int          # instance id for things, 0 for stuff
    stream: str
    class_id: int
    score: float
    area: int


@dataclass
class StreamAssembly:
    class_map: np.ndarray    # (H, W) int, -1 where unclaimed
    instance_map: np.ndarray  # (H, W) int, 0 where none
    segments: list[SegmentInfo] = field(default_factory=list)


@dataclass
class PanopticMap:
    semantic: np.ndarray         # (H, W) uint8: 0 soil, 1 crop, 2 weed
    plant_instance: np.ndarray   # (H, W) int, 0 = none
    leaf_instance: np.ndarray    # (H, W) int, 0 = none
    segments: dict = field(default_factory=dict)   # (stream, id) -> SegmentInfo


def filter_queries(pred: SegmentPrediction, cfg: InferenceConfig) -> list[KeptQuery]:
    """Keep queries whose best real class wins over no-object at threshold."""
    probs = pred.class_probs.data
    k = pred.num_classes
    winner = probs.argmax(axis=1)
    labels = probs[:, :k].argmax(axis=1)
    scores = probs[:, :k].max(axis=1)
    kept = []
    for i in range(probs.shape[0]):
        if winner[i] == k or scores[i] < cfg.mask_confidence_threshold:
            continue
        kept.append(KeptQuery(index=i, label=int(labels[i]), score=float(scores[i])))
    return kept


def panoptic_assemble(kept: list[KeptQuery], mask_probs: np.ndarray,
                      cfg: InferenceConfig, thing_classes: frozenset,
                      stream: str) -> StreamAssembly:
    """Assign each pixel to the best score-weighted query and drop occluded masks.

    ``mask_probs`` holds the full query set at output resolution; kept queries
    index into it. A segment's claim is where it wins the per-pixel argmax and
    its own probability is at least 0.5; it survives if claimed/native area
    >= overlap threshold. Stuff classes merge per class; things get dense ids
    in descending score order starting at 1.
    """
    h, w = mask_probs.shape[1:]
    asm = StreamAssembly(class_map=np.full((h, w), -1, dtype=np.int16),
                         instance_map=np.zeros((h, w), dtype=np.int32))
    if not kept:
        return asm
    order = sorted(kept, key=lambda q: (-q.score, q.index))
    probs = mask_probs[[q.index for q in order]]
    scores = np.array([q.score for q in order])
    weighted = probs * scores[:, None, None]
    winner = weighted.argmax(axis=0)          # first max wins: higher score, lower index
    survivors = []
    for pos, q in enumerate(order):
        native = probs[pos] >= 0.5
        native_area = int(native.sum())
        if native_area == 0:
            continue
        claim = (winner == pos) & native
        retained = int(claim.sum())
        if retained / native_area < cfg.overlap_threshold:
            continue
        survivors.append((q, claim, retained))
    next_id = 1
    for q, claim, area in survivors:
        asm.class_map[claim] = q.label
        if q.label in thing_classes:
            asm.instance_map[claim] = next_id
            asm.segments.append(SegmentInfo(next_id, stream, q.label, q.score, area))
            next_id += 1
        else:
            asm.instance_map[claim] = 0
    return asm


def hierarchical_output(plant: StreamAssembly, leaf: StreamAssembly) -> PanopticMap:
    """Combine the two stream maps; no cross-level masking is applied."""
    if plant.class_map.shape != leaf.class_map.shape:
        raise ShapeError(
            f"stream resolutions differ: {plant.class_map.shape} vs {leaf.class_map.shape}")
    semantic = np.where(plant.class_map >= 0, plant.class_map, SOIL).astype(np.uint8)
    out = PanopticMap(
        semantic=semantic,
        plant_instance=plant.instance_map.copy(),
        leaf_instance=leaf.instance_map.copy(),
    )
    for seg in plant.segments:
        out.segments[("plant", seg.segment_id)] = seg
    for seg in leaf.segments:
        out.segments[("leaf", seg.segment_id)] = seg
    return out


def upsample_mask_probs(pred: SegmentPrediction, out_hw: tuple[int, int]) -> np.ndarray:
    """Sigmoid of the mask logits, bilinearly upsampled to the image size."""
    with no_grad():
        probs = sigmoid(pred.mask_logits)
        if probs.shape[1:] != tuple(out_hw):
            probs = bilinear_resize(probs, out_hw)
        return probs.data


def assemble_panoptic(plant_pred: SegmentPrediction, leaf_pred: SegmentPrediction,
                      plant_probs: np.ndarray, leaf_probs: np.ndarray,
                      cfg: InferenceConfig) -> PanopticMap:
    plant_asm = panoptic_assemble(filter_queries(plant_pred, cfg), plant_probs,
                                  cfg, PLANT_THINGS, "plant")
    leaf_asm = panoptic_assemble(filter_queries(leaf_pred, cfg), leaf_probs,
                                 cfg, LEAF_THINGS, "leaf")
    return hierarchical_output(plant_asm, leaf_asm)


def run_inference(model: HierarchicalModel, image_u8: np.ndarray,
                  cfg: InferenceConfig) -> PanopticMap:
    """Full pipeline on one RGB uint8 image."""
    with no_grad():
        x = image_to_tensor(image_u8, model.dtype)
        outputs = model.forward(x)
    plant_pred = outputs.plant[-1]
    leaf_pred = outputs.leaf[-1]
    hw = outputs.image_hw
    plant_probs = upsample_mask_probs(plant_pred, hw)
    leaf_probs = upsample_mask_probs(leaf_pred, hw)
    return assemble_panoptic(plant_pred, leaf_pred, plant_probs, leaf_probs, cfg)
