"""Optimization loop: decoupled-weight-decay Adam, step LR schedule, freezing.

The schedule decays the base rate by ``decay_factor`` at each configured
fraction of the total step count; the backbone group always runs at
``backbone_lr_mult`` times the head rate.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig, TrainConfig
from .errors import DataError, NumericError, UsageError
from .losses import ground_truth_segments, total_loss
from .metrics import aggregate, evaluate_sample
from .model import HierarchicalModel, image_to_tensor
from .postprocess import run_inference
from .tensor import no_grad

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


def lr_at(step: int, total_steps: int, cfg: TrainConfig, group: str = "head") -> float:
    """Piecewise-constant step schedule; decay applies from floor(frac*total)."""
    if not 0 <= step < total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps})")
    passed = sum(step >= math.floor(f * total_steps) for f in cfg.decay_fractions)
    lr = cfg.base_lr * cfg.decay_factor ** passed
    if group == "backbone":
        lr *= cfg.backbone_lr_mult
    elif group != "head":
        raise UsageError(f"unknown parameter group '{group}'")
    return lr


class AdamW:
    """Adaptive moments with decoupled weight decay.

    theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta).
    Moments persist across steps; frozen parameters are never touched.
    A non-finite gradient rejects the whole step before any state changes.
    """

    def __init__(self, params, beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS):
        self.params = [p for p in params if p.learnable]
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr_by_group: dict[str, float], weight_decay: float) -> None:
        grads = {}
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise NumericError(f"optimizer step rejected: non-finite gradient in '{p.name}'")
            grads[p.name] = g
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            g = grads[p.name]
            m = self.m[p.name]
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            lr = lr_by_group[p.group]
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps) + weight_decay * p.data
            p.data = p.data - lr * update


def clip_gradients(params, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for p in params if p.learnable and p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads:
            g *= factor
    return norm


LOG_COLUMNS = ("step", "lr_head", "lr_backbone", "L_total",
               "L_cls_plant", "L_mask_plant", "L_cls_leaf", "L_mask_leaf")


@dataclass
class FitResult:
    steps: int
    best_pq: float
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    first_loss: float
    final_loss: float
    validations: list[dict] = field(default_factory=list)


def _validate_pq(model: HierarchicalModel, samples, run_cfg: RunConfig) -> dict:
    tallies = []
    with no_grad():
        for sample in samples:
            pmap = run_inference(model, sample.image, run_cfg.inference)
            tallies.append(evaluate_sample(sample, pmap.semantic, pmap.plant_instance,
                                           pmap.leaf_instance))
    report = aggregate(tallies)
    return {"pq": report.pq, "pq_crop": report.pq_crop, "pq_leaf": report.pq_leaf,
            "iou_weed": report.iou_weed, "iou_soil": report.iou_soil}


def fit(model: HierarchicalModel, train_samples, run_cfg: RunConfig, out_dir,
        val_samples=None, progress=None) -> FitResult:
    """Train the model; deterministic given the config seed.

    ``train_samples``/``val_samples`` are sequences of HierarchicalSample.
    Writes the append-only step log, the resolved config echo, a best-PQ
    checkpoint and a final checkpoint into ``out_dir``.
    """
    cfg = run_cfg.train
    if len(train_samples) == 0:
        raise DataError("training set is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = run_cfg.echo()
    (out / "config.txt").write_text(echo, encoding="utf-8")

    if val_samples is None or len(val_samples) == 0:
        val_samples = train_samples[: min(32, len(train_samples))]

    stride = run_cfg.model.mask_stride
    images = [image_to_tensor(s.image, model.dtype) for s in train_samples]
    targets = [ground_truth_segments(s, stride) for s in train_samples]

    optimizer = AdamW(model.parameters())
    rng = np.random.default_rng(cfg.seed)
    total_steps = cfg.epochs * len(train_samples)
    quarter = max(1, total_steps // 4)
    val_steps = {min(quarter * k, total_steps) for k in (1, 2, 3, 4)}

    best_pq = -1.0
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    log_path = out / "train_log.csv"
    first_loss = math.nan
    final_loss = math.nan
    validations: list[dict] = []
    bad_streak = 0
    step = 0

    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)
        for _epoch in range(cfg.epochs):
            order = rng.permutation(len(train_samples))
            for i in order:
                lr_head = lr_at(step, total_steps, cfg, "head")
                lr_backbone = lr_at(step, total_steps, cfg, "backbone")
                outputs = model.forward(images[i])
                breakdown = total_loss(outputs, targets[i], run_cfg.loss)
                loss_value = breakdown.total_value
                if not math.isfinite(loss_value):
                    bad_streak += 1
                    if bad_streak >= 2:
                        raise NumericError(
                            f"aborting: non-finite loss at steps {step - 1} and {step}")
                    step += 1
                    continue
                if math.isnan(first_loss):
                    first_loss = loss_value
                final_loss = loss_value
                model.zero_grad()
                breakdown.total.backward()
                if cfg.grad_clip_norm > 0:
                    clip_gradients(model.parameters(), cfg.grad_clip_norm)
                try:
                    optimizer.step({"head": lr_head, "backbone": lr_backbone},
                                   cfg.weight_decay)
                except NumericError:
                    bad_streak += 1
                    if bad_streak >= 2:
                        raise
                    step += 1
                    continue
                bad_streak = 0
                writer.writerow([step, repr(lr_head), repr(lr_backbone),
                                 f"{loss_value:.6f}",
                                 f"{breakdown.l_cls_plant:.6f}",
                                 f"{breakdown.l_mask_plant:.6f}",
                                 f"{breakdown.l_cls_leaf:.6f}",
                                 f"{breakdown.l_mask_leaf:.6f}"])
                step += 1
                if step in val_steps:
                    fh.flush()
                    record = _validate_pq(model, val_samples, run_cfg)
                    record["step"] = step
                    validations.append(record)
                    if progress is not None:
                        progress(record)
                    if record["pq"] >= best_pq:
                        best_pq = record["pq"]
                        model.save(best_path, echo)

    model.save(last_path, echo)
    if best_pq < 0:
        model.save(best_path, echo)
        best_pq = 0.0
    return FitResult(
        steps=step,
        best_pq=best_pq,
        best_checkpoint=str(best_path),
        last_checkpoint=str(last_path),
        log_path=str(log_path),
        first_loss=first_loss,
        final_loss=final_loss,
        validations=validations,
    )
