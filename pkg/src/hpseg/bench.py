"""Per-stage inference latency measurement.

Times the three pipeline stages (backbone, head including mask upsampling,
post-processing) around monotonic-clock boundaries, with warmup iterations
discarded and one pre-materialized random frame reused throughout. The timed
path runs in a single Python thread and the harness refuses to start a second
benchmark in the same process.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import InferenceConfig
from .errors import UsageError
from .model import HierarchicalModel, image_to_tensor
from .postprocess import assemble_panoptic, upsample_mask_probs
from .tensor import no_grad

STAGES = ("backbone", "head", "postprocess")

_BENCH_LOCK = threading.Lock()


@dataclass
class TimingReport:
    stage_ms: dict[str, tuple[float, float]]    # stage -> (mean, std)
    total_ms: float
    total_std_ms: float
    fps: float
    warmup: int
    iters: int
    input_size: int
    config_echo: str = ""
    notes: str = "single-threaded timed path"

    def as_dict(self) -> dict:
        return {
            "stages": {k: {"mean_ms": v[0], "std_ms": v[1]} for k, v in self.stage_ms.items()},
            "total_ms": self.total_ms,
            "total_std_ms": self.total_std_ms,
            "fps": self.fps,
            "warmup": self.warmup,
            "iters": self.iters,
            "input_size": self.input_size,
            "notes": self.notes,
            "config_echo": self.config_echo,
        }


def time_stages(model: HierarchicalModel, input_size: int, warmup: int = 10,
                iters: int = 100, inference: InferenceConfig | None = None,
                seed: int = 0, config_echo: str = "") -> TimingReport:
    """Measure per-stage latency on one random frame at batch size 1."""
    if warmup < 1:
        raise UsageError("warmup must be >= 1")
    if iters < 10:
        raise UsageError("iters must be >= 10")
    if input_size % 32:
        raise UsageError(f"input size {input_size} not divisible by 32")
    if not _BENCH_LOCK.acquire(blocking=False):
        raise UsageError("a benchmark is already running in this process")
    try:
        inference = inference or InferenceConfig()
        frame = np.random.default_rng(seed).integers(
            0, 256, size=(input_size, input_size, 3), dtype=np.uint8)
        durations = np.zeros((iters, len(STAGES)))
        totals = np.zeros(iters)
        clock = time.perf_counter
        with no_grad():
            for it in range(-warmup, iters):
                t0 = clock()
                x = image_to_tensor(frame, model.dtype)
                feats = model.backbone_apply(x)
                t1 = clock()
                outputs = model.head_apply(feats)
                plant_pred = outputs.plant[-1]
                leaf_pred = outputs.leaf[-1]
                hw = outputs.image_hw
                plant_probs = upsample_mask_probs(plant_pred, hw)
                leaf_probs = upsample_mask_probs(leaf_pred, hw)
                t2 = clock()
                assemble_panoptic(plant_pred, leaf_pred, plant_probs, leaf_probs, inference)
                t3 = clock()
                if it >= 0:
                    durations[it] = ((t1 - t0) * 1e3, (t2 - t1) * 1e3, (t3 - t2) * 1e3)
                    totals[it] = (t3 - t0) * 1e3
        stage_ms = {
            name: (float(durations[:, i].mean()), float(durations[:, i].std(ddof=1)))
            for i, name in enumerate(STAGES)
        }
        total = float(totals.mean())
        return TimingReport(
            stage_ms=stage_ms,
            total_ms=total,
            total_std_ms=float(totals.std(ddof=1)),
            fps=1000.0 / total,
            warmup=warmup,
            iters=iters,
            input_size=input_size,
            config_echo=config_echo,
        )
    finally:
        _BENCH_LOCK.release()


def emit_report(report: TimingReport | None, path, fmt: str = "csv") -> None:
    """Write ``stage,mean_ms,std_ms`` rows plus a total summary row.

    ``fmt="json"`` writes the same fields as a JSON object instead. An empty
    report produces a header-only CSV.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        payload = report.as_dict() if report is not None else {}
        path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
        return
    if fmt != "csv":
        raise UsageError(f"unknown report format '{fmt}'")
    lines = ["stage,mean_ms,std_ms"]
    if report is not None:
        for name in STAGES:
            mean, std = report.stage_ms[name]
            lines.append(f"{name},{mean:.3f},{std:.3f}")
        lines.append(f"total,{report.total_ms:.3f},{report.total_std_ms:.3f}")
        lines.append(f"# fps={report.fps:.3f} warmup={report.warmup} "
                     f"iters={report.iters} input={report.input_size} ({report.notes})")
        for cfg_line in report.config_echo.strip().splitlines():
            lines.append(f"# {cfg_line}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
