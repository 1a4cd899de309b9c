"""Pydantic request/response models for the service endpoints.

Paths in requests refer to the filesystem the service runs on; the default
CLI mode hosts the app in-process, so they are ordinary local paths.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class DefaultsResponse(BaseModel):
    config_echo: str


class SynthRequest(BaseModel):
    out_dir: str
    count: int = Field(gt=0)
    size: int = Field(gt=0)
    seed: int = 0
    split: str = "train"


class SynthResponse(BaseModel):
    out_dir: str
    split: str
    count: int
    names: list[str]


class TrainRequest(BaseModel):
    data_dir: str
    out_dir: str
    config_text: str = ""
    train_split: str = "train"
    val_split: str = "val"


class ValidationRecord(BaseModel):
    step: int
    pq: float
    pq_crop: float
    pq_leaf: float
    iou_weed: float
    iou_soil: float


class TrainResponse(BaseModel):
    steps: int
    best_pq: float
    best_checkpoint: str
    last_checkpoint: str
    log_path: str
    first_loss: float
    final_loss: float
    config_echo: str
    validations: list[ValidationRecord]


class InferRequest(BaseModel):
    checkpoint: str
    images_dir: str
    out_dir: str
    workers: int = 0          # 0 -> all available cores


class InferResponse(BaseModel):
    count: int
    out_dir: str
    config_echo: str


class EvalRequest(BaseModel):
    pred_dir: str
    gt_dir: str
    report_path: str = ""
    workers: int = 0


class EvalResponse(BaseModel):
    pq_crop: float
    pq_leaf: float
    iou_weed: float
    iou_soil: float
    pq: float
    pq_dagger: float
    counts: dict
    report_path: str = ""
    tally_path: str = ""


class BenchRequest(BaseModel):
    config_text: str = ""
    size: int = 1024
    warmup: int = 10
    iters: int = 100
    report_path: str = ""
    json_format: bool = False
    seed: int = 0


class StageTiming(BaseModel):
    mean_ms: float
    std_ms: float


class BenchResponse(BaseModel):
    stages: dict[str, StageTiming]
    total_ms: float
    total_std_ms: float
    fps: float
    warmup: int
    iters: int
    input_size: int
    config_echo: str
    report_path: str = ""
