"""FastAPI application wrapping the segmentation toolkit.

Job endpoints run synchronously and return their results; errors map to a
``{"category", "detail"}`` payload so clients can translate them into exit
codes (usage -> 1, data -> 2, numeric/internal -> 3).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..bench import emit_report, time_stages
from ..config import RunConfig, parse_config_text
from ..data import DatasetIndex, _read_png, list_names, synth_generate, write_prediction
from ..errors import DataError, NumericError, UsageError
from ..metrics import evaluate_directories, write_report
from ..model import build_model, load_model
from ..postprocess import run_inference
from ..train import fit
from . import schemas


def _workers(requested: int) -> int:
    return requested if requested > 0 else (os.cpu_count() or 1)


def create_app() -> FastAPI:
    app = FastAPI(title="hpseg service", version=__version__)

    @app.exception_handler(UsageError)
    async def usage_handler(request: Request, exc: UsageError):
        return JSONResponse(status_code=400, content={"category": "usage", "detail": str(exc)})

    @app.exception_handler(DataError)
    async def data_handler(request: Request, exc: DataError):
        return JSONResponse(status_code=422, content={"category": "data", "detail": str(exc)})

    @app.exception_handler(NumericError)
    async def numeric_handler(request: Request, exc: NumericError):
        return JSONResponse(status_code=500, content={"category": "numeric", "detail": str(exc)})

    @app.exception_handler(Exception)
    async def internal_handler(request: Request, exc: Exception):
        return JSONResponse(status_code=500,
                            content={"category": "internal", "detail": repr(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(version=__version__)

    @app.get("/defaults", response_model=schemas.DefaultsResponse)
    def defaults():
        return schemas.DefaultsResponse(config_echo=RunConfig().validate().echo())

    @app.post("/synth", response_model=schemas.SynthResponse)
    def synth(req: schemas.SynthRequest):
        names = synth_generate(req.out_dir, req.count, req.size, req.seed, split=req.split)
        return schemas.SynthResponse(out_dir=req.out_dir, split=req.split,
                                     count=len(names), names=names)

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        run_cfg = parse_config_text(req.config_text)
        train_idx = DatasetIndex.open(req.data_dir, req.train_split)
        train_samples = train_idx.load_all()
        val_samples = None
        if (Path(req.data_dir) / req.val_split / "semantics").is_dir():
            val_samples = DatasetIndex.open(req.data_dir, req.val_split).load_all()
        model = build_model(run_cfg, seed=run_cfg.train.seed)
        result = fit(model, train_samples, run_cfg, req.out_dir, val_samples=val_samples)
        return schemas.TrainResponse(
            steps=result.steps,
            best_pq=result.best_pq,
            best_checkpoint=result.best_checkpoint,
            last_checkpoint=result.last_checkpoint,
            log_path=result.log_path,
            first_loss=result.first_loss,
            final_loss=result.final_loss,
            config_echo=run_cfg.echo(),
            validations=[schemas.ValidationRecord(**v) for v in result.validations],
        )

    @app.post("/infer", response_model=schemas.InferResponse)
    def infer(req: schemas.InferRequest):
        model, run_cfg = load_model(req.checkpoint)
        names = list_names(req.images_dir, sub="images")
        if not names:
            raise DataError(f"no images under {req.images_dir}/images")
        images_dir = Path(req.images_dir) / "images"
        out_dir = Path(req.out_dir)
        (out_dir / "config.txt").parent.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(run_cfg.echo(), encoding="utf-8")

        def one(name: str) -> None:
            image = _read_png(images_dir / f"{name}.png")
            pmap = run_inference(model, image, run_cfg.inference)
            write_prediction(out_dir, name, pmap)

        n = _workers(req.workers)
        if n > 1:
            with ThreadPoolExecutor(max_workers=n) as pool:
                list(pool.map(one, names))
        else:
            for name in names:
                one(name)
        return schemas.InferResponse(count=len(names), out_dir=str(out_dir),
                                     config_echo=run_cfg.echo())

    @app.post("/eval", response_model=schemas.EvalResponse)
    def eval_(req: schemas.EvalRequest):
        report = evaluate_directories(req.pred_dir, req.gt_dir, workers=_workers(req.workers))
        tally_path = ""
        if req.report_path:
            tally_path = write_report(report, req.report_path)
        return schemas.EvalResponse(
            **report.as_dict(), counts=report.counts,
            report_path=req.report_path, tally_path=tally_path,
        )

    @app.post("/bench", response_model=schemas.BenchResponse)
    def bench(req: schemas.BenchRequest):
        run_cfg = parse_config_text(req.config_text)
        model = build_model(run_cfg, seed=run_cfg.train.seed, dtype=np.float32)
        report = time_stages(model, req.size, warmup=req.warmup, iters=req.iters,
                             inference=run_cfg.inference, seed=req.seed,
                             config_echo=run_cfg.echo())
        if req.report_path:
            emit_report(report, req.report_path, fmt="json" if req.json_format else "csv")
        return schemas.BenchResponse(
            stages={k: schemas.StageTiming(mean_ms=v[0], std_ms=v[1])
                    for k, v in report.stage_ms.items()},
            total_ms=report.total_ms,
            total_std_ms=report.total_std_ms,
            fps=report.fps,
            warmup=report.warmup,
            iters=report.iters,
            input_size=report.input_size,
            config_echo=report.config_echo,
            report_path=req.report_path,
        )

    return app
