"""Command-line client for the service.

Runs against an in-process app by default, or a remote instance via
``--server URL``. Exit codes: 0 success, 1 usage error, 2 data error,
3 numeric/internal failure.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import httpx

from .config import parse_config
from .errors import DataError, NumericError, UsageError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

_CATEGORY_EXIT = {"usage": EXIT_USAGE, "data": EXIT_DATA,
                  "numeric": EXIT_NUMERIC, "internal": EXIT_NUMERIC}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="hpseg", description=__doc__)
    parser.add_argument("--server", default="", help="remote service URL (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset root containing train/ (and val/)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="run inference over a directory of images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="split dir containing images/")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0)

    p = sub.add_parser("eval", help="evaluate predictions against ground truth")
    p.add_argument("--pred", required=True, help="split dir with predicted maps")
    p.add_argument("--gt", required=True, help="split dir with ground-truth maps")
    p.add_argument("--report", required=True, help="metric CSV output path")
    p.add_argument("--workers", type=int, default=0)

    p = sub.add_parser("bench", help="per-stage latency benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--size", type=int, default=1024)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--report", required=True)
    p.add_argument("--json", action="store_true", help="write the report as JSON")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def _read_config_text(path: str) -> str:
    cfg_path = Path(path)
    if not cfg_path.exists():
        raise DataError(f"config file not found: {path}")
    text = cfg_path.read_text(encoding="utf-8")
    echo = parse_config(cfg_path).echo()     # validate early, fail fast
    print("resolved config:")
    for line in echo.strip().splitlines():
        print(f"  {line}")
    return text


async def _post(server: str, route: str, payload: dict) -> dict:
    if server:
        transport = None
        base_url = server.rstrip("/")
    else:
        from .service import create_app

        transport = httpx.ASGITransport(app=create_app(), raise_app_exceptions=False)
        base_url = "http://hpseg.local"
    async with httpx.AsyncClient(transport=transport, base_url=base_url,
                                 timeout=None) as client:
        resp = await client.post(route, json=payload)
    if resp.status_code == 200:
        return resp.json()
    try:
        body = resp.json()
    except ValueError:
        body = {}
    category = body.get("category", "usage" if resp.status_code < 500 else "internal")
    detail = body.get("detail", resp.text)
    print(f"error ({category}): {detail}", file=sys.stderr)
    raise SystemExit(_CATEGORY_EXIT.get(category, EXIT_NUMERIC))


def _call(server: str, route: str, payload: dict) -> dict:
    return asyncio.run(_post(server, route, payload))


def dispatch(argv) -> int:
    """Parse arguments, run one command, return the exit code."""
    try:
        args = _build_parser().parse_args(argv)
        if args.command == "train":
            body = _call(args.server, "/train", {
                "data_dir": args.data, "out_dir": args.out,
                "config_text": _read_config_text(args.config),
            })
            print(f"steps={body['steps']} best_pq={body['best_pq']:.2f} "
                  f"first_loss={body['first_loss']:.4f} final_loss={body['final_loss']:.4f}")
            print(f"best checkpoint: {body['best_checkpoint']}")
            print(f"training log: {body['log_path']}")
        elif args.command == "infer":
            body = _call(args.server, "/infer", {
                "checkpoint": args.checkpoint, "images_dir": args.images,
                "out_dir": args.out, "workers": args.workers,
            })
            print(f"wrote {body['count']} predictions to {body['out_dir']}")
        elif args.command == "eval":
            body = _call(args.server, "/eval", {
                "pred_dir": args.pred, "gt_dir": args.gt,
                "report_path": args.report, "workers": args.workers,
            })
            for key in ("pq_crop", "pq_leaf", "iou_weed", "iou_soil", "pq", "pq_dagger"):
                print(f"{key}={body[key]:.2f}")
            print(f"report: {body['report_path']}")
        elif args.command == "bench":
            body = _call(args.server, "/bench", {
                "config_text": _read_config_text(args.config),
                "size": args.size, "warmup": args.warmup, "iters": args.iters,
                "report_path": args.report, "json_format": bool(args.json),
            })
            for stage, timing in body["stages"].items():
                print(f"{stage}: {timing['mean_ms']:.1f} ms (std {timing['std_ms']:.1f})")
            print(f"total: {body['total_ms']:.1f} ms  fps={body['fps']:.2f}")
            print(f"report: {body['report_path']}")
        elif args.command == "synth":
            body = _call(args.server, "/synth", {
                "out_dir": args.out, "count": args.count, "size": args.size,
                "seed": args.seed, "split": args.split,
            })
            print(f"generated {body['count']} samples under {body['out_dir']}/{body['split']}")
        elif args.command == "serve":
            import uvicorn

            from .service import create_app

            uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except httpx.HTTPError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
