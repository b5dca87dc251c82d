"""Command line entry points: train, bench, serve, gen."""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .backbone import load_checkpoint
from .errors import PemedError
from .harness import run_benchmark
from .service import serve
from .training import TrainConfig, parse_config_text, train, write_dataset


def _checkpoint_arg(value: str | None) -> str:
    path = value or os.environ.get("PEMED_CHECKPOINT")
    if not path:
        raise SystemExit("no checkpoint given (use --checkpoint or PEMED_CHECKPOINT)")
    return path


def cmd_train(args) -> int:
    text = Path(args.config).read_text() if args.config else ""
    train_cfg, model_cfg = parse_config_text(text)
    model = train(train_cfg, model_cfg, args.out)
    final = model.train_log[-1] if model.train_log else {}
    print(f"wrote {args.out} (final epoch loss {final.get('mean_loss', float('nan')):.4f})")
    return 0


def cmd_bench(args) -> int:
    model = load_checkpoint(_checkpoint_arg(args.checkpoint))
    taus = tuple(float(t) for t in args.tau.split(","))
    report = run_benchmark(args.data, model, cap=args.cap, taus=taus, out_dir=args.out)
    summary = report.aggregate()
    print(json.dumps(summary, indent=2))
    return 0


def cmd_serve(args) -> int:
    serve(
        _checkpoint_arg(args.checkpoint),
        host=args.host,
        port=args.port,
        ttl_minutes=args.ttl_minutes,
    )
    return 0


def cmd_gen(args) -> int:
    cfg = TrainConfig(seed=args.seed)
    write_dataset(args.out, args.count, args.size, cfg, start_index=args.start_index)
    print(f"wrote {args.count} cases under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pemed", description="interactive segmentation engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a checkpoint on synthetic data")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("bench", help="run the simulated-click benchmark")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True, help="dir of <case>.img.pgm/<case>.gt.pgm")
    p.add_argument("--cap", type=int, default=10)
    p.add_argument("--tau", default="0.85,0.90", help="comma-separated thresholds")
    p.add_argument("--out", help="report output dir")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("serve", help="start the HTTP inference service")
    p.add_argument("--checkpoint")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ttl-minutes", type=float, default=30.0)
    p.set_defaults(fn=cmd_serve)

    p = sub.add_parser("gen", help="write a synthetic PGM dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start-index", type=int, default=0)
    p.set_defaults(fn=cmd_gen)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PemedError as e:
        print(f"error [{e.code}]: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
