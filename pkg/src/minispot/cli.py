"""Command-line entry point: generate, train, eval, bench, plot.

Exit codes: 0 ok, 2 usage, 3 data, 4 numeric failure. Errors print a
single machine-parsable line ``error[<kind>]: <message>`` on stderr.
The MINISPOT_OUT environment variable sets the default output root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as benchmod
from .errors import DataError, NumericError, UsageError
from .model import SpotterConfig, SpotterModel
from .runner import (build_model_from_checkpoint, evaluate, train,
                     write_eval_json)
from .scenes import (SceneConfig, dataset_stats, generate_dataset,
                     load_dataset, overfit_config, write_dataset)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _out_root() -> Path:
    return Path(os.environ.get("MINISPOT_OUT", "."))


def _resolve(path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() else _out_root() / p


def cmd_generate(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    config = overfit_config() if args.preset == "overfit" else SceneConfig()
    if args.image_size:
        config.image_size = args.image_size
    scenes = generate_dataset(config, args.count, args.seed)
    out_dir = _resolve(args.out)
    write_dataset(out_dir, config, scenes)
    stats = dataset_stats(scenes)
    print(json.dumps({"out": str(out_dir), **stats}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    dataset_dir = _resolve(args.dataset)
    _, scenes = load_dataset(dataset_dir)
    config = SpotterConfig(image_size=scenes[0][0].shape[0],
                           channels=args.channels,
                           encoder_depth=args.encoder_depth,
                           decoder_depth=args.decoder_depth,
                           num_proposals=args.proposals,
                           points_per_curve=args.points)
    model = SpotterModel(config, seed=args.seed)
    out_ckpt = _resolve(args.out)
    out_ckpt.parent.mkdir(parents=True, exist_ok=True)
    log_path = out_ckpt.with_suffix(".log.jsonl")
    if log_path.exists() and not args.resume:
        log_path.unlink()
    lines = train(model, scenes, steps=args.steps, seed=args.seed,
                  batch_size=args.batch_size, lr=args.lr,
                  log_path=log_path, checkpoint_path=out_ckpt,
                  resume_from=out_ckpt if args.resume else None)
    summary = {"checkpoint": str(out_ckpt), "log": str(log_path),
               "steps": args.steps,
               "final_loss": lines[-1]["total"] if lines else None}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    dataset_dir = _resolve(args.dataset)
    _, scenes = load_dataset(dataset_dir)
    model = build_model_from_checkpoint(_resolve(args.checkpoint))
    result = evaluate(model, scenes, score_threshold=args.score_threshold)
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_json(result, out)
    print(json.dumps(result.to_dict(), sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    records = benchmod.run_benchmark(args.mechanisms.split(","), sizes,
                                     channels=args.channels, reps=args.reps,
                                     seed=args.seed)
    slopes = benchmod.slopes_by_mechanism(records)
    csv_text = benchmod.records_to_csv(records)
    for mech, slope in sorted(slopes.items()):
        csv_text += f"# slope,{mech},{slope:.4f}\n"
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text)
    print(json.dumps({"out": str(out), "slopes": slopes}, sort_keys=True))
    return 0


def cmd_plot(args) -> int:
    from . import plots
    src = _resolve(args.csv)
    if not src.exists():
        raise DataError(f"no such CSV: {src}")
    out = _resolve(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.kind == "bench":
        text = "\n".join(ln for ln in src.read_text().splitlines()
                         if not ln.startswith("#"))
        records = benchmod.records_from_csv(text)
        plots.bench_plot_svg(records, out)
    else:
        plots.density_csv_to_pgm(src, out)
    print(json.dumps({"out": str(out)}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="minispot",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene dataset")
    g.add_argument("--count", type=int, default=300)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--preset", choices=["dense", "overfit"], default="dense")
    g.add_argument("--image-size", type=int, default=None)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a spotter on a dataset")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=2)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--channels", type=int, default=32)
    t.add_argument("--encoder-depth", type=int, default=2)
    t.add_argument("--decoder-depth", type=int, default=2)
    t.add_argument("--proposals", type=int, default=100)
    t.add_argument("--points", type=int, default=25)
    t.add_argument("--resume", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--dataset", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", required=True, help="metrics JSON path")
    e.add_argument("--score-threshold", type=float, default=0.5)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="attention-scaling benchmark")
    b.add_argument("--mechanisms", default="em,softmax")
    b.add_argument("--sizes", default="1024,2048,4096,8192")
    b.add_argument("--channels", type=int, default=64)
    b.add_argument("--reps", type=int, default=30)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="CSV path")
    b.set_defaults(fn=cmd_bench)

    p = sub.add_parser("plot", help="render SVG/PGM from CSV outputs")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["bench", "density"], default="bench")
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
