"""Command-line front end.

Every failure is reported as a single stderr line of the form
``meldlab-error[<code>]: <message>`` with a nonzero exit status, so callers
can match on the code without parsing prose.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .autodiff import CheckpointError, NumericError
from .config import ConfigError, default_config, load_config, resolve_config
from .harness import run_compare, run_eval, run_info, run_sweep, run_training
from .selfdistill import MaskError, TrainingError
from .synthworld import DatasetError, GenerationError, generate_dataset, save_dataset

ERROR_CODES = {
    ConfigError: "config",
    DatasetError: "data",
    GenerationError: "data",
    CheckpointError: "checkpoint",
    TrainingError: "training",
    NumericError: "numeric",
    MaskError: "invalid",
    FileNotFoundError: "io",
    IsADirectoryError: "io",
    NotADirectoryError: "io",
    PermissionError: "io",
    ValueError: "invalid",
    KeyError: "invalid",
}


def _fail(exc: BaseException) -> int:
    code = "internal"
    for klass, name in ERROR_CODES.items():
        if isinstance(exc, klass):
            code = name
            break
    message = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"meldlab-error[{code}]: {message}", file=sys.stderr)
    return 1


def _ints(text: str) -> list[int]:
    return [int(tok) for tok in text.split(",") if tok]


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meldlab",
        description="Distributed-sensor event modeling: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("default-config", help="print the reference configuration")
    p.add_argument("--out", help="write to a file instead of stdout")

    p = sub.add_parser("gen-data", help="generate a dataset and save it to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one method on the configured world")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="root directory for run folders")
    p.add_argument("--method", default=None, help="method id A-H (default: first in config)")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="rescore a finished run from its checkpoint")
    p.add_argument("--run", required=True, help="run directory written by train")
    p.add_argument("--out", default=None)

    p = sub.add_parser("sweep-sensors", help="retraining-free sensor removal sweep")
    p.add_argument("--run", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--sizes", default=None, help="comma-separated removal sizes")

    p = sub.add_parser("analyze-info", help="exact information analysis of the world")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="train several methods over several seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default=None, help="comma-separated method ids")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    p.add_argument("--threads", type=int, default=1)
    return parser


def _cmd_default_config(args) -> int:
    text = json.dumps(default_config(), sort_keys=True, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _cmd_gen_data(args) -> int:
    rc = resolve_config(load_config(args.config))
    split = generate_dataset(rc.world, rc.sizes)
    save_dataset(split, args.out)
    n = len(split.train), len(split.val), len(split.test)
    print(f"wrote dataset to {args.out} (train/val/test = {n[0]}/{n[1]}/{n[2]})")
    return 0


def _cmd_train(args) -> int:
    doc = load_config(args.config)
    rc = resolve_config(doc)
    method = args.method if args.method is not None else rc.methods[0]
    seed = args.seed if args.seed is not None else rc.seeds[0]
    rec = run_training(doc, method, seed, args.out)
    det = rec.metrics["detection"]["macro_map"]
    tag = rec.metrics["tagging"]["macro_map"]
    print(f"run {rec.run_dir}: method={method} seed={seed} "
          f"detection_map={det:.4f} tagging_map={tag:.4f} "
          f"best_epoch={rec.best_epoch} wall={rec.wall_time_sec:.1f}s")
    return 0


def _cmd_eval(args) -> int:
    doc = run_eval(args.run, args.out)
    print(f"eval {args.run}: detection_map={doc['detection']['macro_map']:.4f} "
          f"tagging_map={doc['tagging']['macro_map']:.4f} "
          f"validation_loss={doc['validation_loss']:.6f}")
    return 0


def _cmd_sweep(args) -> int:
    sizes = _ints(args.sizes) if args.sizes else None
    summary = run_sweep(args.run, args.out, sizes=sizes)
    parts = [f"size={k}: median_map={v['median']:.4f}" for k, v in summary["by_size"].items()]
    print(f"sweep {args.run}: baseline_map={summary['baseline_map']:.4f} " + " ".join(parts))
    return 0


def _cmd_info(args) -> int:
    payload = run_info(load_config(args.config), args.out)
    roles = payload["role_labels"]
    print(f"info {args.out}: total={payload['total_information_bits']:.4f} bits, "
          f"roles={roles}")
    return 0


def _cmd_compare(args) -> int:
    doc = load_config(args.config)
    methods = args.methods.split(",") if args.methods else None
    seeds = _ints(args.seeds) if args.seeds else None
    rows = run_compare(doc, args.out, methods=methods, seeds=seeds, threads=args.threads)
    for row in rows:
        print(f"method={row['method']} seed={row['seed']} "
              f"detection_map={row['detection_map']:.4f} "
              f"tagging_map={row['tagging_map']:.4f}")
    print(f"wrote {Path(args.out) / 'comparison.csv'}")
    return 0


_HANDLERS = {
    "default-config": _cmd_default_config,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep-sensors": _cmd_sweep,
    "analyze-info": _cmd_info,
    "compare": _cmd_compare,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except BrokenPipeError:
        return 0
    except Exception as exc:  # every library error maps to one stderr line
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
