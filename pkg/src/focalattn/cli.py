"""Command line entry point: ``focalattn <subcommand>``.

Subcommands: ``gen-data``, ``train``, ``compare``, ``ablate``, ``report``.
The output root defaults to ``$FOCALATTN_OUT`` (or ``./focalattn-runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import (ABLATIONS, METHODS, ExperimentError, ReportError, default_out_root,
                          emit_report, load_config, run_ablation, run_dir, run_experiment, run_one)
from .synthgen import PRESETS, export_dataset

log = logging.getLogger("focalattn")


def _common(p: argparse.ArgumentParser, many: bool = True) -> None:
    p.add_argument("--config", type=Path, help="INI experiment file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="dataset preset")
    p.add_argument("--out", type=Path, help="output root (default: $FOCALATTN_OUT)")
    p.add_argument("--epochs", type=int, help="override training epochs")
    if many:
        p.add_argument("--method", action="append", choices=METHODS,
                       help="method to run; repeat for several (default: all from config)")
        p.add_argument("--seed", action="append", type=int,
                       help="seed to run; repeat for several (default: from config)")
        p.add_argument("--jobs", type=int, help="parallel runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="focalattn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="export a dataset as NDJSON plus manifest")
    _common(p, many=False)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="train one method for one seed")
    _common(p, many=False)
    p.add_argument("--method", choices=METHODS, default="dfa")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("compare", help="run the method comparison and write tables")
    _common(p)

    p = sub.add_parser("ablate", help="run one ablation")
    p.add_argument("kind", choices=ABLATIONS)
    _common(p)

    p = sub.add_parser("report", help="rebuild tables from persisted run records")
    p.add_argument("run_dir", type=Path, nargs="?", help="experiment directory (default: output root)")
    return parser


def _config(args, **extra):
    kw = {"epochs": args.epochs, "preset": args.preset, "out_dir": args.out}
    kw.update(extra)
    return load_config(args.config, **kw)


def _print_result(res) -> int:
    for t in res.tables:
        print(t)
    for method, seed, err in res.failures:
        print(f"FAILED {method} seed {seed}: {err}", file=sys.stderr)
    return 0 if res.ok else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            cfg = _config(args)
            ds = cfg.dataset.build(args.seed)
            path = export_dataset(ds, cfg.out_dir / "data" / f"seed{args.seed}")
            print(path)
            return 0
        if args.command == "train":
            cfg = _config(args, methods=(args.method,), seeds=(args.seed,))
            rec = run_one(cfg, args.method, args.seed)
            print(run_dir(cfg.out_dir, args.method, args.seed))
            print(json.dumps({"best_epoch": rec.best_epoch, "val_dice": rec.best_val["dice"],
                              "test_dice": rec.test_metrics["dice"]}))
            return 0
        if args.command == "compare":
            cfg = _config(args, methods=tuple(args.method or ()) or None,
                          seeds=tuple(args.seed or ()) or None, jobs=args.jobs)
            return _print_result(run_experiment(cfg))
        if args.command == "ablate":
            cfg = _config(args, methods=tuple(args.method or ()) or None,
                          seeds=tuple(args.seed or ()) or None, jobs=args.jobs)
            return _print_result(run_ablation(args.kind, cfg))
        if args.command == "report":
            for t in emit_report(args.run_dir or default_out_root()):
                print(t)
            return 0
    except ReportError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return 1
    except (ExperimentError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
