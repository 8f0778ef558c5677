"""Command-line entry point: ``dimrobust <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .. import transforms as tf
from ..errors import DataError, DimRobustError, UsageError
from .config import ExperimentConfig, load_config
from .pipeline import prepare, run_pipeline, variance_basis
from .report import compare


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(suppress: bool = False) -> argparse.ArgumentParser:
    # the subcommand copies must not overwrite flags given before the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS if suppress else None)
    p.add_argument("--config", help="YAML experiment configuration")
    p.add_argument("--seed", type=int, help="experiment seed (overrides the config)")
    p.add_argument("--out", help="run directory (overrides the config)")
    p.add_argument("--data", help="dataset path (overrides data.path)")
    p.add_argument("--force", action="store_true", help="recompute stages even if cached",
                   **({} if suppress else {"default": False}))
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", dest="scale", action="store_const", const="desk")
    scale.add_argument("--paper-scale", dest="scale", action="store_const", const="paper")
    p.add_argument("-v", "--verbose", action="count", **({} if suppress else {"default": 0}))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dimrobust", description=__doc__.splitlines()[0], parents=[_common()])
    common = _common(suppress=True)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    sub.add_parser("ingest", parents=[common], help="load and summarise the dataset")
    sub.add_parser("fit-transform", parents=[common], help="fit the configured transform")
    est = sub.add_parser("estimate-id", parents=[common], help="variance-based intrinsic dimension")
    est.add_argument("--ratio", type=float, action="append", help="target variance ratio (repeatable)")
    est.add_argument("--mode", choices=("feature", "pca"), default=None)
    est.add_argument("--basis", choices=("raw", "normalized"), default=None)
    sub.add_parser("train", parents=[common], help="train the classifier on transformed windows")
    sub.add_parser("attack", parents=[common], help="run the minimum-distortion attack")
    sub.add_parser("sweep", parents=[common], help="print robustness curves")
    sub.add_parser("report", parents=[common], help="run everything and write curves.csv and summary.json")
    cmp_ = sub.add_parser("compare", parents=[common], help="tabulate several finished runs")
    cmp_.add_argument("runs", nargs="+", help="run directories")
    cmp_.add_argument("--baseline", help="run directory to measure Delta against")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config, scale=args.scale, seed=args.seed, out_dir=args.out)
    if args.data:
        cfg = replace(cfg, data=replace(cfg.data, path=args.data))
    return cfg


def _print_json(doc) -> None:
    print(json.dumps(doc, indent=1, sort_keys=True))


def _estimate_id(cfg: ExperimentConfig, args) -> dict:
    t = cfg.transform
    if args.mode or args.basis:
        cfg = replace(cfg, transform=replace(t, id_mode=args.mode or t.id_mode,
                                             variance_basis=args.basis or t.variance_basis))
    p = prepare(cfg)
    X = variance_basis(cfg, p)
    ratios = args.ratio or [cfg.transform.target_ratio]
    return {
        "mode": cfg.transform.id_mode,
        "basis": cfg.transform.variance_basis,
        "features": p.raw.d,
        "intrinsic": {str(r): tf.intrinsic_dimension(X, r, cfg.transform.id_mode) for r in ratios},
    }


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "compare":
        table = compare(args.runs, args.baseline)
        w = csv.writer(sys.stdout)
        w.writerows(table)
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            with open(Path(args.out) / "compare.csv", "w", newline="") as fh:
                csv.writer(fh).writerows(table)
        return 0

    cfg = _config(args)
    if args.command == "estimate-id":
        _print_json(_estimate_id(cfg, args))
        return 0

    stage = {"ingest": "ingest", "fit-transform": "transform", "train": "train",
             "attack": "attack", "sweep": "sweep", "report": "report"}[args.command]
    res = run_pipeline(cfg, force=args.force, until=stage)
    if stage in ("ingest", "transform", "train"):
        doc = json.loads(Path(res.artifacts[stage]).read_text())
        if stage == "train":
            doc = {k: v for k, v in doc["meta"].items() if k != "history"}
        else:
            doc.pop("normalization", None)
        _print_json(doc)
    elif stage == "attack":
        lines = Path(res.artifacts["attack"]).read_text().splitlines()[1:]
        recs = [json.loads(x) for x in lines]
        _print_json({"attacked": len(recs), "successes": sum(r["success"] for r in recs),
                     "failures": sum(r["error"] is not None for r in recs), "log": str(res.artifacts["attack"])})
    elif stage == "sweep":
        s = res.sweep
        w = csv.writer(sys.stdout)
        w.writerow(["epsilon", "success", "accuracy", "log_loss", "precision"])
        for row in zip(s.epsilons, s.success, s.accuracy, s.log_loss, s.precision):
            w.writerow([f"{v:.6g}" for v in row])
    else:
        _print_json(res.summary.to_dict())
    return 0


def main(argv=None) -> int:
    try:
        code = run(argv)
    except DimRobustError as exc:
        print(f"dimrobust: error: {exc}", file=sys.stderr)
        code = exc.exit_code
    except OSError as exc:
        print(f"dimrobust: error: {exc}", file=sys.stderr)
        code = DataError.exit_code
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
