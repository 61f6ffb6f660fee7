"""``m2d`` command line: gen-data, train, convert, evaluate, score.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from m2d import io, pipeline
from m2d.config import ConfigError, load_config

logger = logging.getLogger("m2d")


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", type=Path, required=config_required, help="YAML run configuration")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--out", type=Path, default=Path("run"), help="output directory (default: run)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config value, e.g. detector.steps=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2d", description="Convert a trained classifier into an OOD detector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or ingest data and write seeded splits")
    _common(p)

    p = sub.add_parser("train", help="train the classifier")
    _common(p)

    p = sub.add_parser("convert", help="retrain an encoder copy and fit Gaussian heads")
    _common(p)
    p.add_argument("--model", type=Path, help="classifier file (default: OUT/classifier.m2d)")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--no-retrain", action="store_true", help="heads on the untouched classifier prefix")
    mode.add_argument("--vanilla-ae", action="store_true", help="retrain from an untrained copy")

    p = sub.add_parser("evaluate", help="score in/out test sets and write reports")
    _common(p)
    p.add_argument("--model", type=Path, help="classifier file (default: OUT/classifier.m2d)")
    p.add_argument("--bundle", type=Path, help="use this bundle for the m2d method instead of the steps grid")

    p = sub.add_parser("score", help="per-sample confidence and verdict")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="CSV file, header row, one sample per row")
    p.add_argument("--threshold", type=float, help="verdict threshold (default: the bundle's)")
    p.add_argument("--output", type=Path, help="write lines here instead of stdout")
    return parser


def _load(args):
    return load_config(args.config, args.overrides, args.seed)


def _run(args) -> int:
    if args.command == "score":
        for path in (args.bundle, args.input):
            if not path.exists():
                raise ConfigError(f"file not found: {path}")
        bundle = io.load_bundle(args.bundle)
        threshold = args.threshold if args.threshold is not None else bundle.threshold
        if threshold is None:
            raise ConfigError("no --threshold given and the bundle stores none")
        x = pipeline.read_inputs(args.input, bundle)
        lines = pipeline.score_lines(bundle, x, threshold)
        text = "".join(line + "\n" for line in lines)
        if args.output:
            io.atomic_write(args.output, text)
        else:
            sys.stdout.write(text)
        return 0

    cfg = _load(args)
    out = args.out
    if args.command == "gen-data":
        pipeline.generate_data(cfg, out)
    elif args.command == "train":
        metrics = pipeline.cmd_train(cfg, out)
        print(f"train_accuracy={metrics['train_accuracy']:.6f} test_accuracy={metrics['test_accuracy']:.6f}")
    elif args.command == "convert":
        model = args.model or out / "classifier.m2d"
        if not model.exists():
            raise ConfigError(f"classifier file not found: {model}")
        mode = "no-retrain" if args.no_retrain else "vanilla-ae" if args.vanilla_ae else "retrain"
        path = pipeline.cmd_convert(cfg, out, model, mode)
        print(f"bundle={path}")
    elif args.command == "evaluate":
        model = args.model or out / "classifier.m2d"
        if not model.exists():
            raise ConfigError(f"classifier file not found: {model}")
        if args.bundle is not None and not args.bundle.exists():
            raise ConfigError(f"bundle file not found: {args.bundle}")
        reports = pipeline.cmd_evaluate(cfg, out, model, args.bundle)
        for r in reports:
            status = "" if r.ok else f" error={r.error!r}"
            print(f"method={r.method} steps={r.steps} auroc={r.auroc:.6f} det_acc={r.detection_accuracy:.6f}{status}")
        if any(not r.ok for r in reports):
            return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="level=%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"m2d: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        logger.debug("traceback", exc_info=True)
        print(f"m2d: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
