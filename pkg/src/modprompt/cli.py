"""Command-line entry point: ``modprompt <command> --config <toml> --out <dir>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment
from .config import ConfigError, load_config
from .report import ReportError, write_report


def _generate(cfg, out):
    src, tgt = experiment.generate_data(cfg)
    print(f"source data: {src}\ntarget data: {tgt}")


def _pretrain(cfg, out):
    print(experiment.pretrain_phase(cfg, out))


def _adapt(cfg, out):
    for path in experiment.adapt_phase(cfg, out):
        print(path)


def _evaluate(cfg, out):
    for rec in experiment.evaluate_phase(cfg, out):
        r = rec.ap_report
        print(f"{rec.strategy:20s} seed {rec.seed}: AP50 {r['ap50']:.4f}  AP75 {r['ap75']:.4f}  AP {r['ap']:.4f}")


def _run(cfg, out):
    experiment.run_experiment(None, out, cfg)
    print((Path(out) / "report.md").read_text())


COMMANDS = {
    "generate-data": _generate,
    "pretrain": _pretrain,
    "adapt": _adapt,
    "evaluate": _evaluate,
    "run": _run,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="modprompt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
    p = sub.add_parser("report", help="rebuild report.md / report.csv from the records under --out")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "report":
            md, _ = write_report(args.out)
            print(md.read_text())
            return 0
        cfg = load_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, args.out)
    except (ConfigError, ReportError, experiment.ExperimentError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
