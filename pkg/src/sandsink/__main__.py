"""Command line entry point: ``python -m sandsink {run,list,validate,export-matrix}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness


def _load(arg):
    path = Path(arg)
    if not path.exists() and arg in harness.DEFAULTS:
        return harness.ExperimentConfig.from_dict({"experiment": arg})
    return harness.ExperimentConfig.load(path)


def main(argv=None):
    ap = argparse.ArgumentParser(prog="sandsink", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    for name, text in [("run", "run an experiment config"),
                       ("validate", "check a config without running it"),
                       ("export-matrix", "write edge lists and toppling matrices of a config")]:
        p = sub.add_parser(name, help=text)
        p.add_argument("config", help="YAML config path or a bare experiment id")
    sub.add_parser("list", help="show the experiment catalog")
    args = ap.parse_args(argv)

    if args.cmd == "list":
        for e in harness.list_experiments():
            print(f"{e.id:<10} {e.anchor}\n{'':<10} {e.description}")
        for k, v in harness.AUXILIARY.items():
            print(f"{k:<10} {v}")
        return 0
    try:
        cfg = _load(args.config)
        if args.cmd == "validate":
            harness.validate(cfg)
            print(f"{args.config}: ok")
            return 0
        if args.cmd == "export-matrix":
            for path in harness.export_matrix(cfg):
                print(path)
            return 0
        report = harness.run(cfg)
    except (harness.ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    sys.stdout.write((report.out_dir / "summary.txt").read_text())
    print(f"status: {report.status}  ({report.wall_time:.1f} s)  -> {report.out_dir}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
