"""``rdiv <experiment> --config <path>``: run one experiment, write its CSV and manifest.

Errors exit nonzero after printing ``error: <category>: <message>`` to stderr.
"""
import argparse
import dataclasses
import sys
import time
from pathlib import Path

from ..errors import RdivError
from .config import EXPERIMENTS, parse_config, to_dict, validate
from .experiments import RUNNERS
from .report import write_csv, write_manifest

EXIT_ERROR = 1
EXIT_USAGE = 2


def build_parser():
    parser = argparse.ArgumentParser(prog="rdiv", description="Regularized DeepIV experiments")
    parser.add_argument("experiment", choices=EXPERIMENTS)
    parser.add_argument("--config", required=True, help="YAML experiment config")
    parser.add_argument("--seed", type=int, help="override the master seed")
    parser.add_argument("--out", help="override the CSV output path")
    parser.add_argument("--threads", type=int, help="worker processes (1 = in-process)")
    parser.add_argument("--replications", type=int, help="override the replication count")
    return parser


def manifest_path(csv_path):
    return Path(csv_path).with_suffix(".json")


def resolve(args):
    """Load the config and apply command-line overrides."""
    cfg = parse_config(args.config)
    if cfg.experiment != args.experiment:
        # the subcommand names the experiment; the file may be shared across them
        cfg = dataclasses.replace(cfg, experiment=args.experiment)
    overrides = {name: getattr(args, key) for key, name in
                 (("seed", "seed"), ("out", "output_path"), ("threads", "threads"),
                  ("replications", "replications")) if getattr(args, key) is not None}
    return validate(dataclasses.replace(cfg, **overrides))


def run(cfg):
    start = time.perf_counter()
    extra = {}
    if cfg.experiment == "select":
        reports = []
        rows = RUNNERS["select"](cfg, reports=reports)
        extra["selection"] = reports
    elif cfg.experiment == "rate-study":
        summary = []
        rows = RUNNERS["rate-study"](cfg, summary=summary)
        extra["rate_study"] = dataclasses.asdict(summary[0])
    else:
        rows = RUNNERS[cfg.experiment](cfg)
    wall = time.perf_counter() - start
    out = Path(cfg.output_path)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    write_csv(rows, out)
    write_manifest(manifest_path(out), to_dict(cfg), wall if cfg.record_timing else 0.0, rows, extra)
    return rows


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
        rows = run(cfg)
    except RdivError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return EXIT_ERROR
    failed = sum(1 for r in rows if r.status != "ok")
    print(f"{cfg.experiment}: {len(rows)} rows ({failed} failed) -> {cfg.output_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
