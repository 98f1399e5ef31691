"""Command line entry point: ``dseg <stage> --config cfg.toml`` or ``dseg pipeline``."""
from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, PipelineConfig, dump_config, load_config
from .pipeline import STAGES, Pipeline, StageError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dseg", description="LiDAR-guided unsupervised image segmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("pipeline",):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run every stage")
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--manifest", help="frame manifest (overrides run.manifest)")
        p.add_argument("--out", help="output directory (overrides run.out_dir)")
        p.add_argument("--seed", type=int, help="root seed (overrides run.root_seed)")
    p = sub.add_parser("show-config", help="print the effective configuration")
    p.add_argument("--config")
    return parser


def _effective_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if getattr(args, "manifest", None):
        cfg.run.manifest = args.manifest
    if getattr(args, "out", None):
        cfg.run.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.run.root_seed = args.seed
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
            return 0
        pipe = Pipeline(cfg)
        if args.command == "pipeline":
            report = pipe.run_all()
            miou = "undefined" if report.miou is None else f"{report.miou:.4f}"
            print(f"student mIoU {miou}  PA {report.pixel_accuracy:.4f}  ->  {pipe.art('eval')}")
        else:
            pipe.run(args.command)
    except (ConfigError, StageError) as exc:
        print(f"dseg: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
