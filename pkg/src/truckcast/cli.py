"""Command line entry point: ``truckcast <stage|pipeline> [options]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from . import config as C
from . import pipeline as P

log = logging.getLogger("truckcast")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="truckcast", description="Grid-level truck activity prediction pipeline.")
    ap.add_argument("command", choices=(*P.STAGES, "pipeline", "show-config"))
    ap.add_argument("--config", type=Path, help="YAML or JSON pipeline config")
    ap.add_argument("--default-fixture", action="store_true", help="use the built-in synthetic fixture config")
    ap.add_argument("--seed", type=int, action="append", help="training seed (repeatable); replaces the config list")
    ap.add_argument("--jobs", type=int, help="worker processes for training")
    ap.add_argument("--horizon", type=int, help="prediction horizon in slots")
    ap.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def resolve_config(args) -> C.PipelineConfig:
    if args.config is not None and args.default_fixture:
        raise C.ConfigError("--config and --default-fixture are exclusive")
    if args.config is not None:
        cfg = C.load(args.config)
    elif args.default_fixture:
        cfg = C.default_fixture()
    else:
        saved = args.out / "config.yaml"
        if not saved.is_file():
            raise C.ConfigError(f"no --config given and no saved config at {saved}")
        cfg = C.load(saved)
    if args.seed:
        cfg.seeds = list(args.seed)
    if args.jobs is not None:
        cfg.jobs = args.jobs
    if args.horizon is not None:
        cfg.features = dataclasses.replace(cfg.features, horizon=args.horizon)
    return C.from_dict(cfg.to_dict())     # re-validate after overrides


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "show-config":
            sys.stdout.write(C.yaml.safe_dump(cfg.to_dict(), sort_keys=True))
            return 0
        if args.command == "pipeline":
            metrics = P.run_pipeline(cfg, args.out)
            print(f"metrics: {metrics}")
        else:
            args.out.mkdir(parents=True, exist_ok=True)
            C.dump(cfg, args.out / "config.yaml")
            for path in P.run_stage(args.command, cfg, args.out):
                print(path)
    except (C.ConfigError, P.StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
