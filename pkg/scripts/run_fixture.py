#!/usr/bin/env python3
"""Run the full pipeline on the synthetic fixture and print the report.

    python3 scripts/run_fixture.py --out runs/fixture --seeds 10
"""
import argparse
import logging
import time
from pathlib import Path

from truckcast import config as C, pipeline as P


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/fixture"))
    ap.add_argument("--seeds", type=int, default=10, help="number of training seeds (0..n-1)")
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--world-seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = C.default_fixture(seeds=list(range(args.seeds)), jobs=args.jobs)
    cfg.synth.seed = args.world_seed
    t = time.perf_counter()
    P.run_pipeline(cfg, args.out)
    print((args.out / "report" / "report.md").read_text())
    print(f"elapsed {time.perf_counter() - t:.0f} s; artifacts in {args.out}")


if __name__ == "__main__":
    main()
