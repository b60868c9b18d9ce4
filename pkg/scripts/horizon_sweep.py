#!/usr/bin/env python3
"""Prediction horizon sweep (1..4 slots ahead) on the synthetic fixture.

Shares the synth and ingest outputs of ``--base`` and retrains every model per
horizon with the same seeds.
"""
import argparse
import dataclasses
import json
import logging
import shutil
from pathlib import Path

from truckcast import config as C, evaluation as V, pipeline as P


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", type=Path, default=Path("runs/fixture"))
    ap.add_argument("--out", type=Path, default=Path("runs/horizons"))
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--horizons", type=int, nargs="+", default=[1, 2, 3, 4])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base = C.default_fixture(seeds=list(range(args.seeds)))
    if not (args.base / "ingest" / "staypoints.csv").exists():
        for stage in ("synth", "ingest"):
            P.run_stage(stage, base, args.base)

    def run(h):
        cfg = C.from_dict(base.to_dict())
        cfg.features = dataclasses.replace(cfg.features, horizon=h)
        out = args.out / f"h{h}"
        out.mkdir(parents=True, exist_ok=True)
        for d in ("data", "ingest"):
            if not (out / d).exists():
                shutil.copytree(args.base / d, out / d)
        C.dump(cfg, out / "config.yaml")
        for stage in ("features", "train", "predict", "evaluate"):
            P.run_stage(stage, cfg, out)
        m = json.loads((out / "eval" / "metrics.json").read_text())
        return {"macro_f1": m["models"]["ensemble"]["macro_f1"],
                "macro_f1_std": m["models"]["ensemble"].get("std", {}).get("macro_f1"),
                "high_strict": m["high_activity"]["strict"], "high_relaxed": m["high_activity"]["relaxed"]}

    sweep = V.horizon_sweep(run, args.horizons)
    print(f"{'horizon':>7} {'hours':>5} {'macro F1':>9} {'high F1':>8} {'relaxed':>8}")
    for h, r in sweep.items():
        print(f"{h:>7} {h * 0.5:>5.1f} {r['macro_f1']:>9.4f} {r['high_strict']['f1']:>8.4f} "
              f"{r['high_relaxed']['f1']:>8.4f}")
    (args.out / "summary.json").write_text(json.dumps(sweep, indent=2) + "\n")


if __name__ == "__main__":
    main()
