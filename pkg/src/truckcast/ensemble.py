"""Weighted soft voting over base-model probability outputs."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODEL_ORDER = ("birnn", "tcn", "stgcn_lite", "pdformer_lite")
DEFAULT_MODEL_WEIGHTS = (1.1, 1.1, 0.5, 1.3)


class EnsembleError(ValueError):
    pass


@dataclass
class EnsembleConfig:
    weights: tuple = DEFAULT_MODEL_WEIGHTS

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if min(self.weights) < 0 or max(self.weights) <= 0:
            raise EnsembleError("weights must be non-negative with at least one positive")


def soft_vote(probs, config: EnsembleConfig = EnsembleConfig()) -> np.ndarray:
    """Weighted sum of per-model probability rows divided by the total weight.

    Inputs are simplex rows, so the result is one too.
    """
    probs = [np.asarray(p, dtype=np.float64) for p in probs]
    if len(probs) != len(config.weights):
        raise EnsembleError(f"{len(probs)} model outputs for {len(config.weights)} weights")
    if len({p.shape for p in probs}) != 1:
        raise EnsembleError(f"misaligned model outputs: {[p.shape for p in probs]}")
    fused = sum(w * p for w, p in zip(config.weights, probs))
    return fused / sum(config.weights)


def predict(fused) -> np.ndarray:
    """Argmax per row; exact ties go to the higher class."""
    fused = np.asarray(fused)
    n = fused.shape[-1]
    return (n - 1 - np.argmax(fused[..., ::-1], axis=-1)).astype(np.int64)


def write_predictions(path, fused, pred, true, cell_ids, slots):
    """CSV ``cell_id,slot,p0,p1,p2,pred,true``; arrays are [slots, N(, 3)]."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "slot", "p0", "p1", "p2", "pred", "true"])
        for b, slot in enumerate(slots):
            for i, cell in enumerate(cell_ids):
                p = fused[b, i]
                w.writerow([cell, int(slot), repr(float(p[0])), repr(float(p[1])), repr(float(p[2])),
                            int(pred[b, i]), int(true[b, i])])


def read_predictions(path):
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        for r in reader:
            rows.append((int(r["cell_id"]), int(r["slot"]), float(r["p0"]), float(r["p1"]), float(r["p2"]),
                         int(r["pred"]), int(r["true"])))
    return rows
