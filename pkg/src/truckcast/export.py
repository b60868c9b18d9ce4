"""GeoJSON map layer for predicted vs true activity, and training-history CSV."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .gridding import GridSpec

HISTORY_HEADER = ["epoch", "train_loss", "val_loss", "val_macro_f1"]


def cell_ring(grid: GridSpec, cell: int) -> list:
    """Closed counter-clockwise ring of [lon, lat] pairs (5 points)."""
    lat0, lon0, lat1, lon1 = grid.cell_bounds(cell)
    return [[lon0, lat0], [lon1, lat0], [lon1, lat1], [lon0, lat1], [lon0, lat0]]


def export_geojson(path, grid: GridSpec, cell_ids, slots, fused, pred, true):
    """One polygon feature per (slot, cell).

    ``fused`` is [slots, N, 3]; ``pred`` and ``true`` are [slots, N].
    """
    fused, pred, true = np.asarray(fused), np.asarray(pred), np.asarray(true)
    rings = {c: cell_ring(grid, c) for c in cell_ids}
    features = []
    for b, slot in enumerate(slots):
        for i, cell in enumerate(cell_ids):
            p = fused[b, i]
            features.append({
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [rings[cell]]},
                "properties": {
                    "cell_id": int(cell), "slot": int(slot),
                    "pred_class": int(pred[b, i]), "true_class": int(true[b, i]),
                    "p0": float(p[0]), "p1": float(p[1]), "p2": float(p[2]),
                },
            })
    Path(path).write_text(json.dumps({"type": "FeatureCollection", "features": features}) + "\n")
    return len(features)


def read_geojson(path) -> list:
    """Properties of every feature, in file order."""
    data = json.loads(Path(path).read_text())
    return [f["properties"] for f in data["features"]]


def write_history(path, history):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for h in history:
            w.writerow([h["epoch"]] + [repr(float(h[k])) for k in HISTORY_HEADER[1:]])


def read_history(path):
    with Path(path).open(newline="") as fh:
        return [{"epoch": int(r["epoch"]), **{k: float(r[k]) for k in HISTORY_HEADER[1:]}}
                for r in csv.DictReader(fh)]
