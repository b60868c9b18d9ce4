"""Classification metrics, cross-seed aggregation and the one-hop relaxed high-activity criterion."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_CLASSES = 3
CLASS_NAMES = ("none", "medium", "high")


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    precision: list
    recall: list
    f1: list
    macro_f1: float
    std: dict = field(default_factory=dict)   # metric name -> per-class list or scalar
    n_runs: int = 1
    std_kind: str = ""

    def to_dict(self) -> dict:
        d = {
            "precision": [float(v) for v in self.precision],
            "recall": [float(v) for v in self.recall],
            "f1": [float(v) for v in self.f1],
            "macro_f1": float(self.macro_f1),
            "n_runs": self.n_runs,
        }
        if self.std:
            d["std"] = self.std
            d["std_kind"] = self.std_kind
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(d["precision"], d["recall"], d["f1"], d["macro_f1"], d.get("std", {}),
                   d.get("n_runs", 1), d.get("std_kind", ""))


def confusion_matrix(pred, true, n_classes=N_CLASSES) -> np.ndarray:
    """counts[true, pred]."""
    pred = np.asarray(pred, dtype=np.int64).ravel()
    true = np.asarray(true, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise MetricsError(f"length mismatch: {pred.size} predictions vs {true.size} labels")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _safe_div(a, b):
    return a / b if b else 0.0


def prf(cm) -> MetricsReport:
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(float)
    col = cm.sum(axis=0)
    row = cm.sum(axis=1)
    precision = [_safe_div(tp[c], col[c]) for c in range(len(tp))]
    recall = [_safe_div(tp[c], row[c]) for c in range(len(tp))]
    f1 = [_safe_div(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return MetricsReport(precision, recall, f1, float(np.mean(f1)))


def aggregate_seeds(reports) -> MetricsReport:
    """Mean and sample (n-1) standard deviation of every metric across runs."""
    reports = list(reports)
    if len(reports) < 2:
        raise MetricsError("aggregation needs at least two reports")
    sizes = {len(r.f1) for r in reports}
    if len(sizes) != 1:
        raise MetricsError("reports cover different class sets")
    out = {}
    std = {}
    for name in ("precision", "recall", "f1"):
        arr = np.array([getattr(r, name) for r in reports], dtype=float)
        out[name] = arr.mean(axis=0).tolist()
        std[name] = (arr - arr[0]).std(axis=0, ddof=1).tolist()   # shifted: identical runs give exactly 0
    macro = np.array([r.macro_f1 for r in reports], dtype=float)
    std["macro_f1"] = float((macro - macro[0]).std(ddof=1))
    return MetricsReport(out["precision"], out["recall"], out["f1"], float(macro.mean()),
                         std, len(reports), "sample (n-1)")


@dataclass
class BinaryScores:
    precision: float
    recall: float
    f1: float

    def to_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def _binary(tp_p, n_p, tp_r, n_r) -> BinaryScores:
    p = _safe_div(tp_p, n_p)
    r = _safe_div(tp_r, n_r)
    return BinaryScores(p, r, _safe_div(2 * p * r, p + r))


def strict_high_activity(pred, true) -> BinaryScores:
    pred_hi = np.asarray(pred) == 2
    true_hi = np.asarray(true) == 2
    tp = int(np.count_nonzero(pred_hi & true_hi))
    return _binary(tp, int(pred_hi.sum()), tp, int(true_hi.sum()))


def neighborhood_matrix(grid, cell_ids) -> np.ndarray:
    """Boolean [N, N]: self plus Moore neighbors among ``cell_ids`` (edges truncated)."""
    pos = {c: i for i, c in enumerate(cell_ids)}
    m = np.eye(len(cell_ids), dtype=bool)
    for i, c in enumerate(cell_ids):
        if not 0 <= c < grid.n_cells:
            raise MetricsError(f"cell {c} is not on the grid")
        for nb in grid.neighbors(c):
            j = pos.get(nb)
            if j is not None:
                m[i, j] = True
    return m


def relaxed_high_activity(pred, true, grid, cell_ids) -> BinaryScores:
    """High-class precision/recall/F1 where one-hop spatial misses are forgiven.

    ``pred``/``true`` are [slots, N] over ``cell_ids``.  A predicted-high cell
    is correct when it or a Moore neighbor is truly high in the same slot; a
    truly-high cell is recalled when it or a neighbor is predicted high.
    """
    pred = np.atleast_2d(np.asarray(pred))
    true = np.atleast_2d(np.asarray(true))
    if pred.shape != true.shape or pred.shape[-1] != len(cell_ids):
        raise MetricsError(f"shape mismatch: pred {pred.shape}, true {true.shape}, {len(cell_ids)} cells")
    hood = neighborhood_matrix(grid, cell_ids).astype(np.int64)
    pred_hi = (pred == 2).astype(np.int64)
    true_hi = (true == 2).astype(np.int64)
    near_true = (true_hi @ hood) > 0       # hood is symmetric
    near_pred = (pred_hi @ hood) > 0
    tp_p = int(np.count_nonzero(pred_hi.astype(bool) & near_true))
    tp_r = int(np.count_nonzero(true_hi.astype(bool) & near_pred))
    return _binary(tp_p, int(pred_hi.sum()), tp_r, int(true_hi.sum()))


def majority_baseline(train_labels, n_test) -> np.ndarray:
    values, counts = np.unique(np.asarray(train_labels).ravel(), return_counts=True)
    return np.full(n_test, values[np.argmax(counts)], dtype=np.int64)


def horizon_sweep(run_fn, horizons=(1, 2, 3, 4)) -> dict:
    """``run_fn(horizon) -> dict`` of reports; collects one entry per horizon."""
    return {int(h): run_fn(int(h)) for h in horizons}


def write_confusion(path, cm):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred"] + [str(c) for c in range(len(cm))])
        for c, row in enumerate(cm):
            w.writerow([c] + [int(v) for v in row])


def write_report_csv(path, reports: dict):
    """Flat CSV: name,metric,class,value."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "metric", "class", "value"])
        for name, rep in reports.items():
            for metric in ("precision", "recall", "f1"):
                for c, v in enumerate(getattr(rep, metric)):
                    w.writerow([name, metric, c, repr(float(v))])
            w.writerow([name, "macro_f1", "", repr(float(rep.macro_f1))])


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
