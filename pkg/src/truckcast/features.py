"""Spatial dependency matrices, temporal encodings and sliding-window sample sets."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from zoneinfo import ZoneInfo

import numpy as np

from .dtw import fast_dtw
from .gridding import ActivityTensor, ClassTensor, GridSpec, locate_many

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 12
DEFAULT_RADIUS = 1
N_CLASSES = 3


class FeatureError(ValueError):
    pass


@dataclass
class AdjacencyMatrix:
    a: np.ndarray               # [N, N] in {0, 1}
    cell_ids: list
    symmetric: bool = True


@dataclass
class SemanticMatrix:
    d: np.ndarray               # [N, N] >= 0
    cell_ids: list
    radius: int = DEFAULT_RADIUS


@dataclass(frozen=True)
class TemporalEncoding:
    h: int
    w: int


# --------------------------------------------------------------------------
# geographic adjacency from consecutive trajectory points
# --------------------------------------------------------------------------

def cell_transitions(points, grid: GridSpec):
    """Distinct (from_cell, to_cell) pairs between consecutive points of one truck."""
    if len(points) < 2:
        return set()
    lat = np.fromiter((p.lat for p in points), float, len(points))
    lon = np.fromiter((p.lon for p in points), float, len(points))
    cells = locate_many(grid, lat, lon)
    a, b = cells[:-1], cells[1:]
    moved = (a != b) & (a >= 0) & (b >= 0)
    return set(zip(a[moved].tolist(), b[moved].tolist()))


def build_adjacency(trajectories: dict, grid: GridSpec, retained) -> AdjacencyMatrix:
    """Symmetric 0/1 matrix over ``retained`` cells marking Moore neighbors that
    some truck crossed between two successive points.  Cell-skipping moves are ignored."""
    retained = list(retained)
    if not retained:
        raise FeatureError("retained cell set is empty")
    pos = {c: i for i, c in enumerate(retained)}
    a = np.zeros((len(retained), len(retained)), dtype=np.int64)
    for tid in sorted(trajectories):
        for u, v in cell_transitions(trajectories[tid], grid):
            if u in pos and v in pos and grid.are_neighbors(u, v):
                a[pos[u], pos[v]] = a[pos[v], pos[u]] = 1
    if not a.any():
        log.warning("adjacency matrix is all zero: no OD transitions between retained neighbors")
    return AdjacencyMatrix(a, retained)


def neighbor_adjacency(grid: GridSpec, retained) -> AdjacencyMatrix:
    """Plain Moore-neighbor adjacency (no trajectory evidence), for ablations."""
    retained = list(retained)
    a = np.array([[int(grid.are_neighbors(u, v)) for v in retained] for u in retained], dtype=np.int64)
    return AdjacencyMatrix(a.reshape(len(retained), len(retained)), retained)


def normalized_adjacency(a: np.ndarray) -> np.ndarray:
    """Deg^{-1/2} (A + I) Deg^{-1/2}."""
    a_tilde = a.astype(np.float64) + np.eye(a.shape[0])
    d = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return a_tilde * d[:, None] * d[None, :]


# --------------------------------------------------------------------------
# semantic matrix
# --------------------------------------------------------------------------

def build_semantic_matrix(tensor: ActivityTensor, radius=DEFAULT_RADIUS) -> SemanticMatrix:
    n = len(tensor.cell_ids)
    if n < 2:
        raise FeatureError("semantic matrix needs at least 2 cells")
    series = tensor.counts.astype(np.float64)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = fast_dtw(series[i], series[j], radius)
    return SemanticMatrix(d, list(tensor.cell_ids), radius)


def semantic_neighbors(d: np.ndarray, kappa: int) -> np.ndarray:
    """Boolean [N, N]: row i marks its ``kappa`` smallest-distance other cells (ties by index)."""
    n = d.shape[0]
    if kappa >= n:
        raise FeatureError(f"kappa={kappa} must be smaller than the cell count {n}")
    mask = np.zeros((n, n), dtype=bool)
    if kappa <= 0:
        return mask
    for i in range(n):
        others = [j for j in range(n) if j != i]
        order = sorted(others, key=lambda j: (d[i, j], j))
        mask[i, order[:kappa]] = True
    return mask


def save_triplets(path, matrix, cell_ids):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "value"])
        for i, ci in enumerate(cell_ids):
            for j, cj in enumerate(cell_ids):
                v = matrix[i, j]
                if v != 0:
                    w.writerow([ci, cj, repr(float(v)) if isinstance(v, (float, np.floating)) else int(v)])


def load_triplets(path, cell_ids, dtype=np.float64):
    pos = {c: i for i, c in enumerate(cell_ids)}
    m = np.zeros((len(cell_ids), len(cell_ids)), dtype=dtype)
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for i, j, v in reader:
            m[pos[int(i)], pos[int(j)]] = dtype(float(v))
    return m


# --------------------------------------------------------------------------
# temporal encodings
# --------------------------------------------------------------------------

def temporal_encoding(slot: int, t0: float, slot_len: int, tz: str = "UTC") -> TemporalEncoding:
    dt = datetime.fromtimestamp(t0 + slot * slot_len, tz=timezone.utc).astimezone(ZoneInfo(tz))
    return TemporalEncoding(dt.hour, dt.weekday())


def encode_slots(n_slots: int, t0: float, slot_len: int, tz: str = "UTC"):
    enc = [temporal_encoding(s, t0, slot_len, tz) for s in range(n_slots)]
    return (np.array([e.h for e in enc], dtype=np.int64),
            np.array([e.w for e in enc], dtype=np.int64))


# --------------------------------------------------------------------------
# sliding windows
# --------------------------------------------------------------------------

@dataclass
class SampleSet:
    """All (cell, target slot) samples over a label matrix, stored compactly.

    A sample for target slot ``tau`` reads inputs from slots
    ``tau - horizon - k + 1 .. tau - horizon`` of the same cell.
    """
    labels: np.ndarray          # [N, T] class labels
    hours: np.ndarray           # [T]
    weekdays: np.ndarray        # [T]
    k: int
    horizon: int
    cell_ids: list
    targets: np.ndarray         # target slot indices included in this set
    inputs: np.ndarray | None = None  # [N, T, F] model input features; one-hot labels by default
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs is None:
            self.inputs = np.eye(N_CLASSES)[self.labels]

    def __len__(self):
        return len(self.cell_ids) * len(self.targets)

    @property
    def n_cells(self) -> int:
        return len(self.cell_ids)

    @property
    def n_features(self) -> int:
        return self.inputs.shape[-1]

    def with_targets(self, targets) -> "SampleSet":
        return SampleSet(self.labels, self.hours, self.weekdays, self.k, self.horizon,
                         self.cell_ids, np.asarray(targets, dtype=np.int64), self.inputs, dict(self.meta))

    def window_slots(self, targets) -> np.ndarray:
        """[B, k] input slot indices for each target."""
        ends = np.asarray(targets) - self.horizon
        return ends[:, None] + np.arange(-self.k + 1, 1)[None, :]

    def batch(self, targets):
        """Gather model inputs for a batch of target slots.

        Returns dict with x [B, N, k, F], hours [B, k], weekdays [B, k], y [B, N].
        """
        targets = np.asarray(targets, dtype=np.int64)
        slots = self.window_slots(targets)
        x = self.inputs[:, slots]                       # [N, B, k, F]
        return {
            "x": np.ascontiguousarray(np.swapaxes(x, 0, 1)),
            "hours": self.hours[slots],
            "weekdays": self.weekdays[slots],
            "y": self.labels[:, targets].T.copy(),
            "targets": targets,
        }

    def records(self) -> np.ndarray:
        """One int16 row per sample: cell, target, k labels, k hours, k weekdays, target label."""
        slots = self.window_slots(self.targets)
        rows = []
        for b, tau in enumerate(self.targets):
            s = slots[b]
            for i, cell in enumerate(self.cell_ids):
                rows.append(np.concatenate([[cell, tau], self.labels[i, s], self.hours[s],
                                            self.weekdays[s], [self.labels[i, tau]]]))
        return np.array(rows, dtype=np.int16).reshape(len(rows), 3 + 3 * self.k)


def count_inputs(counts: np.ndarray, scale: float | None = None) -> np.ndarray:
    """Raw-count input features (log1p, scaled to roughly unit range), shape [N, T, 1]."""
    f = np.log1p(counts.astype(np.float64))
    scale = scale or max(float(f.max()), 1.0)
    return (f / scale)[..., None]


def make_windows(classes: ClassTensor, k=DEFAULT_WINDOW, horizon=1, tz="UTC", inputs=None) -> SampleSet:
    if k < 1 or horizon < 1:
        raise FeatureError("k and horizon must be >= 1")
    T = classes.n_slots
    if T < k + horizon:
        raise FeatureError(f"need at least k + horizon = {k + horizon} slots, have {T}")
    hours, weekdays = encode_slots(T, classes.t0, classes.slot_len, tz)
    targets = np.arange(k - 1 + horizon, T, dtype=np.int64)
    return SampleSet(classes.labels, hours, weekdays, k, horizon, list(classes.cell_ids), targets,
                     inputs, {"t0": classes.t0, "slot_len": classes.slot_len, "tz": tz})


def split_dataset(samples: SampleSet, train_ratio=0.8, seed=0, chronological=True):
    """Split by target slot.  Chronological (default): earliest slots train.

    The train side gets ``floor(ratio * n)`` target slots, leaving at least one for test.
    """
    if not 0 < train_ratio < 1:
        raise FeatureError("train_ratio must be in (0, 1)")
    targets = np.sort(samples.targets)
    n = len(targets)
    n_train = min(math.floor(train_ratio * n + 1e-9), n - 1)
    if n_train < 1:
        raise FeatureError(f"cannot split {n} target slots at ratio {train_ratio}")
    if chronological:
        train, test = targets[:n_train], targets[n_train:]
    else:
        perm = np.random.default_rng(seed).permutation(n)
        train, test = np.sort(targets[perm[:n_train]]), np.sort(targets[perm[n_train:]])
    return samples.with_targets(train), samples.with_targets(test)


SAMPLE_MAGIC = b"TCSAMPLE"


def write_samples(path, samples: SampleSet):
    """Binary record file: magic, uint32 header length, JSON header, int16 records."""
    recs = samples.records()
    header = {
        "k": samples.k, "horizon": samples.horizon,
        "cell_ids": [int(c) for c in samples.cell_ids],
        "slot_range": [int(samples.targets.min()), int(samples.targets.max())] if len(samples.targets) else [],
        "n_records": int(recs.shape[0]), "record_width": int(recs.shape[1]),
        "layout": "cell,target,labels[k],hours[k],weekdays[k],target_label", "dtype": "<i2",
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with Path(path).open("wb") as fh:
        fh.write(SAMPLE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(recs.astype("<i2").tobytes())


def read_samples(path):
    data = Path(path).read_bytes()
    if not data.startswith(SAMPLE_MAGIC):
        raise FeatureError(f"{path}: not a sample record file")
    off = len(SAMPLE_MAGIC)
    (hlen,) = struct.unpack("<I", data[off:off + 4])
    header = json.loads(data[off + 4:off + 4 + hlen])
    recs = np.frombuffer(data[off + 4 + hlen:], dtype="<i2").reshape(header["n_records"], header["record_width"])
    return header, recs.astype(np.int16)
