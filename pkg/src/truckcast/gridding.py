"""Space/time tessellation, stay-point counting, spatial downsampling and labeling."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

M_PER_DEG_LAT = 111_320.0
DEFAULT_CELL_M = 1000.0
DEFAULT_SLOT_S = 1800
OUTSIDE = -1
EDGE_EPS = 1e-9      # in cell units; absorbs float error so points on an edge go to the higher cell
DEFAULT_MEDIUM_BOUND = 4


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float
    origin_lon: float
    cell_size: float
    n_rows: int
    n_cols: int
    ref_lat: float

    @property
    def n_cells(self) -> int:
        return self.n_rows * self.n_cols

    @property
    def m_per_deg_lon(self) -> float:
        return M_PER_DEG_LAT * math.cos(math.radians(self.ref_lat))

    def row_col(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.n_cols)

    def cell_bounds(self, cell: int) -> tuple[float, float, float, float]:
        """(lat_min, lon_min, lat_max, lon_max) of a cell."""
        r, c = self.row_col(cell)
        dlat = self.cell_size / M_PER_DEG_LAT
        dlon = self.cell_size / self.m_per_deg_lon
        return (self.origin_lat + r * dlat, self.origin_lon + c * dlon,
                self.origin_lat + (r + 1) * dlat, self.origin_lon + (c + 1) * dlon)

    def cell_center(self, cell: int) -> tuple[float, float]:
        a, b, c, d = self.cell_bounds(cell)
        return (a + c) / 2, (b + d) / 2

    def neighbors(self, cell: int) -> list[int]:
        """Moore (8-connected) neighbors, truncated at the grid edge."""
        r, c = self.row_col(cell)
        out = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                if (dr or dc) and 0 <= r + dr < self.n_rows and 0 <= c + dc < self.n_cols:
                    out.append((r + dr) * self.n_cols + c + dc)
        return out

    def are_neighbors(self, a: int, b: int) -> bool:
        (ra, ca), (rb, cb) = self.row_col(a), self.row_col(b)
        return a != b and abs(ra - rb) <= 1 and abs(ca - cb) <= 1


@dataclass
class ActivityTensor:
    counts: np.ndarray          # [cell, slot] int
    t0: float
    slot_len: int = DEFAULT_SLOT_S
    cell_ids: list = field(default_factory=list)
    dropped: int = 0            # stay points outside the time range or grid

    @property
    def n_slots(self) -> int:
        return self.counts.shape[1]

    def subset(self, cells) -> "ActivityTensor":
        pos = {c: i for i, c in enumerate(self.cell_ids)}
        rows = [pos[c] for c in cells]
        return ActivityTensor(self.counts[rows].copy(), self.t0, self.slot_len, list(cells), self.dropped)


@dataclass
class ClassTensor:
    labels: np.ndarray          # [cell, slot] in {0,1,2}
    thresholds: tuple = (0, DEFAULT_MEDIUM_BOUND)
    t0: float = 0.0
    slot_len: int = DEFAULT_SLOT_S
    cell_ids: list = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return self.labels.shape[1]


def build_grid(bbox, cell_size=DEFAULT_CELL_M) -> GridSpec:
    lat_min, lon_min, lat_max, lon_max = bbox
    if cell_size <= 0:
        raise GridError("cell_size must be positive")
    if not lat_max > lat_min:
        raise GridError(f"degenerate latitude extent {lat_min}..{lat_max}")
    if not lon_max > lon_min:
        raise GridError(f"degenerate or antimeridian-spanning longitude extent {lon_min}..{lon_max}")
    ref_lat = (lat_min + lat_max) / 2
    height = (lat_max - lat_min) * M_PER_DEG_LAT
    width = (lon_max - lon_min) * M_PER_DEG_LAT * math.cos(math.radians(ref_lat))
    # tolerance keeps an exact multiple of cell_size from gaining a sliver row
    n_rows = max(1, math.ceil(height / cell_size - 1e-9))
    n_cols = max(1, math.ceil(width / cell_size - 1e-9))
    return GridSpec(lat_min, lon_min, float(cell_size), n_rows, n_cols, ref_lat)


def bbox_from_meters(origin_lat, origin_lon, height_m, width_m):
    """South-west corner plus extent in meters -> bbox under the grid's convention."""
    ref = origin_lat + height_m / M_PER_DEG_LAT / 2
    return (origin_lat, origin_lon, origin_lat + height_m / M_PER_DEG_LAT,
            origin_lon + width_m / (M_PER_DEG_LAT * math.cos(math.radians(ref))))


def locate_rc(grid: GridSpec, lat, lon):
    row = math.floor((lat - grid.origin_lat) * M_PER_DEG_LAT / grid.cell_size + EDGE_EPS)
    col = math.floor((lon - grid.origin_lon) * grid.m_per_deg_lon / grid.cell_size + EDGE_EPS)
    return row, col


def locate(grid: GridSpec, lat, lon) -> int:
    row, col = locate_rc(grid, lat, lon)
    if 0 <= row < grid.n_rows and 0 <= col < grid.n_cols:
        return row * grid.n_cols + col
    return OUTSIDE


def locate_many(grid: GridSpec, lat, lon) -> np.ndarray:
    lat, lon = np.asarray(lat, float), np.asarray(lon, float)
    row = np.floor((lat - grid.origin_lat) * M_PER_DEG_LAT / grid.cell_size + EDGE_EPS).astype(np.int64)
    col = np.floor((lon - grid.origin_lon) * grid.m_per_deg_lon / grid.cell_size + EDGE_EPS).astype(np.int64)
    inside = (row >= 0) & (row < grid.n_rows) & (col >= 0) & (col < grid.n_cols)
    return np.where(inside, row * grid.n_cols + col, OUTSIDE)


def slot_range(t_start, t_end, t0, slot_len):
    """Slots overlapped by the half-open interval [t_start, t_end)."""
    first = math.floor((t_start - t0) / slot_len)
    last = math.ceil((t_end - t0) / slot_len) - 1
    return first, max(first, last)


def count_activity(staypoints, grid: GridSpec, slot_len=DEFAULT_SLOT_S, t0=0.0,
                   horizon_slots=1) -> ActivityTensor:
    """Per-cell, per-slot count of distinct trucks with a stay point there.

    A stay point is attributed to its anchor's cell and counts in every slot
    its interval overlaps; one truck adds at most 1 to any cell-slot.
    """
    if horizon_slots < 1:
        raise GridError("horizon_slots must be >= 1")
    hits = set()
    dropped = 0
    for sp in staypoints:
        cell = locate(grid, sp.anchor_lat, sp.anchor_lon)
        first, last = slot_range(sp.t_start, sp.t_end, t0, slot_len)
        first, last = max(first, 0), min(last, horizon_slots - 1)
        if cell == OUTSIDE or first > last:
            dropped += 1
            continue
        for s in range(first, last + 1):
            hits.add((sp.truck_id, cell, s))
    counts = np.zeros((grid.n_cells, horizon_slots), dtype=np.int64)
    for _, cell, s in hits:
        counts[cell, s] += 1
    if dropped:
        log.info("dropped %d stay points outside the grid or time range", dropped)
    return ActivityTensor(counts, float(t0), int(slot_len), list(range(grid.n_cells)), dropped)


def downsample_grids(tensor: ActivityTensor, keep_fraction=0.25):
    """Keep the busiest cells by mean count over all slots.

    Cells with zero mean are dropped; of the rest the top ``keep_fraction``
    survive, along with anything tied at the cut.  Returns
    ``(retained_cell_ids, threshold)`` where threshold is the lowest retained mean.
    """
    if not 0 < keep_fraction <= 1:
        raise GridError("keep_fraction must be in (0, 1]")
    means = tensor.counts.mean(axis=1)
    positive = np.flatnonzero(means > 0)
    if positive.size == 0:
        raise GridError("nothing to retain: all cells have zero activity")
    n_keep = max(1, math.ceil(keep_fraction * positive.size - 1e-9))
    ordered = np.sort(means[positive])[::-1]
    tau = float(ordered[n_keep - 1])
    retained = [tensor.cell_ids[i] for i in positive if means[i] >= tau]
    return retained, tau


def derive_class_thresholds(tensor: ActivityTensor, top_fraction=0.10) -> int:
    """Smallest integer bound b with at most ``top_fraction`` of positive counts above b."""
    if not 0 < top_fraction < 1:
        raise GridError("top_fraction must be in (0, 1)")
    pos = tensor.counts[tensor.counts > 0]
    if pos.size == 0:
        raise GridError("no positive counts to derive thresholds from")
    values = np.sort(pos)
    b = 1
    while np.count_nonzero(values > b) > top_fraction * values.size + 1e-9:
        b += 1
    return b


def label_classes(tensor: ActivityTensor, medium_bound=DEFAULT_MEDIUM_BOUND) -> ClassTensor:
    if medium_bound < 1:
        raise GridError("medium_bound must be >= 1")
    v = tensor.counts
    labels = np.where(v == 0, 0, np.where(v <= medium_bound, 1, 2)).astype(np.int64)
    return ClassTensor(labels, (0, int(medium_bound)), tensor.t0, tensor.slot_len, list(tensor.cell_ids))


def save_long(path, matrix, cell_ids, meta: dict):
    """CSV ``cell_id,slot,value`` plus a JSON sidecar next to it."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "slot", "value"])
        for i, cell in enumerate(cell_ids):
            for s, v in enumerate(matrix[i]):
                w.writerow([cell, s, int(v)])
    meta = dict(meta, cell_ids=[int(c) for c in cell_ids], n_slots=int(matrix.shape[1]))
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_long(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    pos = {c: i for i, c in enumerate(meta["cell_ids"])}
    matrix = np.zeros((len(pos), meta["n_slots"]), dtype=np.int64)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for cell, slot, v in reader:
            matrix[pos[int(cell)], int(slot)] = int(v)
    return matrix, meta


def save_activity(path, tensor: ActivityTensor, grid: GridSpec):
    save_long(path, tensor.counts, tensor.cell_ids,
              {"grid": asdict(grid), "t0": tensor.t0, "slot_len": tensor.slot_len,
               "dropped": tensor.dropped})


def load_activity(path):
    counts, meta = load_long(path)
    grid = GridSpec(**meta["grid"])
    return ActivityTensor(counts, meta["t0"], meta["slot_len"], meta["cell_ids"], meta.get("dropped", 0)), grid


def save_classes(path, classes: ClassTensor, grid: GridSpec):
    save_long(path, classes.labels, classes.cell_ids,
              {"grid": asdict(grid), "t0": classes.t0, "slot_len": classes.slot_len,
               "thresholds": list(classes.thresholds)})


def load_classes(path):
    labels, meta = load_long(path)
    grid = GridSpec(**meta["grid"])
    return ClassTensor(labels, tuple(meta["thresholds"]), meta["t0"], meta["slot_len"], meta["cell_ids"]), grid
