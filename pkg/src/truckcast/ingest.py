"""Trajectory CSV parsing and anchor-based stay-point extraction."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, astuple, fields
from datetime import datetime
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_DELTA_M = 200.0
DEFAULT_THETA_S = 600.0
DEFAULT_MAX_GAP_S = 1800.0
MAX_REJECT_FRACTION = 0.10

TRAJECTORY_HEADER = ["truck_id", "timestamp", "lat", "lon"]
STAYPOINT_HEADER = ["truck_id", "t_start", "t_end", "anchor_lat", "anchor_lon",
                    "centroid_lat", "centroid_lon", "n_points"]


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryPoint:
    truck_id: str
    t: float
    lat: float
    lon: float


@dataclass(frozen=True)
class StayPoint:
    truck_id: str
    t_start: float
    t_end: float
    anchor_lat: float
    anchor_lon: float
    centroid_lat: float
    centroid_lon: float
    n_points: int


@dataclass
class ParseReport:
    n_rows: int
    n_points: int
    rejected_rows: list[int]


def haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in meters; works on scalars or numpy arrays."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dlat = p2 - p1
    dlon = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dlat / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def parse_timestamp(text: str) -> float:
    text = text.strip()
    try:
        return float(int(text))
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp without zone: {text!r}")
    return dt.timestamp()


def _parse_row(row):
    if len(row) != 4:
        raise ValueError("expected 4 fields")
    truck, ts, lat, lon = row
    truck = truck.strip()
    if not truck:
        raise ValueError("empty truck_id")
    lat, lon = float(lat), float(lon)
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0) or math.isnan(lat) or math.isnan(lon):
        raise ValueError("coordinate out of range")
    return TrajectoryPoint(truck, parse_timestamp(ts), lat, lon)


def parse_trajectories(path, max_reject_fraction=MAX_REJECT_FRACTION):
    """Read a trajectory CSV into ``{truck_id: [TrajectoryPoint, ...]}`` sorted by time.

    Rows that fail to parse are skipped and their (1-based, header = row 1)
    numbers recorded in the returned :class:`ParseReport`.  More than
    ``max_reject_fraction`` bad rows is a hard failure.
    """
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read trajectory file {path}: {exc}") from exc

    groups: dict[str, list[TrajectoryPoint]] = {}
    rejected = []
    n_rows = 0
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != TRAJECTORY_HEADER:
            raise IngestError(f"{path}: header must be {','.join(TRAJECTORY_HEADER)}, got {header}")
        for rownum, row in enumerate(reader, start=2):
            if not row:
                continue
            n_rows += 1
            try:
                p = _parse_row(row)
            except ValueError:
                rejected.append(rownum)
                continue
            groups.setdefault(p.truck_id, []).append(p)

    if n_rows and len(rejected) > max_reject_fraction * n_rows:
        raise IngestError(
            f"{path}: {len(rejected)} of {n_rows} rows malformed (rows {rejected[:20]}"
            f"{'...' if len(rejected) > 20 else ''})")
    if rejected:
        log.warning("%s: skipped %d malformed rows: %s", path, len(rejected), rejected[:20])

    # stable sort keeps duplicate timestamps in file order
    out = {tid: sorted(pts, key=lambda p: p.t) for tid, pts in sorted(groups.items())}
    report = ParseReport(n_rows, sum(len(v) for v in out.values()), rejected)
    return out, report


def _stay_from_window(truck_id, t, lat, lon, i, j) -> StayPoint:
    return StayPoint(
        truck_id, float(t[i]), float(t[j]), float(lat[i]), float(lon[i]),
        float(np.mean(lat[i:j + 1])), float(np.mean(lon[i:j + 1])), j - i + 1)


def detect_stay_points(points, delta=DEFAULT_DELTA_M, theta=DEFAULT_THETA_S,
                       max_gap=DEFAULT_MAX_GAP_S) -> list[StayPoint]:
    """Anchor-based stay points for one truck's time-sorted points.

    From anchor ``i`` the window grows while each next point stays within
    ``delta`` meters of the anchor and follows its predecessor by at most
    ``max_gap`` seconds.  A window lasting at least ``theta`` seconds becomes a
    stay point and scanning resumes after it; otherwise the anchor advances by one.
    """
    if delta <= 0 or theta <= 0:
        raise ValueError("delta and theta must be positive")
    n = len(points)
    if n < 2:
        return []
    truck_id = points[0].truck_id
    t = np.fromiter((p.t for p in points), float, n)
    lat = np.fromiter((p.lat for p in points), float, n)
    lon = np.fromiter((p.lon for p in points), float, n)
    gap_ok = np.diff(t) <= max_gap if max_gap is not None else np.ones(n - 1, bool)
    # anchors whose very next point already breaks the window can be skipped in bulk;
    # the small slack keeps this a superset so the exact test below decides
    step = haversine(lat[:-1], lon[:-1], lat[1:], lon[1:])
    cand = np.flatnonzero((step <= delta + 1e-6) & gap_ok)

    out = []
    i = 0
    while i < n - 1:
        k = np.searchsorted(cand, i)
        if k == cand.size:
            break
        i = int(cand[k])
        # gallop: check blocks of candidates until the first point that breaks the window
        j = i
        block = 16
        while j < n - 1:
            hi = min(n, j + 1 + block)
            d = haversine(lat[i], lon[i], lat[j + 1:hi], lon[j + 1:hi])
            ok = (d <= delta) & gap_ok[j:hi - 1]
            bad = np.flatnonzero(~ok)
            if bad.size:
                j += int(bad[0])
                break
            j = hi - 1
            block *= 2
        if j > i and t[j] - t[i] >= theta:
            out.append(_stay_from_window(truck_id, t, lat, lon, i, j))
            i = j + 1
        else:
            i += 1
    return out


def detect_all(groups: dict, delta=DEFAULT_DELTA_M, theta=DEFAULT_THETA_S,
               max_gap=DEFAULT_MAX_GAP_S) -> list[StayPoint]:
    out = []
    for tid in sorted(groups):
        out.extend(detect_stay_points(groups[tid], delta, theta, max_gap))
    return out


def write_trajectories(path, points):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for p in points:
            w.writerow([p.truck_id, int(p.t), f"{p.lat:.7f}", f"{p.lon:.7f}"])


def write_staypoints(path, stays):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STAYPOINT_HEADER)
        for s in stays:
            w.writerow([repr(v) if isinstance(v, float) else v for v in astuple(s)])


def read_staypoints(path) -> list[StayPoint]:
    types = [f.type for f in fields(StayPoint)]
    conv = {"str": str, "float": float, "int": int}
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != STAYPOINT_HEADER:
            raise IngestError(f"{path}: unexpected stay-point header {header}")
        for row in reader:
            out.append(StayPoint(*(conv[tp](v) for tp, v in zip(types, row))))
    return out
