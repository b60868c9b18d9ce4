"""Synthetic truck fleets with planted site imbalance and daily/weekly rhythm.

Each truck repeatedly picks a site, drives there in a straight line (a GPS
fix every 30 s, jittered by at most 20 m), dwells inside a 50 m disc around
the site, and moves on.  How many trucks are on duty follows the daily and
weekly profiles; an off-duty truck goes dark for an hour, so outages never
look like dwells.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.special import gammaincc

from .gridding import M_PER_DEG_LAT, DEFAULT_CELL_M, DEFAULT_SLOT_S, bbox_from_meters, build_grid
from .ingest import DEFAULT_THETA_S, TRAJECTORY_HEADER, TrajectoryPoint

CADENCE_S = 30
JITTER_M = 20.0
DWELL_RADIUS_M = 50.0
OFF_DUTY_S = 3600
SITE_MARGIN_M = 250.0     # keeps the dwell disc and approach fixes inside the site's cell

# Work 08:00-16:00 with a lunch dip; quiet otherwise.
DEFAULT_DAILY = (0, 0, 0, 0, 0, 0, 0, 0, 1.0, 1.0, 1.0, 1.0,
                 0.5, 1.0, 1.0, 1.0, 0, 0, 0, 0, 0, 0, 0, 0)
DEFAULT_WEEKLY = (1.0, 1.0, 1.0, 1.0, 1.0, 0.95, 0.9)
# (share of sites, attraction weight)
DEFAULT_TIERS = ((0.04, 8.0), (0.46, 2.0), (0.50, 0.3))   # a few hubs, many ordinary sites


class SynthError(ValueError):
    pass


@dataclass
class Site:
    lat: float
    lon: float
    attraction: float
    profile: tuple | None = None     # optional per-site 24-hour multiplier


@dataclass
class WorldConfig:
    bbox: tuple = field(default_factory=lambda: bbox_from_meters(30.60, 104.00, 12_000, 12_000))
    n_trucks: int = 160
    n_sites: int = 128
    sites: list | None = None         # explicit Site list; placed at random when None
    tiers: tuple = DEFAULT_TIERS
    cell_size: float = DEFAULT_CELL_M
    dwell_mean_s: float = 5400.0
    dwell_shape: float = 6.0
    dwell_min_s: float = 720.0
    speed_mps: float = 8.0
    daily: tuple = DEFAULT_DAILY
    weekly: tuple = DEFAULT_WEEKLY
    days: int = 14
    t0: int = 1_659_312_000           # a Monday, 00:00 UTC
    seed: int = 0

    def __post_init__(self):
        self.bbox = tuple(float(v) for v in self.bbox)
        self.daily = tuple(float(v) for v in self.daily)
        self.weekly = tuple(float(v) for v in self.weekly)
        self.tiers = tuple(tuple(t) for t in self.tiers)
        if self.sites is not None:
            self.sites = [s if isinstance(s, Site) else Site(**s) for s in self.sites]
            self.n_sites = len(self.sites)
        self.validate()

    def validate(self):
        if self.n_sites < 2:
            raise SynthError("need at least 2 sites")
        if self.n_trucks < 1 or self.days < 1:
            raise SynthError("n_trucks and days must be positive")
        if len(self.daily) != 24 or len(self.weekly) != 7:
            raise SynthError("daily profile needs 24 values and weekly profile 7")
        if min(self.daily) < 0 or min(self.weekly) < 0 or max(self.daily) <= 0 or max(self.weekly) <= 0:
            raise SynthError("profiles must be non-negative and not all zero")
        if self.dwell_mean_s <= DEFAULT_THETA_S or self.dwell_min_s < DEFAULT_THETA_S + CADENCE_S:
            raise SynthError("dwell mean must exceed theta and the minimum dwell must clear it by one fix")
        if self.speed_mps <= 0:
            raise SynthError("speed must be positive")
        lat_min, lon_min, lat_max, lon_max = self.bbox
        for s in self.sites or []:
            if not (lat_min <= s.lat <= lat_max and lon_min <= s.lon <= lon_max):
                raise SynthError(f"site ({s.lat}, {s.lon}) lies outside the bbox")
            if s.attraction < 0:
                raise SynthError("site attraction must be non-negative")

    @property
    def t_end(self) -> int:
        return self.t0 + self.days * 86_400

    @property
    def ref_lat(self) -> float:
        return (self.bbox[0] + self.bbox[2]) / 2

    def to_dict(self):
        d = asdict(self)
        d["sites"] = None if self.sites is None else [asdict(s) for s in self.sites]
        return d


def default_fixture(seed=0, **overrides) -> WorldConfig:
    return WorldConfig(seed=seed, **overrides)


@dataclass
class GroundTruth:
    dwells: list                       # (truck_id, site index, t_start, t_end)
    sites: list                        # Site per index
    expected: np.ndarray               # [site, slot] expected distinct trucks dwelling
    slot_len: int = DEFAULT_SLOT_S
    t0: int = 0

    def to_json(self, path):
        Path(path).write_text(json.dumps({
            "dwells": [list(d) for d in self.dwells],
            "sites": [asdict(s) for s in self.sites],
            "expected": np.round(self.expected, 9).tolist(),
            "slot_len": self.slot_len, "t0": self.t0,
        }, sort_keys=True) + "\n")


@dataclass
class SynthResult:
    tracks: dict                       # truck_id -> (t int64, lat, lon)
    truth: GroundTruth

    def n_points(self) -> int:
        return sum(len(t) for t, _, _ in self.tracks.values())

    def points(self) -> dict:
        return {tid: [TrajectoryPoint(tid, float(a), float(b), float(c)) for a, b, c in zip(t, lat, lon)]
                for tid, (t, lat, lon) in self.tracks.items()}

    def iter_rows(self):
        for tid in sorted(self.tracks):
            t, lat, lon = self.tracks[tid]
            for a, b, c in zip(t.tolist(), lat.tolist(), lon.tolist()):
                yield tid, a, b, c

    def write_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            fh.write(",".join(TRAJECTORY_HEADER) + "\n")
            for tid, a, b, c in self.iter_rows():
                fh.write(f"{tid},{a},{b:.7f},{c:.7f}\n")


# --------------------------------------------------------------------------

def place_sites(config: WorldConfig, rng) -> list:
    """One site per randomly chosen cell, inside the cell's inner square; tiered attraction."""
    grid = build_grid(config.bbox, config.cell_size)
    if config.n_sites > grid.n_cells:
        raise SynthError(f"{config.n_sites} sites do not fit in {grid.n_cells} cells")
    if config.cell_size <= 2 * SITE_MARGIN_M:
        raise SynthError("cells too small to host sites")
    cells = np.sort(rng.choice(grid.n_cells, size=config.n_sites, replace=False))
    weights = []
    for share, w in config.tiers:
        weights += [w] * int(round(share * config.n_sites))
    weights = (weights + [config.tiers[-1][1]] * config.n_sites)[:config.n_sites]
    weights = rng.permutation(np.array(weights, dtype=float))
    sites = []
    span = config.cell_size - 2 * SITE_MARGIN_M
    for cell, w in zip(cells, weights):
        lat0, lon0, _, _ = grid.cell_bounds(int(cell))
        north = SITE_MARGIN_M + rng.random() * span
        east = SITE_MARGIN_M + rng.random() * span
        lat = lat0 + north / M_PER_DEG_LAT
        lon = lon0 + east / grid.m_per_deg_lon
        if lat > config.bbox[2] or lon > config.bbox[3]:
            raise SynthError("site fell outside the bbox; widen the bbox to whole cells")
        sites.append(Site(round(lat, 7), round(lon, 7), float(w)))
    return sites


class _World:
    def __init__(self, config: WorldConfig, sites):
        self.cfg = config
        self.sites = sites
        self.m_lon = M_PER_DEG_LAT * math.cos(math.radians(config.ref_lat))
        self.xy = np.array([[(s.lon - config.bbox[1]) * self.m_lon, (s.lat - config.bbox[0]) * M_PER_DEG_LAT]
                            for s in sites])
        self.attr = np.array([s.attraction for s in sites])
        self.site_profile = np.array([s.profile if s.profile is not None else (1.0,) * 24 for s in sites])
        self.duty_norm = max(config.daily) * max(config.weekly)

    def duty(self, t):
        day, sec = divmod(int(t - self.cfg.t0), 86_400)
        h = sec // 3600
        wd = day % 7       # t0 is a Monday
        return self.cfg.daily[h] * self.cfg.weekly[wd] / self.duty_norm

    def choice_weights(self, t, current):
        h = (int(t - self.cfg.t0) % 86_400) // 3600
        w = self.attr * self.site_profile[:, h]
        if current is not None:
            w = w.copy()
            w[current] = 0.0
        return w

    def to_latlon(self, x, y):
        return self.cfg.bbox[0] + y / M_PER_DEG_LAT, self.cfg.bbox[1] + x / self.m_lon

    def dwell(self, rng):
        c = self.cfg
        d = rng.gamma(c.dwell_shape, c.dwell_mean_s / c.dwell_shape)
        return max(c.dwell_min_s, CADENCE_S * round(d / CADENCE_S))


def _disc(rng, n, radius):
    r = radius * np.sqrt(rng.random(n))
    a = 2 * np.pi * rng.random(n)
    return r * np.cos(a), r * np.sin(a)


def _simulate_truck(world: _World, tid: str, rng):
    c = world.cfg
    t = c.t0 + CADENCE_S * int(rng.integers(0, 3600 // CADENCE_S))
    w0 = world.attr / world.attr.sum()
    here = int(rng.choice(len(world.sites), p=w0))
    ts, xs, ys, dwells = [], [], [], []
    while t < c.t_end:
        if rng.random() >= world.duty(t):
            t += OFF_DUTY_S
            continue
        w = world.choice_weights(t, here)
        if w.sum() <= 0:
            t += OFF_DUTY_S
            continue
        dest = int(rng.choice(len(w), p=w / w.sum()))
        (x0, y0), (x1, y1) = world.xy[here], world.xy[dest]
        n = max(1, math.ceil(math.hypot(x1 - x0, y1 - y0) / (c.speed_mps * CADENCE_S)))
        d = world.dwell(rng)
        arrive = t + n * CADENCE_S
        if arrive + d > c.t_end:
            break
        # travel fixes strictly between the two sites
        frac = np.arange(1, n) / n
        jx, jy = _disc(rng, n - 1, JITTER_M)
        ts.append(t + CADENCE_S * np.arange(1, n))
        xs.append(x0 + (x1 - x0) * frac + jx)
        ys.append(y0 + (y1 - y0) * frac + jy)
        # dwell fixes from arrival through arrival + d
        m = int(d // CADENCE_S) + 1
        jx, jy = _disc(rng, m, DWELL_RADIUS_M)
        ts.append(arrive + CADENCE_S * np.arange(m))
        xs.append(x1 + jx)
        ys.append(y1 + jy)
        dwells.append((tid, dest, int(arrive), int(arrive + (m - 1) * CADENCE_S)))
        here = dest
        t = arrive + m * CADENCE_S
    if ts:
        tt = np.concatenate(ts).astype(np.int64)
        lat, lon = world.to_latlon(np.concatenate(xs), np.concatenate(ys))
    else:
        tt, lat, lon = np.zeros(0, np.int64), np.zeros(0), np.zeros(0)
    return (tt, np.round(lat, 7), np.round(lon, 7)), dwells


def _dwell_survival(config: WorldConfig, x):
    """P(dwell > x) for the clipped gamma dwell law."""
    scale = config.dwell_mean_s / config.dwell_shape
    tail = gammaincc(config.dwell_shape, np.maximum(x, 0) / scale)
    return np.where(x < config.dwell_min_s, 1.0, tail)


def expected_intensity(config: WorldConfig, sites, slot_len=DEFAULT_SLOT_S, step=60) -> np.ndarray:
    """[site, slot] expected number of trucks dwelling at each site during each slot.

    Dwells start at rate trucks * duty(u) * share / cycle, where a cycle is one
    mean dwell plus one mean trip; a dwell begun at u covers slot [a, a + L)
    when u < a + L and it lasts past a.
    """
    world = _World(config, sites)
    n_slots = config.days * 86_400 // slot_len
    xy = world.xy
    share = world.attr / world.attr.sum()
    dist = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
    mean_trip = float(share @ dist @ share) / config.speed_mps
    dwells = _dwell_survival(config, np.arange(0, 40 * config.dwell_mean_s, step))
    mean_dwell = float(dwells.sum() * step)
    cycle = mean_dwell + mean_trip

    u = config.t0 + np.arange(0, config.days * 86_400, step)
    duty = np.array([world.duty(v) for v in u])
    hours = ((u - config.t0) % 86_400) // 3600
    w = world.attr[:, None] * world.site_profile[:, hours]
    tot = w.sum(axis=0)
    rate = config.n_trucks * duty * np.divide(w, tot, out=np.zeros_like(w), where=tot > 0) / cycle * step

    # kernel over lag x = a - u, from -L (start inside the slot) to the longest dwell
    lead = slot_len // step
    lags = np.arange(-lead + 1, len(dwells)) * step
    kern = _dwell_survival(config, lags.astype(float))
    kern = kern[:np.flatnonzero(kern > 1e-9).max() + 1]
    out = np.zeros((len(sites), n_slots))
    starts = np.arange(n_slots) * (slot_len // step)
    for i in range(len(sites)):
        full = np.convolve(rate[i], kern)
        # entry a + lead - 1 collects every u with a - u in [-L + step, ...)
        out[i] = full[starts + lead - 1]
    return out


def generate(config: WorldConfig) -> SynthResult:
    """Simulate the fleet.  Deterministic for a given config (including seed)."""
    config.validate()
    root = np.random.SeedSequence(config.seed)
    site_seq, *truck_seqs = root.spawn(1 + config.n_trucks)
    sites = config.sites if config.sites is not None else place_sites(config, np.random.default_rng(site_seq))
    world = _World(config, sites)
    tracks, dwells = {}, []
    width = max(4, len(str(config.n_trucks)))
    for k, seq in enumerate(truck_seqs):
        tid = f"T{k:0{width}d}"
        tracks[tid], d = _simulate_truck(world, tid, np.random.default_rng(seq))
        dwells += d
    truth = GroundTruth(dwells, list(sites), expected_intensity(config, sites), DEFAULT_SLOT_S, config.t0)
    return SynthResult(tracks, truth)


def imbalance_profile(config: WorldConfig, medium_bound=4, keep_fraction=None, sites=None) -> dict:
    """Expected class mix over site cells, treating per-slot counts as Poisson.

    With ``keep_fraction`` only the busiest share of site cells (by expected
    mean) is considered, mirroring grid downsampling.
    """
    if sites is None:
        sites = config.sites if config.sites is not None else place_sites(
            config, np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0]))
    lam = expected_intensity(config, sites)
    if keep_fraction is not None:
        means = lam.mean(axis=1)
        n_keep = max(1, math.ceil(keep_fraction * np.count_nonzero(means > 0) - 1e-9))
        lam = lam[np.argsort(-means, kind="stable")[:n_keep]]
    p0 = np.exp(-lam)
    # P(1 <= N <= b) by summing the Poisson pmf
    pmf, cdf = p0.copy(), p0.copy()
    for k in range(1, medium_bound + 1):
        pmf = pmf * lam / k
        cdf = cdf + pmf
    return {"zero": float(p0.mean()), "medium": float((cdf - p0).mean()),
            "high": float((1 - cdf).mean()), "n_cells": int(lam.shape[0])}


def write_truth(path, truth: GroundTruth):
    truth.to_json(path)


def read_dwells(path):
    with Path(path).open() as fh:
        return [tuple(d) for d in json.load(fh)["dwells"]]
