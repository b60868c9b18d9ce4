import numpy as np
import pytest
from hypothesis import given, strategies as st

from truckcast import dtw, features as F, gridding as G
from truckcast.ingest import TrajectoryPoint

import oracles

GRID = G.build_grid(G.bbox_from_meters(30.6, 104.0, 5000, 5000), 1000)


def at(cell, de=0.0, dn=0.0):
    lat, lon = GRID.cell_center(cell)
    return lat + dn / G.M_PER_DEG_LAT, lon + de / GRID.m_per_deg_lon


def track(tid, cells):
    return [TrajectoryPoint(tid, 30.0 * k, *at(c)) for k, c in enumerate(cells)]


# -- adjacency ---------------------------------------------------------------

def test_side_by_side_cells_linked():
    adj = F.build_adjacency({"a": track("a", [0, 1])}, GRID, [0, 1, 2])
    assert adj.a.tolist() == [[0, 1, 0], [1, 0, 0], [0, 0, 0]]


def test_no_movement_gives_zero(caplog):
    adj = F.build_adjacency({"a": track("a", [3, 3, 3])}, GRID, [3, 4])
    assert not adj.a.any()
    assert "all zero" in caplog.text


def test_cell_skip_and_unretained_ignored():
    adj = F.build_adjacency({"a": track("a", [0, 2, 7, 12])}, GRID, [0, 2, 12])
    assert not adj.a.any()          # 0->2 skips a cell, 7 is not retained


def test_empty_retained_rejected():
    with pytest.raises(F.FeatureError):
        F.build_adjacency({}, GRID, [])


def random_tracks(seed, n_trucks=5, n=60):
    rng = np.random.default_rng(seed)
    lat0, lon0, lat1, lon1 = G.bbox_from_meters(30.6, 104.0, 5000, 5000)
    out = {}
    for k in range(n_trucks):
        lat = np.clip(lat0 + 0.02 + np.cumsum(rng.normal(0, 600, n)) / G.M_PER_DEG_LAT, lat0 - 0.005, lat1 + 0.005)
        lon = np.clip(lon0 + 0.02 + np.cumsum(rng.normal(0, 600, n)) / GRID.m_per_deg_lon, lon0 - 0.005, lon1 + 0.005)
        out[f"t{k}"] = [TrajectoryPoint(f"t{k}", 30.0 * i, float(a), float(b)) for i, (a, b) in enumerate(zip(lat, lon))]
    return out


@given(st.integers(0, 10_000), st.integers(1, 25))
def test_adjacency_matches_pair_enumeration(seed, n_keep):
    tracks = random_tracks(seed)
    retained = sorted(np.random.default_rng(seed).choice(25, n_keep, replace=False).tolist())
    adj = F.build_adjacency(tracks, GRID, retained)
    want = oracles.adjacency({k: [(p.lat, p.lon) for p in v] for k, v in tracks.items()}, GRID, retained)
    got = {(retained[i], retained[j]) for i, j in zip(*np.nonzero(adj.a)) if i < j}
    assert got == want
    a = adj.a
    assert (a == a.T).all() and not a.diagonal().any() and set(np.unique(a)) <= {0, 1}
    for i, j in zip(*np.nonzero(a)):
        assert GRID.are_neighbors(retained[i], retained[j])


def test_normalized_adjacency_isolated_node():
    a = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    ah = F.normalized_adjacency(a)
    assert ah[2, 2] == 1.0
    assert ah[0, 1] == pytest.approx(0.5)
    assert np.allclose(ah, ah.T)


def test_triplets_round_trip(tmp_path):
    m = np.array([[0.0, 1.5], [1.5, 0.0]])
    F.save_triplets(tmp_path / "d.csv", m, [7, 9])
    assert (tmp_path / "d.csv").read_text().splitlines()[0] == "i,j,value"
    assert (F.load_triplets(tmp_path / "d.csv", [7, 9]) == m).all()


# -- DTW ---------------------------------------------------------------------

def test_dtw_examples():
    assert dtw.exact_dtw([1, 2, 3], [1, 2, 3]) == 0
    assert dtw.exact_dtw([1, 2, 3], [1, 2, 3, 3]) == 0
    assert dtw.exact_dtw([0], [5]) == 5
    assert dtw.fast_dtw([0], [5]) == 5


def test_dtw_empty_rejected():
    with pytest.raises(ValueError):
        dtw.exact_dtw([], [1])
    with pytest.raises(ValueError):
        dtw.fast_dtw([1], [], 1)
    with pytest.raises(ValueError):
        dtw.fast_dtw([1], [1], -1)


seqs = st.lists(st.integers(0, 9), min_size=1, max_size=20)


@given(seqs, seqs)
def test_exact_dtw_matches_recursive_oracle(x, y):
    assert dtw.exact_dtw(x, y) == pytest.approx(oracles.dtw(x, y), abs=1e-12)


@given(seqs, seqs)
def test_table_satisfies_recurrence(x, y):
    D = dtw.dtw_table(x, y)
    for i in range(len(x)):
        for j in range(len(y)):
            prev = [D[a, b] for a, b in ((i - 1, j), (i, j - 1), (i - 1, j - 1)) if a >= 0 and b >= 0]
            assert D[i, j] == abs(x[i] - y[j]) + (min(prev) if prev else 0)


@given(seqs, seqs, st.integers(0, 3))
def test_fast_dtw_upper_bounds_exact(x, y, r):
    assert dtw.fast_dtw(x, y, r) >= dtw.exact_dtw(x, y) - 1e-12


@given(seqs, seqs)
def test_fast_dtw_full_window_is_exact(x, y):
    assert dtw.fast_dtw(x, y, max(len(x), len(y))) == pytest.approx(dtw.exact_dtw(x, y), abs=1e-12)


@given(seqs, st.integers(0, 4))
def test_identical_sequences_zero(x, r):
    assert dtw.fast_dtw(x, x, r) == 0


def test_fast_dtw_path_is_monotone_and_consistent():
    rng = np.random.default_rng(3)
    x, y = rng.random(50), rng.random(37)
    cost, path = dtw.fast_dtw_path(x, y, 1)
    assert path[0] == (0, 0) and path[-1] == (49, 36)
    for (a, b), (c, d) in zip(path, path[1:]):
        assert (c - a, d - b) in ((1, 0), (0, 1), (1, 1))
    assert cost == pytest.approx(sum(abs(x[i] - y[j]) for i, j in path))


# -- semantic matrix ---------------------------------------------------------

def test_semantic_matrix_properties():
    base = np.array([0, 0, 3, 5, 2, 0, 0, 1, 4, 0])
    counts = np.stack([base, base, np.roll(base, 1), np.arange(10) % 3])
    sm = F.build_semantic_matrix(G.ActivityTensor(counts, 0, 1800, [0, 1, 2, 3]), 1)
    d = sm.d
    assert d[0, 1] == 0 and (d == d.T).all() and (d >= 0).all() and not d.diagonal().any()
    # a one-slot shift is nearly free under warping, not under pointwise L1
    assert d[0, 2] < np.abs(base - np.roll(base, 1)).sum()


def test_semantic_needs_two_cells():
    with pytest.raises(F.FeatureError):
        F.build_semantic_matrix(G.ActivityTensor(np.zeros((1, 5), int), 0, 1800, [0]))


def test_semantic_neighbors():
    d = np.array([[0, 1, 2, 3], [1, 0, 1, 1], [2, 1, 0, 5], [3, 1, 5, 0.]])
    m = F.semantic_neighbors(d, 2)
    assert m.sum(axis=1).tolist() == [2, 2, 2, 2] and not m.diagonal().any()
    assert m[0].tolist() == [False, True, True, False]
    assert m[1].tolist() == [True, False, True, False]      # ties broken by index
    with pytest.raises(F.FeatureError):
        F.semantic_neighbors(d, 4)


# -- temporal encodings and windows ------------------------------------------

MONDAY = 1_659_312_000


@pytest.mark.parametrize("slot,h,w", [(0, 0, 0), (3, 1, 0), (48, 0, 1), (48 * 6 + 47, 23, 6), (48 * 7, 0, 0)])
def test_temporal_encoding(slot, h, w):
    assert F.temporal_encoding(slot, MONDAY, 1800) == F.TemporalEncoding(h, w)


def test_temporal_encoding_timezone():
    assert F.temporal_encoding(0, MONDAY, 1800, "Asia/Shanghai") == F.TemporalEncoding(8, 0)


def classes(n_cells, n_slots, seed=0):
    lab = np.random.default_rng(seed).integers(0, 3, (n_cells, n_slots))
    return G.ClassTensor(lab, (0, 4), MONDAY, 1800, list(range(100, 100 + n_cells)))


def test_thirteen_slots_one_sample_per_cell():
    s = F.make_windows(classes(5, 13), 12, 1)
    assert len(s) == 5 and s.targets.tolist() == [12]


@given(st.integers(1, 6), st.integers(1, 4), st.integers(0, 10))
def test_sample_count_and_no_overlap(k, h, extra):
    n_slots = k + h + extra
    s = F.make_windows(classes(3, n_slots), k, h)
    assert len(s) == 3 * (n_slots - k - h + 1)
    win = s.window_slots(s.targets)
    assert (win.max(axis=1) == s.targets - h).all() and (win.min() >= 0)
    assert (np.diff(win, axis=1) == 1).all()


def test_insufficient_slots():
    with pytest.raises(F.FeatureError):
        F.make_windows(classes(2, 12), 12, 1)


def test_batch_contents():
    ct = classes(3, 20)
    s = F.make_windows(ct, 4, 2)
    b = s.batch(np.array([10, 15]))
    assert b["x"].shape == (2, 3, 4, 3)
    assert (b["x"][1, 2].argmax(-1) == ct.labels[2, 10:14]).all()
    assert (b["y"][1] == ct.labels[:, 15]).all()
    assert b["hours"][0].tolist() == [2, 3, 3, 4]      # slots 5..8


def test_split_chronological():
    s = F.make_windows(classes(2, 22), 12, 1)      # targets 12..21
    tr, te = F.split_dataset(s, 0.8)
    assert tr.targets.tolist() == list(range(12, 20)) and te.targets.tolist() == [20, 21]
    assert tr.targets.max() < te.targets.min()


def test_split_rounds_down_and_keeps_a_test_slot():
    s = F.make_windows(classes(2, 22), 12, 1)
    tr, te = F.split_dataset(s, 0.999)
    assert (len(tr.targets), len(te.targets)) == (9, 1)
    with pytest.raises(F.FeatureError):
        F.split_dataset(s, 1.0)
    with pytest.raises(F.FeatureError):
        F.split_dataset(s.with_targets([12]), 0.5)


def test_random_split_is_disjoint_and_seeded():
    s = F.make_windows(classes(2, 40), 12, 1)
    a1, b1 = F.split_dataset(s, 0.8, seed=5, chronological=False)
    a2, _ = F.split_dataset(s, 0.8, seed=5, chronological=False)
    assert (a1.targets == a2.targets).all()
    assert not set(a1.targets) & set(b1.targets)
    assert sorted([*a1.targets, *b1.targets]) == s.targets.tolist()


def test_sample_file_round_trip(tmp_path):
    s = F.make_windows(classes(3, 16), 12, 2)
    F.write_samples(tmp_path / "s.bin", s)
    header, recs = F.read_samples(tmp_path / "s.bin")
    assert header["k"] == 12 and header["horizon"] == 2 and header["cell_ids"] == [100, 101, 102]
    assert (recs == s.records()).all() and recs.shape == (len(s), 3 + 36)
    assert recs[0, -1] == s.labels[0, s.targets[0]]
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(F.FeatureError):
        F.read_samples(tmp_path / "bad.bin")


def test_count_inputs():
    x = F.count_inputs(np.array([[0, 1, 3]]))
    assert x.shape == (1, 3, 1) and x[0, 0, 0] == 0 and x.max() == pytest.approx(1.0)
